import math

import numpy as np
import pytest

from evovision.genotype import Genome, MorphologicalGenes, NeuralGenes, OpticalGenes
from evovision.policy import ACTION_DIM, build_network
from evovision.ppo import (RolloutBuffer, TrainerConfig, clip_grad_norm, loss_and_grads,
                           train)
from evovision.world import detection_spec


def tiny_genome(n_eyes=1, res=2, hidden=4, memory=1):
    return Genome(
        morphological=MorphologicalGenes(num_eyes=n_eyes, placement_range=30.0,
                                         fov=45.0, resolution_w=res, resolution_h=res),
        optical=OpticalGenes(enabled=False),
        neural=NeuralGenes(memory_frames=memory, hidden_neurons=hidden),
    )


def random_batch(net, size, seed):
    rng = np.random.default_rng(seed)
    d = net.dims
    eyes = rng.normal(size=(size, d.n_eyes, d.eye_input))
    extras = rng.normal(size=(size, 3))
    mean, value, _ = net.forward(eyes, extras)
    u = mean + rng.normal(size=mean.shape) * np.exp(net.params["log_std"])
    logp = net.log_prob(mean, u)
    # perturb the params afterward so ratios are not exactly 1
    for k in net.params:
        net.params[k] = net.params[k] + 0.01 * rng.normal(size=net.params[k].shape)
    return {
        "eyes": eyes,
        "extras": extras,
        "samples": u,
        "log_probs": logp,
        "advantages": rng.normal(size=size),
        "returns": rng.normal(size=size),
    }


class BanditEnv:
    """One-step environment: reward 1 when the first action dim is positive.

    Mimics the WorldEngine batch protocol the trainer drives.
    """

    def __init__(self, genome, n_envs, seed):
        self.genome = genome
        self.n = n_envs
        m = genome.morphological
        self.shape = (n_envs, genome.neural.memory_frames, m.num_eyes,
                      m.resolution_h, m.resolution_w, 3)

    def _obs(self):
        return {"stack": np.ones(self.shape), "contact": np.zeros(self.n),
                "prev_action": np.zeros((self.n, 2))}

    def reset(self):
        return self._obs()

    def step(self, actions):
        rewards = (actions[:, 0] > 0.0).astype(float)
        dones = np.ones(self.n, dtype=bool)
        infos = [{"episode_return": float(r), "episode_steps": 1} for r in rewards]
        return self._obs(), rewards, dones, infos


class ConstantEnv(BanditEnv):
    def step(self, actions):
        rewards = np.full(self.n, 0.5)
        dones = np.ones(self.n, dtype=bool)
        infos = [{"episode_return": 0.5, "episode_steps": 1}] * self.n
        return self._obs(), rewards, dones, infos


class TestGradients:
    @pytest.mark.parametrize("seed,n_eyes,res,hidden", [(0, 1, 2, 4), (1, 2, 3, 5),
                                                        (2, 1, 1, 1)])
    def test_analytic_gradient_matches_finite_differences(self, seed, n_eyes, res, hidden):
        g = tiny_genome(n_eyes=n_eyes, res=res, hidden=hidden)
        net = build_network(g, seed)
        cfg = TrainerConfig()
        batch = random_batch(net, size=16, seed=seed)
        _, grads, _ = loss_and_grads(net, batch, cfg)

        h = 1e-6
        worst = 0.0
        for key in net.params:
            flat = net.params[key].ravel()
            gflat = grads[key].ravel()
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                up, _, _ = loss_and_grads(net, batch, cfg)
                flat[idx] = orig - h
                down, _, _ = loss_and_grads(net, batch, cfg)
                flat[idx] = orig
                fd = (up - down) / (2.0 * h)
                denom = max(abs(fd) + abs(gflat[idx]), 1e-8)
                worst = max(worst, abs(fd - gflat[idx]) / denom)
        assert worst <= 1e-4

    def test_grad_norm_clipping(self):
        grads = {"a": np.array([3.0, 4.0])}
        total = clip_grad_norm(grads, max_norm=1.0)
        assert total == pytest.approx(5.0)
        assert np.linalg.norm(grads["a"]) == pytest.approx(1.0, rel=1e-9)


class TestGae:
    def test_advantages_reproducible_from_rewards_and_values(self, rng):
        t_len, n = 40, 3
        buf = RolloutBuffer(
            eyes=np.zeros((t_len, n, 1, 12)),
            extras=np.zeros((t_len, n, 3)),
            samples=np.zeros((t_len, n, ACTION_DIM)),
            log_probs=np.zeros((t_len, n)),
            rewards=rng.normal(size=(t_len, n)),
            values=rng.normal(size=(t_len, n)),
            dones=(rng.uniform(size=(t_len, n)) < 0.1).astype(float),
        )
        last = rng.normal(size=n)
        gamma, lam = 0.99, 0.95
        buf.compute_gae(last, gamma, lam)

        # reference: plain recursive definition, one env at a time
        for j in range(n):
            carry = 0.0
            ref = np.zeros(t_len)
            for t in range(t_len - 1, -1, -1):
                nv = last[j] if t == t_len - 1 else buf.values[t + 1, j]
                nd = 1.0 - buf.dones[t, j]
                delta = buf.rewards[t, j] + gamma * nv * nd - buf.values[t, j]
                carry = delta + gamma * lam * nd * carry
                ref[t] = carry
            assert np.allclose(buf.advantages[:, j], ref, atol=1e-12)
        assert np.allclose(buf.returns, buf.advantages + buf.values, atol=1e-12)


class TestTraining:
    def test_bandit_solved_within_5k_steps(self):
        g = tiny_genome(res=1, hidden=4)
        cfg = TrainerConfig(max_steps=5000, rollout_steps=256, minibatch_size=64,
                            epochs=8, learning_rate=0.01, eval_interval=10**9,
                            num_envs=8, entropy_coef=0.01)
        result = train(g, detection_spec(), cfg, seed=3,
                       env_factory=lambda seed, n: BanditEnv(g, n, seed),
                       episode_cap=1)
        assert result.steps <= 5000
        net = result.network
        env = BanditEnv(g, 1, 0)
        obs = env.reset()
        eyes, extras = net.split_obs_batch(obs["stack"], obs["contact"],
                                           obs["prev_action"])
        mean, _, _ = net.forward(eyes, extras)
        std = np.exp(net.params["log_std"])
        # accuracy of the stochastic policy = P(sample > 0)
        accuracy = 0.5 * (1.0 + math.erf(mean[0, 0] / (std[0] * math.sqrt(2.0))))
        assert accuracy >= 0.95

    def test_early_stop_after_exactly_five_non_improving_evals(self):
        g = tiny_genome(res=1, hidden=2)
        cfg = TrainerConfig(max_steps=100_000, rollout_steps=64, minibatch_size=32,
                            epochs=1, eval_interval=64, eval_episodes=2,
                            patience=5, num_envs=4)
        result = train(g, detection_spec(), cfg, seed=1,
                       env_factory=lambda seed, n: ConstantEnv(g, n, seed),
                       episode_cap=1)
        assert result.early_stopped
        # first eval improves over -inf; the next five do not
        assert len(result.eval_curve) == 6
        assert result.steps < 100_000

    def test_best_eval_archive_monotone(self):
        g = tiny_genome(res=2, hidden=4)
        cfg = TrainerConfig(max_steps=2048, rollout_steps=256, minibatch_size=64,
                            epochs=2, eval_interval=512, eval_episodes=1, num_envs=4)
        result = train(g, detection_spec(episode_steps=40, noise_sigma=0.0), cfg, seed=2)
        best = -math.inf
        for _, ret in result.eval_curve:
            best = max(best, ret)
        assert result.best_eval == best

    def test_reproducible_bit_exact(self):
        g = tiny_genome(res=2, hidden=4)
        cfg = TrainerConfig(max_steps=1024, rollout_steps=256, minibatch_size=64,
                            epochs=2, eval_interval=512, eval_episodes=1, num_envs=4)
        spec = detection_spec(episode_steps=40)
        r1 = train(g, spec, cfg, seed=5)
        r2 = train(g, spec, cfg, seed=5)
        assert all(np.array_equal(r1.network.params[k], r2.network.params[k])
                   for k in r1.network.params)
        assert r1.eval_curve == r2.eval_curve

    def test_divergence_flagged_not_raised(self):
        g = tiny_genome(res=2, hidden=4)
        cfg = TrainerConfig(max_steps=1024, rollout_steps=128, minibatch_size=64,
                            epochs=4, learning_rate=1e18, max_grad_norm=0.0,
                            eval_interval=10**9, num_envs=4)
        result = train(g, detection_spec(episode_steps=40), cfg, seed=4)
        assert result.diverged

    def test_unlearnable_degenerate_sensor_still_trains(self):
        # 1x1 single-eye agent: the curve must exist and stay finite
        g = tiny_genome(n_eyes=1, res=1, hidden=2)
        cfg = TrainerConfig(max_steps=512, rollout_steps=128, minibatch_size=64,
                            epochs=1, eval_interval=256, eval_episodes=1, num_envs=4)
        result = train(g, detection_spec(episode_steps=30), cfg, seed=6)
        assert not result.diverged
        assert len(result.eval_curve) >= 1
        assert all(math.isfinite(r) for _, r in result.eval_curve)
