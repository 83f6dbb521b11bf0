"""Clipped-surrogate policy optimization with GAE, in plain numpy.

The surrogate gradient is hand-derived (see loss_and_grads); tests check it
against central finite differences. Training collects fixed-length rollouts
from a batch of environments, runs several epochs of shuffled minibatch Adam
updates, evaluates the deterministic policy on fixed-seed episodes at a fixed
cadence, and stops early when no improvement is seen for `patience`
consecutive evaluations. The best-so-far parameters are returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import rng as rngmod
from .genotype import BodyGeometry, DEFAULT_BODY, Genome
from .optics import DEFAULT_OPTICS, OpticsGeometry
from .policy import ACTION_DIM, LOG2PI, PolicyNetwork, build_network
from .world import TRAINING_WEIGHTS, WorldEngine, WorldSpec


@dataclass(frozen=True)
class TrainerConfig:
    max_steps: int = 50_000
    rollout_steps: int = 2048
    minibatch_size: int = 256
    epochs: int = 4
    clip_ratio: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    learning_rate: float = 3e-4
    entropy_coef: float = 0.01
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    eval_interval: int = 5000
    eval_episodes: int = 3
    patience: int = 5
    num_envs: int = 8
    fitness_floor: float = -50.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(d: dict) -> "TrainerConfig":
        known = {k: v for k, v in d.items() if k in TrainerConfig.__dataclass_fields__}
        return TrainerConfig(**known)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    network: PolicyNetwork
    eval_curve: list[tuple[int, float]]
    update_log: list[dict]
    steps: int
    early_stopped: bool
    diverged: bool

    @property
    def best_eval(self) -> float:
        return max((r for _, r in self.eval_curve), default=float("-inf"))

    def curve_summary(self) -> dict:
        return {
            "steps": self.steps,
            "evals": len(self.eval_curve),
            "best_eval": self.best_eval,
            "final_eval": self.eval_curve[-1][1] if self.eval_curve else float("nan"),
            "early_stopped": self.early_stopped,
            "diverged": self.diverged,
        }


@dataclass
class RolloutBuffer:
    """One rollout window of (T, N, ...) tensors plus GAE outputs."""

    eyes: np.ndarray
    extras: np.ndarray
    samples: np.ndarray      # pre-squash Gaussian samples u
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def compute_gae(self, last_values: np.ndarray, discount: float, lam: float) -> None:
        t_len, n = self.rewards.shape
        adv = np.zeros((t_len, n))
        carry = np.zeros(n)
        next_values = last_values
        for t in range(t_len - 1, -1, -1):
            not_done = 1.0 - self.dones[t]
            delta = self.rewards[t] + discount * next_values * not_done - self.values[t]
            carry = delta + discount * lam * not_done * carry
            adv[t] = carry
            next_values = self.values[t]
        self.advantages = adv
        self.returns = adv + self.values

    def flat(self) -> dict[str, np.ndarray]:
        t_len, n = self.rewards.shape
        b = t_len * n
        return {
            "eyes": self.eyes.reshape(b, *self.eyes.shape[2:]),
            "extras": self.extras.reshape(b, -1),
            "samples": self.samples.reshape(b, ACTION_DIM),
            "log_probs": self.log_probs.reshape(b),
            "advantages": self.advantages.reshape(b),
            "returns": self.returns.reshape(b),
        }


def loss_and_grads(net: PolicyNetwork, batch: dict[str, np.ndarray], cfg: TrainerConfig):
    """Surrogate + value + entropy loss with analytic parameter gradients."""
    p = net.params
    eyes, extras = batch["eyes"], batch["extras"]
    u = batch["samples"]
    logp_old = batch["log_probs"]
    adv = batch["advantages"]
    ret = batch["returns"]
    b = eyes.shape[0]

    # divide/overflow on diverged parameters produce non-finite losses that
    # the caller turns into the fitness-floor path
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        mean, value, ctx = net.forward(eyes, extras, cache=True)
        log_std = p["log_std"]
        std = np.exp(log_std)
        diff = (u - mean) / std
        logp = -0.5 * np.sum(diff**2, axis=1) - np.sum(log_std) - 0.5 * ACTION_DIM * LOG2PI
        ratio = np.exp(logp - logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * adv
    use_unclipped = unclipped <= clipped
    pg_loss = -np.mean(np.where(use_unclipped, unclipped, clipped))
    verr = value - ret
    v_loss = np.mean(verr**2)
    entropy = float(np.sum(log_std) + 0.5 * ACTION_DIM * (1.0 + LOG2PI))
    loss = pg_loss + cfg.vf_coef * v_loss - cfg.entropy_coef * entropy

    # ---- backward ----
    inside = (ratio > 1.0 - cfg.clip_ratio) & (ratio < 1.0 + cfg.clip_ratio)
    dratio = np.where(use_unclipped, adv, np.where(inside, adv, 0.0)) * (-1.0 / b)
    dlogp = dratio * ratio
    dmean = dlogp[:, None] * (diff / std)
    g = {k: np.zeros_like(v) for k, v in p.items()}
    g["log_std"] = (dlogp[:, None] * (diff**2 - 1.0)).sum(axis=0) - cfg.entropy_coef
    dvalue = cfg.vf_coef * 2.0 * verr / b

    h2, h1, t0, z = ctx["h2"], ctx["h1"], ctx["t0"], ctx["z"]
    g["mean_w"] = h2.T @ dmean
    g["mean_b"] = dmean.sum(axis=0)
    g["value_w"] = (h2.T @ dvalue)[:, None]
    g["value_b"] = np.array([dvalue.sum()])
    gh2 = (dmean @ p["mean_w"].T + dvalue[:, None] * p["value_w"].T) * (1.0 - h2**2)
    g["h2_w"] = h1.T @ gh2
    g["h2_b"] = gh2.sum(axis=0)
    gh1 = (gh2 @ p["h2_w"].T) * (1.0 - h1**2)
    g["h1_w"] = t0.T @ gh1
    g["h1_b"] = gh1.sum(axis=0)
    dt0 = gh1 @ p["h1_w"].T
    d = net.dims
    dz = dt0[:, : d.n_eyes * d.encoder_out].reshape(b, d.n_eyes, d.encoder_out)
    dz = dz * (1.0 - z**2)
    for e in range(d.n_eyes):
        g[f"enc{e}_w"] = eyes[:, e].T @ dz[:, e]
        g[f"enc{e}_b"] = dz[:, e].sum(axis=0)

    stats = {"loss": float(loss), "pg_loss": float(pg_loss), "v_loss": float(v_loss),
             "entropy": entropy, "clip_frac": float(np.mean(~use_unclipped))}
    return loss, g, stats


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, gk in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gk
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gk**2
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(gv**2)) for gv in grads.values()))
    if max_norm > 0.0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


EnvFactory = Callable[[int, int], WorldEngine]


def _world_env_factory(spec: WorldSpec, genome: Genome, body: BodyGeometry,
                       optics: OpticsGeometry) -> EnvFactory:
    def make(seed: int, n_envs: int) -> WorldEngine:
        return WorldEngine(spec, genome, n_envs, seed, TRAINING_WEIGHTS,
                           respawn_on_contact=False, body=body, optics=optics,
                           verbose_info=False)
    return make


def evaluate_policy(net: PolicyNetwork, env_factory: EnvFactory, seed: int,
                    episodes: int, episode_cap: int) -> float:
    """Mean deterministic-policy return over fixed-seed episodes (batched).

    One engine hosts all episodes; env i draws from its (seed, i) stream, so
    every evaluation replays the same episode set.
    """
    env = env_factory(seed, episodes)
    obs = env.reset()
    totals = np.zeros(episodes)
    finished = np.zeros(episodes, dtype=bool)
    for _ in range(episode_cap):
        eyes, extras = net.split_obs_batch(obs["stack"], obs["contact"], obs["prev_action"])
        action, _, _, _ = net.act_batch(eyes, extras, deterministic=True)
        obs, rewards, dones, _ = env.step(action)
        totals += np.where(finished, 0.0, rewards)
        finished |= dones
        if finished.all():
            break
    return float(totals.mean())


def train(genome: Genome, spec: WorldSpec, cfg: TrainerConfig, seed: int,
          body: BodyGeometry = DEFAULT_BODY,
          optics: OpticsGeometry = DEFAULT_OPTICS,
          env_factory: Optional[EnvFactory] = None,
          episode_cap: Optional[int] = None) -> TrainResult:
    """Train one agent's policy; returns best-so-far parameters and the curve."""
    net = build_network(genome, seed)
    rng_train = rngmod.rng_for(seed, rngmod.STREAM_TRAIN)
    if env_factory is None:
        env_factory = _world_env_factory(spec, genome, body, optics)
    if episode_cap is None:
        episode_cap = spec.episode_steps

    env = env_factory(seed, cfg.num_envs)
    obs = env.reset()
    n_envs = env.n
    t_len = max(1, cfg.rollout_steps // n_envs)
    adam = Adam(net.params, cfg.learning_rate)
    eval_seed = rngmod.agent_seed(seed, 7001, 0)

    eval_curve: list[tuple[int, float]] = []
    update_log: list[dict] = []
    best_return = float("-inf")
    best_params = {k: v.copy() for k, v in net.params.items()}
    non_improving = 0
    steps_done = 0
    last_eval = 0
    early_stopped = False
    diverged = False

    def run_eval() -> None:
        nonlocal best_return, non_improving, best_params
        ret = evaluate_policy(net, env_factory, eval_seed, cfg.eval_episodes, episode_cap)
        eval_curve.append((steps_done, ret))
        if ret > best_return:
            best_return = ret
            best_params = {k: v.copy() for k, v in net.params.items()}
            non_improving = 0
        else:
            non_improving += 1

    while steps_done < cfg.max_steps and not early_stopped and not diverged:
        d = net.dims
        remaining = cfg.max_steps - steps_done
        t_cur = min(t_len, max(1, -(-remaining // n_envs)))  # honor max_steps
        buf = RolloutBuffer(
            eyes=np.empty((t_cur, n_envs, d.n_eyes, d.eye_input)),
            extras=np.empty((t_cur, n_envs, 3)),
            samples=np.empty((t_cur, n_envs, ACTION_DIM)),
            log_probs=np.empty((t_cur, n_envs)),
            rewards=np.empty((t_cur, n_envs)),
            values=np.empty((t_cur, n_envs)),
            dones=np.empty((t_cur, n_envs)),
        )
        for t in range(t_cur):
            eyes, extras = net.split_obs_batch(obs["stack"], obs["contact"], obs["prev_action"])
            action, u, logp, value = net.act_batch(eyes, extras, rng=rng_train)
            obs, rewards, dones, _ = env.step(action)
            buf.eyes[t] = eyes
            buf.extras[t] = extras
            buf.samples[t] = u
            buf.log_probs[t] = logp
            buf.rewards[t] = rewards
            buf.values[t] = value
            buf.dones[t] = dones.astype(float)
        eyes, extras = net.split_obs_batch(obs["stack"], obs["contact"], obs["prev_action"])
        _, last_values, _ = net.forward(eyes, extras)
        buf.compute_gae(last_values, cfg.discount, cfg.gae_lambda)

        flat = buf.flat()
        b_total = flat["log_probs"].size
        stats: dict = {}
        for _ in range(cfg.epochs):
            order = rng_train.permutation(b_total)
            for start in range(0, b_total, cfg.minibatch_size):
                idx = order[start:start + cfg.minibatch_size]
                if idx.size < 2:
                    continue
                adv = flat["advantages"][idx]
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
                batch = {
                    "eyes": flat["eyes"][idx],
                    "extras": flat["extras"][idx],
                    "samples": flat["samples"][idx],
                    "log_probs": flat["log_probs"][idx],
                    "advantages": adv,
                    "returns": flat["returns"][idx],
                }
                # overflow on a diverged step is expected; finiteness checks
                # below turn it into the fitness-floor path
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads, stats = loss_and_grads(net, batch, cfg)
                    if not math.isfinite(loss):
                        diverged = True
                        break
                    clip_grad_norm(grads, cfg.max_grad_norm)
                    adam.step(net.params, grads)
            if diverged:
                break
        if not diverged and not all(np.all(np.isfinite(v)) for v in net.params.values()):
            diverged = True
        steps_done += t_cur * n_envs
        if not diverged:
            update_log.append({"steps": steps_done, **stats})
            if steps_done - last_eval >= cfg.eval_interval:
                last_eval = steps_done
                run_eval()
                if non_improving >= cfg.patience:
                    early_stopped = True

    if not diverged and (not eval_curve or eval_curve[-1][0] != steps_done) and not early_stopped:
        run_eval()

    net.params = best_params if best_return > float("-inf") else net.params
    return TrainResult(network=net, eval_curve=eval_curve, update_log=update_log,
                       steps=steps_done, early_stopped=early_stopped, diverged=diverged)
