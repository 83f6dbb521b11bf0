"""The agent's brain: per-eye encoders feeding a shared two-layer trunk.

Architecture is a pure function of the genome: each eye owns one tanh encoder
over its flattened frame stack (memory * H * W * 3 inputs, hidden_neurons
outputs); encoder features concatenate with the contact flag and previous
action into two tanh hidden layers of hidden_neurons each, ending in a
Gaussian action head (mean + state-independent log-std) and a value head.
Actions are tanh-squashed samples; log-probabilities refer to the pre-squash
Gaussian sample, which is what the trainer stores and re-evaluates.

Everything is float64 numpy; forward passes cache activations for the manual
backward pass in ppo.py.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .genotype import Genome, genome_to_text
from .imgio import load_arrays, save_arrays
from .world import Observation

N_EXTRAS = 3   # contact + previous action (2)
ACTION_DIM = 2
LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NetworkDims:
    n_eyes: int
    eye_input: int     # memory * H * W * 3
    encoder_out: int   # = hidden_neurons
    hidden: int

    @property
    def trunk_input(self) -> int:
        return self.n_eyes * self.encoder_out + N_EXTRAS


def dims_for(genome: Genome) -> NetworkDims:
    m, n = genome.morphological, genome.neural
    return NetworkDims(
        n_eyes=m.num_eyes,
        eye_input=n.memory_frames * m.resolution_h * m.resolution_w * 3,
        encoder_out=n.hidden_neurons,
        hidden=n.hidden_neurons,
    )


def parameter_count(genome: Genome) -> int:
    """Closed-form parameter count; the scaling-law analyses consume this."""
    d = dims_for(genome)
    enc = d.n_eyes * (d.eye_input * d.encoder_out + d.encoder_out)
    trunk = (d.trunk_input * d.hidden + d.hidden) + (d.hidden * d.hidden + d.hidden)
    heads = (d.hidden * ACTION_DIM + ACTION_DIM) + (d.hidden + 1) + ACTION_DIM
    return enc + trunk + heads


class PolicyNetwork:
    """Parameter container + forward pass. All arrays float64."""

    def __init__(self, genome: Genome, seed: int):
        self.genome = genome
        self.seed = int(seed)
        self.dims = dims_for(genome)
        d = self.dims
        rng = rngmod.rng_for(seed, rngmod.STREAM_INIT)

        def dense(fan_in: int, fan_out: int) -> np.ndarray:
            return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

        self.params: dict[str, np.ndarray] = {}
        for e in range(d.n_eyes):
            self.params[f"enc{e}_w"] = dense(d.eye_input, d.encoder_out)
            self.params[f"enc{e}_b"] = np.zeros(d.encoder_out)
        self.params["h1_w"] = dense(d.trunk_input, d.hidden)
        self.params["h1_b"] = np.zeros(d.hidden)
        self.params["h2_w"] = dense(d.hidden, d.hidden)
        self.params["h2_b"] = np.zeros(d.hidden)
        self.params["mean_w"] = dense(d.hidden, ACTION_DIM)
        self.params["mean_b"] = np.zeros(ACTION_DIM)
        self.params["value_w"] = dense(d.hidden, 1)
        self.params["value_b"] = np.zeros(1)
        self.params["log_std"] = np.zeros(ACTION_DIM)

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- observation plumbing ------------------------------------------------

    def split_obs_batch(self, stack: np.ndarray, contact: np.ndarray,
                        prev_action: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(B, mem, E, H, W, 3) -> per-eye inputs (B, E, D) and extras (B, 3)."""
        b = stack.shape[0]
        d = self.dims
        m = self.genome.morphological
        expected = (self.genome.neural.memory_frames, d.n_eyes,
                    m.resolution_h, m.resolution_w, 3)
        if stack.shape[1:] != expected:
            raise ValueError(f"observation stack {stack.shape[1:]} does not match "
                             f"genome shape {expected}")
        eyes = np.moveaxis(stack, 2, 1).reshape(b, d.n_eyes, d.eye_input)
        extras = np.concatenate([contact.reshape(b, 1), prev_action.reshape(b, 2)], axis=1)
        return eyes, extras

    def obs_to_batch(self, obs: Observation) -> tuple[np.ndarray, np.ndarray]:
        return self.split_obs_batch(obs.stack[None], np.array([obs.contact]),
                                    np.asarray(obs.prev_action)[None])

    # -- forward -------------------------------------------------------------

    def forward(self, eyes: np.ndarray, extras: np.ndarray, cache: bool = False):
        """Returns (mean (B, 2), value (B,), cache or None)."""
        p = self.params
        d = self.dims
        z = np.empty((eyes.shape[0], d.n_eyes, d.encoder_out))
        for e in range(d.n_eyes):
            z[:, e] = np.tanh(eyes[:, e] @ p[f"enc{e}_w"] + p[f"enc{e}_b"])
        t0 = np.concatenate([z.reshape(eyes.shape[0], -1), extras], axis=1)
        h1 = np.tanh(t0 @ p["h1_w"] + p["h1_b"])
        h2 = np.tanh(h1 @ p["h2_w"] + p["h2_b"])
        mean = h2 @ p["mean_w"] + p["mean_b"]
        value = (h2 @ p["value_w"])[:, 0] + p["value_b"][0]
        ctx = {"eyes": eyes, "z": z, "t0": t0, "h1": h1, "h2": h2} if cache else None
        return mean, value, ctx

    def log_prob(self, mean: np.ndarray, sample: np.ndarray) -> np.ndarray:
        log_std = self.params["log_std"]
        # overflow to inf on diverged parameters is fine: the trainer detects
        # non-finite losses and bails out with the fitness floor
        with np.errstate(over="ignore", invalid="ignore"):
            diff = (sample - mean) / np.exp(log_std)
            return (-0.5 * np.sum(diff**2, axis=1) - np.sum(log_std)
                    - 0.5 * ACTION_DIM * LOG2PI)

    def act_batch(self, eyes: np.ndarray, extras: np.ndarray,
                  rng: np.random.Generator | None = None, deterministic: bool = False):
        """Returns (env actions tanh(u), raw samples u, log_probs, values)."""
        mean, value, _ = self.forward(eyes, extras)
        if deterministic:
            u = mean
        else:
            if rng is None:
                raise ValueError("stochastic action needs an rng")
            with np.errstate(over="ignore"):  # diverged params, caught upstream
                u = mean + rng.standard_normal(mean.shape) * np.exp(self.params["log_std"])
        return np.tanh(u), u, self.log_prob(mean, u), value

    def act(self, obs: Observation, rng: np.random.Generator | None = None,
            deterministic: bool = False):
        """Single-observation contract: (action, log_prob, value)."""
        eyes, extras = self.obs_to_batch(obs)
        action, _, logp, value = self.act_batch(eyes, extras, rng, deterministic)
        return action[0], float(logp[0]), float(value[0])

    def policy_fn(self):
        """Deterministic callable for evaluate_fitness."""
        return lambda obs: self.act(obs, deterministic=True)[0]

    # -- serialization ---------------------------------------------------------

    def genome_hash(self) -> str:
        return hashlib.sha256(genome_to_text(self.genome).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        meta = {
            "seed": self.seed,
            "genome_hash": self.genome_hash(),
            "layers": {k: list(v.shape) for k, v in sorted(self.params.items())},
        }
        save_arrays(path, self.params, meta)

    def load_params(self, path) -> None:
        arrays, meta = load_arrays(path)
        if meta.get("genome_hash") != self.genome_hash():
            raise ValueError("checkpoint genome hash does not match this genome")
        for k in self.params:
            if arrays[k].shape != self.params[k].shape:
                raise ValueError(f"parameter {k} shape mismatch")
            self.params[k] = arrays[k]


def build_network(genome: Genome, seed: int) -> PolicyNetwork:
    return PolicyNetwork(genome, seed)
