"""Covariance matrix adaptation evolution strategy (maximization convention).

Canonical rank-mu update with log-rank weights over the better half of the
population, cumulative step-size adaptation, and rank-one covariance update.
Out-of-bound coordinates are reflected back into the box (no boundary
pile-up); fitness enters only through ranks, so any strictly increasing
transform of the fitnesses leaves the trajectory unchanged.  State is a plain
dataclass of float64 arrays and serializes exactly, which is what makes
bit-exact resume possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

EIGEN_FLOOR = 1e-12  # repair floor for covariance eigenvalues


@dataclass
class CmaState:
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int
    popsize: int
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.mean.size

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "sigma": self.sigma,
            "cov": self.cov.ravel().tolist(),
            "p_sigma": self.p_sigma.tolist(),
            "p_c": self.p_c.tolist(),
            "generation": self.generation,
            "popsize": self.popsize,
            "lower": self.lower.tolist() if self.lower is not None else None,
            "upper": self.upper.tolist() if self.upper is not None else None,
        }

    @staticmethod
    def from_dict(d: dict) -> "CmaState":
        n = len(d["mean"])
        return CmaState(
            mean=np.array(d["mean"], dtype=float),
            sigma=float(d["sigma"]),
            cov=np.array(d["cov"], dtype=float).reshape(n, n),
            p_sigma=np.array(d["p_sigma"], dtype=float),
            p_c=np.array(d["p_c"], dtype=float),
            generation=int(d["generation"]),
            popsize=int(d["popsize"]),
            lower=np.array(d["lower"], dtype=float) if d.get("lower") is not None else None,
            upper=np.array(d["upper"], dtype=float) if d.get("upper") is not None else None,
        )


@dataclass(frozen=True)
class _Weights:
    mu: int
    weights: np.ndarray
    mu_eff: float
    c_sigma: float
    d_sigma: float
    c_c: float
    c_1: float
    c_mu: float
    chi_n: float


def _strategy_params(dim: int, popsize: int) -> _Weights:
    mu = popsize // 2
    raw = np.log(popsize / 2.0 + 0.5) - np.log(np.arange(1, mu + 1))
    weights = raw / raw.sum()
    mu_eff = 1.0 / np.sum(weights**2)
    c_sigma = (mu_eff + 2.0) / (dim + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (dim + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / dim) / (dim + 4.0 + 2.0 * mu_eff / dim)
    c_1 = 2.0 / ((dim + 1.3) ** 2 + mu_eff)
    c_mu = min(1.0 - c_1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((dim + 2.0) ** 2 + mu_eff))
    chi_n = math.sqrt(dim) * (1.0 - 1.0 / (4.0 * dim) + 1.0 / (21.0 * dim**2))
    return _Weights(mu, weights, mu_eff, c_sigma, d_sigma, c_c, c_1, c_mu, chi_n)


def default_popsize(dim: int) -> int:
    return 4 + int(3 * math.log(dim))


def init_state(mean: Sequence[float], sigma: float, popsize: Optional[int] = None,
               lower: Optional[Sequence[float]] = None,
               upper: Optional[Sequence[float]] = None) -> CmaState:
    mean = np.asarray(mean, dtype=float).copy()
    n = mean.size
    return CmaState(
        mean=mean,
        sigma=float(sigma),
        cov=np.eye(n),
        p_sigma=np.zeros(n),
        p_c=np.zeros(n),
        generation=0,
        popsize=popsize if popsize is not None else default_popsize(n),
        lower=np.asarray(lower, dtype=float).copy() if lower is not None else None,
        upper=np.asarray(upper, dtype=float).copy() if upper is not None else None,
    )


def _decompose(state: CmaState) -> tuple[np.ndarray, np.ndarray, bool]:
    """Eigendecomposition with repair: eigenvalues clamped to the floor."""
    cov = (state.cov + state.cov.T) / 2.0
    eigvals, basis = np.linalg.eigh(cov)
    repaired = bool(eigvals[0] <= EIGEN_FLOOR)
    eigvals = np.maximum(eigvals, EIGEN_FLOOR)
    if repaired:
        state.cov = (basis * eigvals) @ basis.T
    return eigvals, basis, repaired


def reflect_into_bounds(x: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Triangle-wave reflection into [lower, upper], exact at the boundary."""
    span = upper - lower
    y = np.mod(x - lower, 2.0 * span)
    y = np.where(y > span, 2.0 * span - y, y)
    return lower + y


def ask(state: CmaState, rng: np.random.Generator) -> np.ndarray:
    """popsize candidates from N(mean, sigma^2 C), reflected into bounds."""
    eigvals, basis, _ = _decompose(state)
    z = rng.standard_normal((state.popsize, state.dim))
    y = (z * np.sqrt(eigvals)) @ basis.T
    x = state.mean[None, :] + state.sigma * y
    if state.lower is not None and state.upper is not None:
        x = reflect_into_bounds(x, state.lower[None, :], state.upper[None, :])
    return x


def rank_candidates(fitnesses: Sequence[float]) -> np.ndarray:
    """Indices from best to worst; non-finite fitness ranks worst (stable)."""
    f = np.asarray(fitnesses, dtype=float)
    keyed = np.where(np.isfinite(f), f, -np.inf)
    return np.argsort(-keyed, kind="stable")


def tell(state: CmaState, candidates: np.ndarray, fitnesses: Sequence[float]) -> CmaState:
    """Rank-based recombination of the mean plus path/covariance/sigma updates."""
    candidates = np.asarray(candidates, dtype=float)
    if candidates.shape != (state.popsize, state.dim):
        raise ValueError(f"candidates shape {candidates.shape}, expected "
                         f"{(state.popsize, state.dim)}")
    if len(fitnesses) != state.popsize:
        raise ValueError("one fitness per candidate required")
    par = _strategy_params(state.dim, state.popsize)
    order = rank_candidates(fitnesses)
    parents = candidates[order[:par.mu]]

    eigvals, basis, _ = _decompose(state)
    inv_sqrt = (basis / np.sqrt(eigvals)) @ basis.T

    old_mean = state.mean
    new_mean = par.weights @ parents
    y_w = (new_mean - old_mean) / state.sigma

    n = state.dim
    gen = state.generation + 1
    p_sigma = ((1.0 - par.c_sigma) * state.p_sigma
               + math.sqrt(par.c_sigma * (2.0 - par.c_sigma) * par.mu_eff) * (inv_sqrt @ y_w))
    ps_norm = float(np.linalg.norm(p_sigma))
    expected_decay = math.sqrt(1.0 - (1.0 - par.c_sigma) ** (2.0 * gen))
    h_sigma = 1.0 if ps_norm / expected_decay < (1.4 + 2.0 / (n + 1.0)) * par.chi_n else 0.0
    p_c = ((1.0 - par.c_c) * state.p_c
           + h_sigma * math.sqrt(par.c_c * (2.0 - par.c_c) * par.mu_eff) * y_w)

    y_k = (parents - old_mean[None, :]) / state.sigma
    rank_mu = (y_k.T * par.weights) @ y_k
    delta_h = (1.0 - h_sigma) * par.c_c * (2.0 - par.c_c)
    cov = ((1.0 - par.c_1 - par.c_mu) * state.cov
           + par.c_1 * (np.outer(p_c, p_c) + delta_h * state.cov)
           + par.c_mu * rank_mu)

    sigma = state.sigma * math.exp((par.c_sigma / par.d_sigma) * (ps_norm / par.chi_n - 1.0))

    return CmaState(mean=new_mean, sigma=sigma, cov=(cov + cov.T) / 2.0,
                    p_sigma=p_sigma, p_c=p_c, generation=gen, popsize=state.popsize,
                    lower=None if state.lower is None else state.lower.copy(),
                    upper=None if state.upper is None else state.upper.copy())
