"""Deterministic particle solver for the spatially homogeneous Landau equation.

Particles move with the velocity

    v(x_i) = -(1/n) sum_j A(x_i - x_j) (s(x_i) - s(x_j)),
    A(z)   = |z|^gamma (|z|^2 I - z z^T),

where ``s`` is a score estimate supplied by an oracle (closed-form Gaussian,
KDE, or the transformer).  The pair sum is antisymmetric, so momentum is
conserved exactly and kinetic energy up to the O(dt^2) Euler error.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .kde import bandwidth, kde_score

SINGULAR_RADIUS = 1e-8

ScoreOracle = Callable[[np.ndarray], np.ndarray]


def collision_kernel(z, gamma: float) -> np.ndarray:
    """``A(z) = |z|^gamma (|z|^2 I - z z^T)``; zero at z = 0."""
    z = np.asarray(z, dtype=np.float64).ravel()
    r2 = float(z @ z)
    if r2 == 0.0 or (gamma < 0 and np.sqrt(r2) < SINGULAR_RADIUS):
        return np.zeros((z.size, z.size))
    return r2 ** (0.5 * gamma) * (r2 * np.eye(z.size) - np.outer(z, z))


def velocity_field(X, S, gamma: float, tile: int = 256) -> np.ndarray:
    """Particle velocities; O(n^2 d) work in (tile x n) blocks."""
    X = np.asarray(X, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if X.shape != S.shape or X.ndim != 2:
        raise ValueError(f"positions {X.shape} and scores {S.shape} must be matching (n, d) arrays")
    if not np.all(np.isfinite(S)):
        raise FloatingPointError("non-finite scores")
    n = X.shape[0]
    V = np.empty_like(X)
    for lo in range(0, n, tile):
        Z = X[lo : lo + tile, None, :] - X[None, :, :]  # (t, n, d)
        U = S[lo : lo + tile, None, :] - S[None, :, :]
        r2 = (Z * Z).sum(-1)
        zu = (Z * U).sum(-1)
        AU = r2[..., None] * U - Z * zu[..., None]
        if gamma != 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                pref = np.where(r2 > SINGULAR_RADIUS**2, r2 ** (0.5 * gamma), 0.0)
            AU *= pref[..., None]
        V[lo : lo + tile] = -AU.sum(axis=1) / n
    return V


def step(X, score_oracle: ScoreOracle, gamma: float, dt: float) -> np.ndarray:
    """One explicit Euler step."""
    X = np.asarray(X, dtype=np.float64)
    if dt == 0:
        return X.copy()
    return X + dt * velocity_field(X, score_oracle(X), gamma)


# -- score oracles ----------------------------------------------------------------


def gaussian_score_oracle(X) -> np.ndarray:
    """Score of the Gaussian with the particles' own mean and covariance.

    Exact whenever the particle law is Gaussian (initial data and the
    Maxwellian equilibrium)."""
    X = np.asarray(X, dtype=np.float64)
    m = X.mean(axis=0)
    C = np.cov(X, rowvar=False, ddof=0).reshape(X.shape[1], X.shape[1])
    return -np.linalg.solve(C, (X - m).T).T


def kde_score_oracle(rule="silverman") -> ScoreOracle:
    return lambda X: kde_score(X, X, bandwidth(X, rule))


def transformer_score_oracle(weights) -> ScoreOracle:
    from .model import predict

    return lambda X: predict(weights, X).scores


# -- simulation ------------------------------------------------------------------


def analytic_maxwell_covariance(cov0, t) -> np.ndarray:
    """Covariance under Maxwell collisions (gamma = 0) with the exact score.

    Second moments obey ``dC/dt = 4 (tr(C) I - d C)``, so the deviation from
    the isotropic state ``tr(C)/d I`` decays like ``exp(-4 d t)``."""
    cov0 = np.atleast_2d(np.asarray(cov0, dtype=np.float64))
    d = cov0.shape[0]
    iso = np.trace(cov0) / d * np.eye(d)
    t = np.asarray(t, dtype=np.float64)
    decay = np.exp(-4.0 * d * t)[..., None, None]
    return iso + (cov0 - iso) * decay


@dataclass
class LandauConfig:
    gamma: float = 0.0
    dt: float = 0.002
    steps: int = 200
    n: int = 2048
    d: int = 3
    oracle: str = "exact"
    init_var: tuple = (1.8, 0.6, 0.6)
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.gamma not in (0, 0.0, -3, -3.0):
            raise ValueError("gamma must be 0 (Maxwell) or -3 (Coulomb)")
        if len(self.init_var) != self.d:
            raise ValueError(f"init_var has {len(self.init_var)} entries for d={self.d}")


@dataclass
class Trajectory:
    t: np.ndarray
    cov: np.ndarray  # (steps + 1, d, d)
    energy: np.ndarray  # mean |x|^2 / 2
    momentum: np.ndarray  # (steps + 1, d), mean of x
    wall_time: np.ndarray
    final: np.ndarray = field(repr=False, default=None)

    def write_csv(self, path, comment: str | None = None) -> None:
        d = self.cov.shape[1]
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(
                ["step", "t"] + [f"cov_{i}{j}" for i in range(d) for j in range(d)]
                + ["energy"] + [f"momentum_{i}" for i in range(d)] + ["wall_time"]
            )
            for k in range(self.t.size):
                w.writerow(
                    [k, f"{self.t[k]:.10g}"] + [f"{c:.12g}" for c in self.cov[k].ravel()]
                    + [f"{self.energy[k]:.15g}"] + [f"{m:.6e}" for m in self.momentum[k]]
                    + [f"{self.wall_time[k]:.4f}"]
                )


def initial_particles(cfg: LandauConfig) -> np.ndarray:
    """Centred anisotropic Gaussian sample."""
    rng = np.random.default_rng(cfg.seed)
    X = rng.standard_normal((cfg.n, cfg.d)) * np.sqrt(np.asarray(cfg.init_var, dtype=np.float64))
    return X - X.mean(axis=0)


def make_oracle(name: str, weights=None) -> ScoreOracle:
    if name == "exact":
        return gaussian_score_oracle
    if name == "kde":
        return kde_score_oracle()
    if name == "transformer":
        if weights is None:
            raise ValueError("the transformer oracle needs model weights")
        return transformer_score_oracle(weights)
    raise ValueError(f"unknown score oracle {name!r}")


def simulate(cfg: LandauConfig, oracle: ScoreOracle | None = None, X0=None) -> Trajectory:
    X = initial_particles(cfg) if X0 is None else np.asarray(X0, dtype=np.float64).copy()
    oracle = oracle or make_oracle(cfg.oracle)
    T = cfg.steps + 1
    cov = np.empty((T, X.shape[1], X.shape[1]))
    energy, momentum, wall = np.empty(T), np.empty((T, X.shape[1])), np.empty(T)
    t0 = time.perf_counter()

    def record(k):
        cov[k] = np.cov(X, rowvar=False, ddof=0)
        energy[k] = 0.5 * (X * X).sum(1).mean()
        momentum[k] = X.mean(axis=0)
        wall[k] = time.perf_counter() - t0

    record(0)
    for k in range(1, T):
        X = step(X, oracle, cfg.gamma, cfg.dt)
        record(k)
    return Trajectory(np.arange(T) * cfg.dt, cov, energy, momentum, wall, X)
