"""Gaussian KDE baselines: density, score, Silverman bandwidth, score-debiased
KDE, and a finite-difference score-matching MLP.

Pairwise kernels are evaluated in (query tile x context tile) blocks with a
streaming max-shift, so memory stays O(tile^2) and the reduction order is
fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

DEFAULT_TILE = 1024


class KdeUnderflowError(FloatingPointError):
    pass


def _points(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"expected an (n, d) array, got shape {X.shape}")
    return X


def silverman_factor(n: int, d: int) -> float:
    """``(4 / ((d + 2) n))^(1 / (d + 4))``."""
    return (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def silverman_bandwidth(X) -> float:
    """Multivariate Silverman rule: mean per-coordinate sample standard
    deviation times :func:`silverman_factor`."""
    X = _points(X)
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least two points")
    sigma = X.std(axis=0, ddof=1).mean()
    if not sigma > 0:
        raise ValueError("sample has zero variance")
    return float(sigma * silverman_factor(n, d))


def bandwidth(X, rule: str | float = "silverman") -> float:
    """Resolve a bandwidth rule.

    ``"silverman"`` scales by the sample spread; ``"silverman-factor"`` uses the
    bare factor (the data-scale-free convention of e.g. scikit-learn's
    ``bandwidth="silverman"``); a number is returned as is.
    """
    if isinstance(rule, (int, float)):
        if rule <= 0:
            raise ValueError("bandwidth must be positive")
        return float(rule)
    X = _points(X)
    if rule == "silverman":
        return silverman_bandwidth(X)
    if rule == "silverman-factor":
        return silverman_factor(*X.shape)
    raise ValueError(f"unknown bandwidth rule {rule!r}")


@dataclass
class KdeConfig:
    bandwidth: str | float = "silverman"
    kernel: str = "gaussian"

    def __post_init__(self):
        if self.kernel != "gaussian":
            raise ValueError("only the gaussian kernel is supported")
        if isinstance(self.bandwidth, (int, float)) and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")


def _sq_dists(Yt: np.ndarray, Xt: np.ndarray) -> np.ndarray:
    d2 = (Yt * Yt).sum(1)[:, None] + (Xt * Xt).sum(1)[None, :] - 2.0 * Yt @ Xt.T
    return np.maximum(d2, 0.0)


def _kernel_moments(X, Y, h, tile, with_first_moment):
    """Streaming ``log sum_j k(y, x_j)`` (up to the shift) and, optionally,
    the kernel-weighted mean of the x_j, per query."""
    X, Y = _points(X), _points(Y)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: X has d={X.shape[1]}, Y has d={Y.shape[1]}")
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    m = Y.shape[0]
    logsum = np.empty(m)
    mean = np.empty_like(Y) if with_first_moment else None
    inv = 1.0 / (2.0 * h * h)
    with np.errstate(over="ignore", invalid="ignore"):
        _stream(X, Y, inv, tile, logsum, mean)
    return logsum, mean


def _stream(X, Y, inv, tile, logsum, mean):
    with_first_moment = mean is not None
    m = Y.shape[0]
    for qs in range(0, m, tile):
        Yt = Y[qs : qs + tile]
        run_max = np.full(Yt.shape[0], -np.inf)
        run_sum = np.zeros(Yt.shape[0])
        run_mom = np.zeros_like(Yt) if with_first_moment else None
        for cs in range(0, X.shape[0], tile):
            Xt = X[cs : cs + tile]
            logk = -_sq_dists(Yt, Xt) * inv
            tmax = logk.max(axis=1)
            new_max = np.maximum(run_max, tmax)
            rescale = np.exp(run_max - new_max)
            w = np.exp(logk - new_max[:, None])
            run_sum = run_sum * rescale + w.sum(1)
            if with_first_moment:
                run_mom = run_mom * rescale[:, None] + w @ Xt
            run_max = new_max
        logsum[qs : qs + tile] = run_max + np.log(run_sum)
        if with_first_moment:
            if not np.all(run_sum > 0):
                nn = np.sqrt(_sq_dists(Yt, X).min(axis=1)).max()
                raise KdeUnderflowError(f"all kernel weights underflowed (nearest-neighbour distance {nn:.3g})")
            mean[qs : qs + tile] = run_mom / run_sum[:, None]


def kde_log_density(X, Y, h: float, tile: int = DEFAULT_TILE) -> np.ndarray:
    X = _points(X)
    n, d = X.shape
    logsum, _ = _kernel_moments(X, Y, h, tile, False)
    return logsum - math.log(n) - 0.5 * d * math.log(2.0 * math.pi) - d * math.log(h)


def kde_density(X, Y, h: float, tile: int = DEFAULT_TILE) -> np.ndarray:
    """Gaussian KDE ``(1 / (n (2 pi)^{d/2} h^d)) sum_j exp(-|y - x_j|^2 / 2h^2)``."""
    return np.exp(kde_log_density(X, Y, h, tile))


def kde_score(X, Y, h: float, tile: int = DEFAULT_TILE) -> np.ndarray:
    """``(kernel-weighted mean of x_j - y) / h^2``, the exact gradient of
    ``log kde_density``."""
    _, mean = _kernel_moments(X, Y, h, tile, True)
    return (mean - _points(Y)) / (h * h)


# -- score-debiased KDE -------------------------------------------------------


def sharpen(X, h: float, score_fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Move samples along the score: ``X + (h^2 / 2) s(X)``."""
    X = _points(X)
    S = np.asarray(score_fn(X), dtype=np.float64).reshape(X.shape)
    return X + 0.5 * h * h * S


def sd_kde_density(X, Y, h: float, score_fn, h_post: float | None = None) -> np.ndarray:
    """KDE of the score-sharpened sample; the same ``h`` is used after
    sharpening unless ``h_post`` is given."""
    Xs = sharpen(X, h, score_fn)
    return kde_density(Xs, Y, h if h_post is None else h_post)


def empirical_score_fn(X, h: float):
    """Score oracle built from the KDE of ``X`` itself (Emp-SD-KDE)."""
    X = _points(X)
    return lambda Z: kde_score(X, Z, h)


# -- finite-difference score matching ----------------------------------------------


@dataclass
class SmConfig:
    hidden: tuple = (64, 64)
    fd_eps: float = 1e-3
    projections: int = 1
    steps: int = 1000
    lr: float = 1e-3
    batch: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.fd_eps <= 0:
            raise ValueError("fd_eps must be positive")
        if self.projections < 1 or self.steps < 0:
            raise ValueError("need projections >= 1 and steps >= 0")


def fd_divergence(score_fn, X: torch.Tensor, eps: float, z: torch.Tensor) -> torch.Tensor:
    """Per-sample ``z^T (s(x + eps z) - s(x - eps z)) / (2 eps)``, averaged over
    the probe axis if ``z`` has shape (P, n, d)."""
    if z.dim() == 2:
        z = z[None]
    P, n, d = z.shape
    Xp = (X[None] + eps * z).reshape(P * n, d)
    Xm = (X[None] - eps * z).reshape(P * n, d)
    diff = (score_fn(Xp) - score_fn(Xm)).reshape(P, n, d)
    return ((z * diff).sum(-1) / (2.0 * eps)).mean(0)


class _Mlp(torch.nn.Module):
    def __init__(self, d, hidden, gen):
        super().__init__()
        sizes = [d, *hidden, d]
        self.layers = torch.nn.ModuleList(torch.nn.Linear(a, b, dtype=torch.float64) for a, b in zip(sizes[:-1], sizes[1:]))
        with torch.no_grad():
            for lin in self.layers:
                lin.weight.normal_(0.0, 1.0 / math.sqrt(lin.in_features), generator=gen)
                lin.bias.zero_()

    def forward(self, x):
        for lin in self.layers[:-1]:
            x = torch.nn.functional.silu(lin(x))
        return self.layers[-1](x)


def sm_train(X, cfg: SmConfig | None = None, rng: np.random.Generator | None = None):
    """Fit an MLP score model to ``X`` with the Hyvarinen objective
    ``|s(x)|^2 + 2 div s(x)``, the divergence replaced by its finite-difference
    probe estimate.  Returns a numpy-in / numpy-out score function."""
    cfg = cfg or SmConfig()
    X = _points(X)
    seed = cfg.seed if rng is None else int(rng.integers(2**31))
    gen = torch.Generator().manual_seed(seed)
    net = _Mlp(X.shape[1], cfg.hidden, gen)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    data = torch.as_tensor(X)
    n = data.shape[0]
    for _ in range(cfg.steps):
        xb = data
        if cfg.batch and cfg.batch < n:
            xb = data[torch.randperm(n, generator=gen)[: cfg.batch]]
        z = torch.randn((cfg.projections, *xb.shape), generator=gen, dtype=torch.float64)
        s = net(xb)
        objective = (s * s).sum(-1) + 2.0 * fd_divergence(net, xb, cfg.fd_eps, z)
        value = objective.mean()
        if not torch.isfinite(value):
            raise FloatingPointError("score-matching objective is not finite")
        opt.zero_grad()
        value.backward()
        opt.step()

    def score(Z):
        with torch.no_grad():
            return net(torch.as_tensor(_points(Z))).numpy()

    return score
