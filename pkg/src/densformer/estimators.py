"""Plug-in Monte Carlo functionals of a density/score oracle.

Each estimator averages a per-sample quantity and reports the estimate
together with its standard error ``std / sqrt(n)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    n: int

    def __float__(self) -> float:
        return self.value

    def zscore(self, truth: float) -> float:
        if self.stderr == 0:
            # a deterministic estimate: compare up to roundoff
            return 0.0 if np.isclose(self.value, truth, rtol=1e-12, atol=1e-12) else np.inf
        return (self.value - truth) / self.stderr


def _mean_with_stderr(terms: np.ndarray) -> Estimate:
    n = terms.shape[0]
    if n == 0:
        raise ValueError("no samples")
    sd = terms.std(ddof=1) if n > 1 else 0.0
    return Estimate(float(terms.mean()), float(sd / np.sqrt(n)), n)


def entropy(density_values) -> Estimate:
    """Differential entropy ``-mean(log f(x_i))`` from densities at samples of f."""
    f = np.asarray(density_values, dtype=np.float64).ravel()
    if np.any(~(f > 0)):
        raise ValueError("density values must be positive")
    return _mean_with_stderr(-np.log(f))


def entropy_from_log(log_density_values) -> Estimate:
    """As :func:`entropy`, from log-densities (avoids underflow in high d)."""
    lf = np.asarray(log_density_values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(lf)):
        raise ValueError("log-density values must be finite")
    return _mean_with_stderr(-lf)


def fisher_information(score_values) -> Estimate:
    """``mean |s(x_i)|^2`` for scores evaluated at samples of f."""
    S = np.asarray(score_values, dtype=np.float64)
    if S.ndim == 1:
        S = S[:, None]
    if not np.all(np.isfinite(S)):
        raise ValueError("scores must be finite")
    return _mean_with_stderr((S * S).sum(axis=1))


def relative_fisher(scores_g_at_xf, scores_f_at_xf) -> Estimate:
    """``mean |s_g(x_i) - s_f(x_i)|^2`` over samples x_i of f."""
    a = np.asarray(scores_g_at_xf, dtype=np.float64)
    b = np.asarray(scores_f_at_xf, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b.reshape(-1, 1)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    return _mean_with_stderr((diff * diff).sum(axis=1))


def gaussian_entropy(cov) -> float:
    """``0.5 log((2 pi e)^d det cov)``."""
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    d = cov.shape[0]
    _, logdet = np.linalg.slogdet(cov)
    return 0.5 * (d * np.log(2.0 * np.pi * np.e) + logdet)
