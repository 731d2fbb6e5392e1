"""Gaussian mixtures with closed-form density and score, the on-the-fly
training batch generator, and the product-Laplace evaluation target.

Points are rows: a sample is an ``(n, d)`` array and affine maps act as
``x -> x @ A + mu``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))


def _as_points(Y, d: int | None = None) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None] if d in (None, 1) else Y[None, :]
    if Y.ndim != 2:
        raise ValueError(f"expected an (n, d) array, got shape {Y.shape}")
    if d is not None and Y.shape[1] != d:
        raise ValueError(f"dimension mismatch: points have d={Y.shape[1]}, expected {d}")
    return Y


@dataclass
class GmmSpec:
    """Mixture ``sum_j w_j N(mu_j, Sigma_j)``.

    ``covs`` may be given as ``(k, d)`` diagonals; they are expanded to full
    ``(k, d, d)`` matrices on construction.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        k, d = mu.shape
        cov = np.asarray(self.covs, dtype=np.float64)
        if cov.ndim == 2 and cov.shape == (k, d):  # per-component diagonals
            cov = np.stack([np.diag(c) for c in cov])
        if cov.ndim == 1 and d == 1:
            cov = cov[:, None, None]
        if cov.shape != (k, d, d):
            raise ValueError(f"covariances have shape {cov.shape}, expected {(k, d, d)}")
        if w.shape != (k,):
            raise ValueError(f"{w.size} weights for {k} components")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        self.weights, self.means, self.covs, self._chol = w, mu, cov, chol

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    # -- evaluation -----------------------------------------------------

    def _component_terms(self, Y):
        """Per-component log N(y | mu_j, Sigma_j) and Sigma_j^{-1}(y - mu_j)."""
        Y = _as_points(Y, self.d)
        diff = Y[None, :, :] - self.means[:, None, :]  # (k, n, d)
        logp = np.empty((self.k, Y.shape[0]))
        prec_diff = np.empty_like(diff)
        for j in range(self.k):
            L = self._chol[j]
            z = solve_triangular(L, diff[j].T, lower=True)  # (d, n)
            logdet = 2.0 * np.log(np.diag(L)).sum()
            logp[j] = -0.5 * (z * z).sum(0) - 0.5 * logdet - 0.5 * self.d * LOG_2PI
            prec_diff[j] = solve_triangular(L.T, z, lower=False).T
        return logp, prec_diff

    def log_density(self, Y) -> np.ndarray:
        logp, _ = self._component_terms(Y)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(logp + logw[:, None], axis=0)

    def density(self, Y) -> np.ndarray:
        return np.exp(self.log_density(Y))

    def score(self, Y) -> np.ndarray:
        """Closed-form ``grad log f``: responsibility-weighted ``-Sigma_j^{-1}(y - mu_j)``."""
        logp, prec_diff = self._component_terms(Y)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        a = logp + logw[:, None]
        resp = np.exp(a - logsumexp(a, axis=0, keepdims=True))  # (k, n)
        return -(resp[:, :, None] * prec_diff).sum(0)

    # -- sampling and transforms ----------------------------------------

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        comp = rng.choice(self.k, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.d))
        return self.means[comp] + np.einsum("nij,nj->ni", self._chol[comp], eps)

    def transformed(self, A, shift) -> "GmmSpec":
        """Push-forward of the mixture under ``x -> x @ A + shift``."""
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        shift = np.asarray(shift, dtype=np.float64).reshape(1, -1)
        covs = np.einsum("ji,kjl,lm->kim", A, self.covs, A)
        covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
        return GmmSpec(self.weights.copy(), self.means @ A + shift, covs)

    # -- serialisation --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covs.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "GmmSpec":
        return cls(np.array(obj["weights"]), np.array(obj["means"]), np.array(obj["covariances"]))

    @classmethod
    def from_json(cls, text: str) -> "GmmSpec":
        return cls.from_dict(json.loads(text))


def sample_gmm(spec: GmmSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    return spec.sample(n, rng)


def gmm_density(spec: GmmSpec, Y) -> np.ndarray:
    return spec.density(Y)


def gmm_score(spec: GmmSpec, Y) -> np.ndarray:
    return spec.score(Y)


def standard_normal(d: int) -> GmmSpec:
    return GmmSpec(np.ones(1), np.zeros((1, d)), np.eye(d)[None])


# -- training batches ---------------------------------------------------


@dataclass
class BatchConfig:
    """Parameters of the GMM data loader.

    ``d`` may be an int or a sequence of dimensions; with a sequence the
    generator cycles through it by batch index.
    """

    B: int = 32
    d: int | tuple = 1
    n_x: int = 2048
    n_y: int | None = None
    k_min: int = 1
    k_max: int = 10
    mean_scale: float = 3.0
    cov_scheme: str = "diagonal"  # "diagonal" | "wishart"
    var_range: tuple = (0.2, 1.0)
    cov_noise: float = 0.1

    def __post_init__(self):
        if self.n_y is None:
            self.n_y = self.n_x
        if isinstance(self.d, (list, tuple)):
            self.d = tuple(int(v) for v in self.d)
        if self.k_min < 1 or self.k_max < self.k_min:
            raise ValueError(f"invalid component range [{self.k_min}, {self.k_max}]")
        if self.n_x < 2 or self.n_y < 1 or self.B < 1:
            raise ValueError("need B >= 1, n_x >= 2, n_y >= 1")
        if self.cov_scheme not in ("diagonal", "wishart"):
            raise ValueError(f"unknown covariance scheme {self.cov_scheme!r}")
        lo, hi = self.var_range
        if not 0 < lo <= hi:
            raise ValueError("variance range must satisfy 0 < lo <= hi")

    def dim_for(self, index: int) -> int:
        if isinstance(self.d, tuple):
            return self.d[index % len(self.d)]
        return int(self.d)


@dataclass
class TrainingBatch:
    X: np.ndarray  # (B, n_x, d)
    Y: np.ndarray  # (B, n_y, d)
    log_densities: np.ndarray  # (B, n_y)
    scores: np.ndarray  # (B, n_y, d)
    specs: list

    @property
    def densities(self) -> np.ndarray:
        return np.exp(self.log_densities)


def random_gmm(
    rng: np.random.Generator,
    d: int,
    k: int,
    mean_scale: float = 3.0,
    cov_scheme: str = "diagonal",
    var_range=(0.2, 1.0),
    cov_noise: float = 0.1,
) -> GmmSpec:
    """One random mixture as drawn by the data loader."""
    weights = rng.exponential(size=k)
    weights /= weights.sum()
    means = rng.uniform(-mean_scale, mean_scale, size=(k, d))
    if cov_scheme == "diagonal":
        covs = np.stack([np.diag(rng.uniform(*var_range, size=d)) for _ in range(k)])
    else:
        A = rng.standard_normal((k, d, d))
        covs = A @ np.swapaxes(A, 1, 2) + cov_noise * np.eye(d)
    return GmmSpec(weights, means, covs)


def make_training_batch(
    cfg: BatchConfig, rng: np.random.Generator, index: int = 0, k: int | None = None
) -> TrainingBatch:
    """Draw B mixtures sharing one component count and sample (X, Y) from each."""
    d = cfg.dim_for(index)
    if k is None:
        k = int(rng.integers(cfg.k_min, cfg.k_max + 1))
    X = np.empty((cfg.B, cfg.n_x, d))
    Y = np.empty((cfg.B, cfg.n_y, d))
    logf = np.empty((cfg.B, cfg.n_y))
    S = np.empty((cfg.B, cfg.n_y, d))
    specs = []
    for b in range(cfg.B):
        spec = random_gmm(rng, d, k, cfg.mean_scale, cfg.cov_scheme, cfg.var_range, cfg.cov_noise)
        X[b] = spec.sample(cfg.n_x, rng)
        Y[b] = spec.sample(cfg.n_y, rng)
        logf[b] = spec.log_density(Y[b])
        S[b] = spec.score(Y[b])
        specs.append(spec)
    return TrainingBatch(X, Y, logf, S, specs)


# -- Laplace target -----------------------------------------------------


def laplace_target(d: int, scale: float, Y):
    """Density and score of the product of ``d`` independent Laplace(0, scale)."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    Y = _as_points(Y, d)
    logf = -np.abs(Y).sum(1) / scale - d * np.log(2.0 * scale)
    return np.exp(logf), -np.sign(Y) / scale


def laplace_log_density(d: int, scale: float, Y) -> np.ndarray:
    Y = _as_points(Y, d)
    return -np.abs(Y).sum(1) / scale - d * np.log(2.0 * scale)


def sample_laplace(d: int, scale: float, n: int, rng: np.random.Generator) -> np.ndarray:
    if scale <= 0:
        raise ValueError("scale must be positive")
    return rng.laplace(0.0, scale, size=(n, d))
