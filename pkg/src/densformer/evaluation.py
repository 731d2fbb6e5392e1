"""Evaluation protocols: score/density error sweeps, the Laplace table,
and runtime scaling."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import kde as K
from .gmm import GmmSpec, laplace_log_density, laplace_target, random_gmm, sample_laplace, standard_normal

SCORE_ORACLES = ("transformer", "kde", "sd-kde-emp", "sd-kde-learned", "sd-kde-autograd", "sm")
DENSITY_ORACLES = ("transformer", "kde", "sd-kde-emp", "sd-kde-learned", "sd-kde-autograd", "sd-kde-oracle")
DISTRIBUTIONS = ("gmm", "laplace", "gaussian")


class UnknownOracleError(ValueError):
    pass


@dataclass
class Target:
    """A distribution with sampler, log-density and score."""

    name: str
    d: int
    sample: object
    log_density: object
    score: object


def make_target(name: str, d: int, rng: np.random.Generator, modes: int = 3, scale: float = 1.0) -> Target:
    if name == "gmm":
        g = random_gmm(rng, d, modes)
        return Target(f"gmm{modes}", d, g.sample, g.log_density, g.score)
    if name == "gaussian":
        g = standard_normal(d)
        return Target("gaussian", d, g.sample, g.log_density, g.score)
    if name == "laplace":
        return Target(
            "laplace", d,
            lambda n, r: sample_laplace(d, scale, n, r),
            lambda Y: laplace_log_density(d, scale, Y),
            lambda Y: laplace_target(d, scale, Y)[1],
        )
    raise ValueError(f"unknown distribution {name!r}")


def gmm_target(spec: GmmSpec) -> Target:
    return Target("gmm", spec.d, spec.sample, spec.log_density, spec.score)


def _need(weights, oracle):
    if weights is None:
        raise UnknownOracleError(f"oracle {oracle!r} needs a model checkpoint")


def score_estimates(oracle: str, X, Y, *, weights=None, rule="silverman", sm_config=None):
    """Score estimates at ``Y`` from sample ``X`` for the named oracle."""
    from .model import autograd_scores, predict

    h = K.bandwidth(X, rule)
    if oracle == "kde":
        return K.kde_score(X, Y, h)
    if oracle == "sd-kde-emp":
        return K.kde_score(K.sharpen(X, h, K.empirical_score_fn(X, h)), Y, h)
    if oracle == "sd-kde-learned":
        _need(weights, oracle)
        return K.kde_score(K.sharpen(X, h, lambda Z: predict(weights, X, Z).scores), Y, h)
    if oracle == "sd-kde-autograd":
        _need(weights, oracle)
        return K.kde_score(K.sharpen(X, h, lambda Z: autograd_scores(weights, X, Z)), Y, h)
    if oracle == "transformer":
        _need(weights, oracle)
        return predict(weights, X, Y).scores
    if oracle == "sm":
        return K.sm_train(X, sm_config)(Y)
    raise UnknownOracleError(f"unknown score oracle {oracle!r}")


def density_estimates(oracle: str, X, Y, *, weights=None, rule="silverman", true_score=None):
    from .model import autograd_scores, predict

    h = K.bandwidth(X, rule)
    if oracle == "kde":
        return K.kde_density(X, Y, h)
    if oracle == "sd-kde-emp":
        return K.sd_kde_density(X, Y, h, K.empirical_score_fn(X, h))
    if oracle == "sd-kde-oracle":
        if true_score is None:
            raise UnknownOracleError("sd-kde-oracle needs the true score")
        return K.sd_kde_density(X, Y, h, true_score)
    if oracle == "sd-kde-learned":
        _need(weights, oracle)
        return K.sd_kde_density(X, Y, h, lambda Z: predict(weights, X, Z).scores)
    if oracle == "sd-kde-autograd":
        _need(weights, oracle)
        return K.sd_kde_density(X, Y, h, lambda Z: autograd_scores(weights, X, Z))
    if oracle == "transformer":
        _need(weights, oracle)
        return predict(weights, X, Y).densities
    raise UnknownOracleError(f"unknown density oracle {oracle!r}")


def score_mse(estimate, truth) -> float:
    """Mean squared error over all n x d entries."""
    diff = np.asarray(estimate) - np.asarray(truth)
    return float(np.mean(diff * diff))


def eval_score(oracle, dist="gmm", d=1, ns=(512, 1024, 2048, 4096), modes=(3,), seeds=range(5), *, weights=None, rule="silverman"):
    """Score MSE at the sample points, one row per (n, modes, seed)."""
    rows = []
    for n in ns:
        for k in modes:
            for seed in seeds:
                rng = np.random.default_rng([seed, n, k, d])
                tgt = make_target(dist, d, rng, modes=k)
                X = tgt.sample(n, rng)
                est = score_estimates(oracle, X, X, weights=weights, rule=rule)
                rows.append({"oracle": oracle, "dist": tgt.name, "d": d, "n": n, "modes": k, "seed": seed, "mse": score_mse(est, tgt.score(X))})
    return rows


def density_grid(tgt: Target, X, points_per_axis=None):
    """Evaluation grid covering the sample (d <= 2) plus quadrature cell size."""
    lo, hi = X.min(0) - 1.0, X.max(0) + 1.0
    if tgt.d == 1:
        g = np.linspace(lo[0], hi[0], points_per_axis or 2001)[:, None]
        return g, g[1, 0] - g[0, 0]
    if tgt.d == 2:
        m = points_per_axis or 121
        a, b = np.linspace(lo[0], hi[0], m), np.linspace(lo[1], hi[1], m)
        G = np.stack(np.meshgrid(a, b, indexing="ij"), -1).reshape(-1, 2)
        return G, (a[1] - a[0]) * (b[1] - b[0])
    return None, None


def eval_density(oracle, dist="gmm", d=1, ns=(512, 1024, 2048, 4096), modes=(2,), seeds=range(5), *, weights=None, rule="silverman"):
    """Density MSE on a grid (d <= 2) or at fresh samples (d > 2)."""
    rows = []
    for n in ns:
        for k in modes:
            for seed in seeds:
                rng = np.random.default_rng([seed, n, k, d, 1])
                tgt = make_target(dist, d, rng, modes=k)
                X = tgt.sample(n, rng)
                Y, _ = density_grid(tgt, X)
                if Y is None:
                    Y = tgt.sample(n, rng)
                est = density_estimates(oracle, X, Y, weights=weights, rule=rule, true_score=tgt.score)
                err = float(np.mean((est - np.exp(tgt.log_density(Y))) ** 2))
                rows.append({"oracle": oracle, "dist": tgt.name, "d": d, "n": n, "modes": k, "seed": seed, "mse": err})
    return rows


def laplace_table(ns=(512, 1024, 2048, 4096), seeds=range(10), rule="silverman-factor", d=2, scale=1.0, weights=None, oracle="kde"):
    """Score MSE on the product-Laplace target; mean over seeds per n.

    Queries are the sample points themselves and the error is averaged over
    all n x d entries."""
    out = {}
    for n in ns:
        vals = []
        for seed in seeds:
            rng = np.random.default_rng(seed)
            X = sample_laplace(d, scale, n, rng)
            est = score_estimates(oracle, X, X, weights=weights, rule=rule)
            vals.append(score_mse(est, laplace_target(d, scale, X)[1]))
        out[n] = float(np.mean(vals))
    return out


def loglog_slope(ns, times) -> float:
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(times, float)), 1)[0])


def _best_time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(d=2, ns=tuple(2**k for k in range(10, 15)), weights=None, repeats=2, seed=0, model_repeats=None):
    """Wall-clock of KDE score vs transformer forward (scores at the sample
    points), best of ``repeats`` (``model_repeats`` for the transformer).
    Returns rows plus fitted log-log slopes."""
    from .model import predict

    rows = []
    rng = np.random.default_rng(seed)
    for n in ns:
        X = rng.standard_normal((n, d))
        h = K.silverman_bandwidth(X)
        row = {"d": d, "n": n, "kde_seconds": _best_time(lambda: K.kde_score(X, X, h), repeats)}
        if weights is not None:
            row["transformer_seconds"] = _best_time(lambda: predict(weights, X, X), model_repeats or repeats)
        rows.append(row)
    slopes = {"kde": loglog_slope(ns, [r["kde_seconds"] for r in rows])}
    if weights is not None:
        slopes["transformer"] = loglog_slope(ns, [r["transformer_seconds"] for r in rows])
    return rows, slopes


def heldout_score_suite(seed: int, n: int = 256, count: int = 20, k_range=(1, 3), d: int = 1):
    """Fixed in-distribution GMM samples with their true scores at the samples."""
    rng = np.random.default_rng([7919, seed])
    suite = []
    for _ in range(count):
        g = random_gmm(rng, d, int(rng.integers(k_range[0], k_range[1] + 1)))
        X = g.sample(n, rng)
        suite.append((X, g.score(X)))
    return suite


def suite_score_mse(score_fn, suite) -> float:
    """Mean over the suite of the per-sample score MSE; ``score_fn(X)``
    returns scores at X."""
    return float(np.mean([score_mse(score_fn(X), S) for X, S in suite]))


def heldout_comparison(weights, seeds=range(5), **suite_kw):
    """Transformer and Silverman-KDE score MSE per evaluation seed."""
    from .model import predict

    rows = []
    for seed in seeds:
        suite = heldout_score_suite(seed, **suite_kw)
        rows.append(
            {
                "seed": seed,
                "transformer": suite_score_mse(lambda X: predict(weights, X).scores, suite),
                "kde": suite_score_mse(lambda X: K.kde_score(X, X, K.silverman_bandwidth(X)), suite),
            }
        )
    return rows
