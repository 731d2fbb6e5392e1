"""Joint density/score training on freshly drawn GMM batches."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .compute import AdamState, adam_update, clip_by_global_norm, finite_checks, grad
from .gmm import BatchConfig, make_training_batch
from .model import DensityScoreEstimate, ModelConfig, ModelWeights, forward, init_weights

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingError(FloatingPointError):
    def __init__(self, step: int, seed: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step} (batch seed {seed}, {step})")
        self.step, self.seed = step, seed


@dataclass
class TrainConfig:
    alpha: float = 0.5
    steps: int = 20000
    lr: float | None = None  # None: 1e-4 when every d <= 2, else 1e-3
    batch: BatchConfig = field(default_factory=BatchConfig)
    seed: int = 0
    checkpoint_every: int = 1000
    log_space: bool = True
    clip_norm: float = 10.0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if isinstance(self.batch, dict):
            self.batch = BatchConfig(**self.batch)
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        dims = self.batch.d if isinstance(self.batch.d, tuple) else (self.batch.d,)
        return 1e-4 if max(dims) <= 2 else 1e-3

    def to_dict(self) -> dict:
        out = asdict(self)
        out["batch"] = asdict(self.batch)
        return out


def loss(pred: DensityScoreEstimate, target_densities, target_scores, alpha: float, log_space: bool = True):
    """``alpha * L_T + (1 - alpha) * L_S`` averaged over all query points.

    ``L_T`` regresses log-densities when ``log_space`` is set, raw densities
    otherwise; ``L_S`` is the squared score error summed over coordinates.
    Returns ``(L, L_T, L_S)``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    f = torch.as_tensor(target_densities, dtype=torch.float64)
    s = torch.as_tensor(target_scores, dtype=torch.float64)
    if f.shape != pred.log_densities.shape or s.shape != pred.scores.shape:
        raise ValueError("prediction and target shapes differ")
    if bool((f <= 0).any()):
        raise ValueError("target densities must be positive")
    if log_space:
        l_t = ((pred.log_densities - torch.log(f)) ** 2).mean()
    else:
        l_t = ((torch.exp(pred.log_densities) - f) ** 2).mean()
    l_s = ((pred.scores - s) ** 2).sum(-1).mean()
    return alpha * l_t + (1.0 - alpha) * l_s, l_t, l_s


def batch_rng(seed: int, step: int) -> np.random.Generator:
    """Batch stream keyed by step index, so resumed runs see the same data."""
    return np.random.default_rng([seed, step])


@dataclass
class TrainResult:
    weights: ModelWeights
    history: list  # (step, L_T, L_S, L)
    checkpoints: list
    evaluations: list  # (step, value)


def _adam_extra(weights: ModelWeights, state: AdamState) -> dict:
    extra = {}
    for (name, _), m, v in zip(weights.tensors.items(), state.m, state.v):
        extra[f"adam/m/{name}"] = m
        extra[f"adam/v/{name}"] = v
    return extra


def _adam_from_extra(weights: ModelWeights, extra: dict, step: int) -> AdamState:
    names = list(weights.tensors)
    return AdamState(
        m=[extra[f"adam/m/{n}"].clone() for n in names],
        v=[extra[f"adam/v/{n}"].clone() for n in names],
        step=step,
    )


def train(
    model_config: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | None = None,
    resume: str | None = None,
    evaluate: Callable[[ModelWeights], float] | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run (or resume) training.

    With ``out_dir`` set, writes ``telemetry.csv`` (step, L_T, L_S, L,
    wall-time), ``ckpt_<step>.bin`` every ``checkpoint_every`` steps plus a
    final checkpoint, and ``evaluations.csv`` when ``evaluate`` is given.
    ``stop_after`` ends the run early at that step (used to test resuming).
    """
    dtype = _DTYPES[cfg.dtype]
    lr = cfg.learning_rate
    if resume:
        weights, meta, extra = load_checkpoint(resume)
        if weights.config.fingerprint() != model_config.fingerprint():
            raise ValueError("checkpoint was produced by a different model config")
        start = int(meta["step"])
        state = _adam_from_extra(weights, extra, int(meta["adam_step"]))
    else:
        weights = init_weights(model_config, seed=cfg.seed, dtype=dtype)
        start = 0
        state = AdamState.zeros_like(weights.parameters())

    telemetry = evals_file = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        tpath = os.path.join(out_dir, "telemetry.csv")
        fresh = not (resume and os.path.exists(tpath))
        telemetry = open(tpath, "w" if fresh else "a", newline="")
        tw = csv.writer(telemetry)
        if fresh:
            tw.writerow(["step", "L_T", "L_S", "L", "wall_time"])
        if evaluate is not None:
            epath = os.path.join(out_dir, "evaluations.csv")
            evals_file = open(epath, "w" if fresh else "a", newline="")
            if fresh:
                csv.writer(evals_file).writerow(["step", "value"])

    history, checkpoints, evaluations = [], [], []
    t0 = time.time()
    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    params = weights.parameters()
    try:
        for step in range(start + 1, end + 1):
            batch = make_training_batch(cfg.batch, batch_rng(cfg.seed, step), index=step)
            # one finiteness check on loss and gradient norm instead of per op
            with finite_checks(False):
                pred = forward(weights, batch.X, batch.Y, training=True, seed=cfg.seed, step=step)
                total, l_t, l_s = loss(pred, batch.densities, batch.scores, cfg.alpha, cfg.log_space)
                value = total.item()
                if not np.isfinite(value):
                    raise TrainingError(step, cfg.seed, value)
                grads = grad(total, params)
            grads, gnorm = clip_by_global_norm(grads, cfg.clip_norm)
            if not np.isfinite(gnorm):
                raise TrainingError(step, cfg.seed, gnorm)
            adam_update(params, grads, state, lr)
            row = (step, l_t.item(), l_s.item(), value)
            history.append(row)
            if telemetry is not None:
                tw.writerow([*row, f"{time.time() - t0:.3f}"])
            if step % cfg.checkpoint_every == 0 or step == end:
                meta = {"step": step, "adam_step": state.step, "seed": cfg.seed, "loss": value, "train_config": cfg.to_dict()}
                if evaluate is not None:
                    score = float(evaluate(weights))
                    evaluations.append((step, score))
                    meta["evaluation"] = score
                    if evals_file is not None:
                        csv.writer(evals_file).writerow([step, score])
                        evals_file.flush()
                if out_dir:
                    path = os.path.join(out_dir, f"ckpt_{step:07d}.bin")
                    save_checkpoint(path, weights, meta, _adam_extra(weights, state))
                    checkpoints.append(path)
                    telemetry.flush()
                log.info("step %d  L=%.4f  L_T=%.4f  L_S=%.4f", step, value, row[1], row[2])
    finally:
        if telemetry is not None:
            telemetry.close()
        if evals_file is not None:
            evals_file.close()
    return TrainResult(weights, history, checkpoints, evaluations)
