"""Permutation- and affine-equivariant density/score transformer.

The forward pass whitens the context sample, runs a positional-encoding-free
transformer on the whitened coordinates and maps the outputs back with the
change-of-variables factors:

    m  = mean(X);  A = ((X - m)^T (X - m))^{-1/2}
    Xw = (X - m) A,  Yw = (Y - m) A
    log f(Y) = log f_core(Yw) + log det A
    s(Y)     = s_core(Yw) A^T

Context tokens go through ``layers`` pre-norm self-attention blocks; query
tokens then cross-attend to the encoded context in ``decoder_layers`` blocks
(queries never attend to each other), and two linear heads read off a
log-density and a ``d_max``-dimensional score.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .compute import (
    as_tensor,
    check_finite,
    dropout,
    gelu,
    layer_norm,
    linear,
    softmax_rows,
)

LOG_2PI = math.log(2.0 * math.pi)

# query rows per attention tile at inference (bounds the n_q x n_k buffer)
_ATTN_TILE_ELEMS = 1 << 24


class WhiteningError(ValueError):
    """The context sample cannot be whitened (too few points or singular Gram)."""


@dataclass
class ModelConfig:
    width: int = 128
    layers: int = 4
    heads: int = 8
    ffn_mult: int = 2
    dropout: float = 0.1
    d_max: int = 5
    decoder_layers: int = 2
    head_mode: str = "dual"  # "dual" | "autograd"
    gaussian_baseline: bool = True

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by {self.heads} heads")
        if self.head_mode not in ("dual", "autograd"):
            raise ValueError(f"unknown head mode {self.head_mode!r}")
        if self.d_max < 1 or self.layers < 0 or self.decoder_layers < 1:
            raise ValueError("invalid layer counts or d_max")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ModelWeights:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def parameters(self) -> list:
        return list(self.tensors.values())

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def to(self, dtype: torch.dtype) -> "ModelWeights":
        return ModelWeights(
            self.config,
            {k: v.detach().to(dtype).requires_grad_(True) for k, v in self.tensors.items()},
        )

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]


@dataclass
class WhiteningTransform:
    mean: np.ndarray  # (1, d)
    matrix: np.ndarray  # (d, d), symmetric positive definite
    log_det: float

    @property
    def det(self) -> float:
        return float(np.exp(self.log_det))


@dataclass
class DensityScoreEstimate:
    """Log-densities (n_y,) and scores (n_y, d); arrays or tensors."""

    log_densities: object
    scores: object

    @property
    def densities(self):
        if isinstance(self.log_densities, torch.Tensor):
            return torch.exp(self.log_densities)
        return np.exp(self.log_densities)

    def numpy(self) -> "DensityScoreEstimate":
        conv = lambda t: t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        return DensityScoreEstimate(conv(self.log_densities), conv(self.scores))


# -- parameters -----------------------------------------------------------


def _param_shapes(cfg: ModelConfig) -> dict:
    W, F, D = cfg.width, cfg.ffn_mult * cfg.width, cfg.d_max
    shapes = {"embed/w": (2 * D, W), "embed/b": (W,)}

    def block(prefix):
        shapes.update(
            {
                f"{prefix}/ln1/g": (W,), f"{prefix}/ln1/b": (W,),
                f"{prefix}/wq": (W, W), f"{prefix}/bq": (W,),
                f"{prefix}/wk": (W, W), f"{prefix}/bk": (W,),
                f"{prefix}/wv": (W, W), f"{prefix}/bv": (W,),
                f"{prefix}/wo": (W, W), f"{prefix}/bo": (W,),
                f"{prefix}/ln2/g": (W,), f"{prefix}/ln2/b": (W,),
                f"{prefix}/ff1/w": (W, F), f"{prefix}/ff1/b": (F,),
                f"{prefix}/ff2/w": (F, W), f"{prefix}/ff2/b": (W,),
            }
        )

    for i in range(cfg.layers):
        block(f"enc{i}")
    shapes.update({"enc_ln/g": (W,), "enc_ln/b": (W,)})
    for i in range(cfg.decoder_layers):
        block(f"dec{i}")
    shapes.update(
        {
            "out_ln/g": (W,), "out_ln/b": (W,),
            "head_density/w": (W, 1), "head_density/b": (1,),
            "head_score/w": (W, D), "head_score/b": (D,),
        }
    )
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in _param_shapes(cfg).values())


def init_weights(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float64) -> ModelWeights:
    """Seeded initialisation.  Output heads start at zero so an untrained
    model returns the Gaussian baseline (when enabled)."""
    gen = torch.Generator().manual_seed(seed)
    n_blocks = cfg.layers + cfg.decoder_layers
    tensors = {}
    for name, shape in _param_shapes(cfg).items():
        leaf = name.rsplit("/", 1)[-1]
        if leaf == "g":
            t = torch.ones(shape, dtype=torch.float64)
        elif leaf.startswith("b") or name.startswith("head_"):
            t = torch.zeros(shape, dtype=torch.float64)
        else:
            std = 1.0 / math.sqrt(shape[0])
            if name.endswith("/wo") or name.endswith("ff2/w"):
                std /= math.sqrt(2.0 * n_blocks)
            t = torch.randn(shape, generator=gen, dtype=torch.float64) * std
        tensors[name] = t.to(dtype).requires_grad_(True)
    return ModelWeights(cfg, tensors)


def perturb_heads(weights: ModelWeights, scale: float = 0.1, seed: int = 1) -> ModelWeights:
    """Random non-zero head weights, for exercising an untrained network."""
    gen = torch.Generator().manual_seed(seed)
    out = dict(weights.tensors)
    for name in ("head_density/w", "head_density/b", "head_score/w", "head_score/b"):
        t = out[name]
        noise = torch.randn(t.shape, generator=gen, dtype=torch.float64).to(t.dtype)
        out[name] = (t.detach() + scale * noise).requires_grad_(True)
    return ModelWeights(weights.config, out)


# -- whitening ------------------------------------------------------------


def _whiten_t(X: torch.Tensor, Y: torch.Tensor):
    """Batched whitening in float64.  X: (..., n, d), Y: (..., m, d)."""
    n, d = X.shape[-2], X.shape[-1]
    if n < d + 1:
        raise WhiteningError(f"need at least d+1={d + 1} context points, got {n}")
    m = X.mean(dim=-2, keepdim=True)
    Xc, Yc = X - m, Y - m
    G = Xc.transpose(-1, -2) @ Xc
    G = 0.5 * (G + G.transpose(-1, -2))
    ev = torch.linalg.eigvalsh(G.detach())
    lo, hi = ev[..., 0], ev[..., -1]
    bad = (lo <= 0) | (hi > 1e12 * lo)
    if bool(bad.any()):
        raise WhiteningError(
            f"context Gram matrix is singular or ill-conditioned "
            f"(smallest eigenvalue {float(lo.min()):.3e}, largest {float(hi.max()):.3e})"
        )
    # conditioning guard: eigenvalues are floored at 1e-9 * trace / d rather
    # than shifted, so well-conditioned Grams are whitened exactly
    lam = 1e-9 * torch.diagonal(G, dim1=-2, dim2=-1).sum(-1) / d
    ev, U = torch.linalg.eigh(G)
    ev = torch.maximum(ev, lam[..., None])
    A = (U * ev.rsqrt().unsqueeze(-2)) @ U.transpose(-1, -2)
    A = 0.5 * (A + A.transpose(-1, -2))
    log_det = -0.5 * torch.log(ev).sum(-1)
    return Xc @ A, Yc @ A, m, A, log_det


def whiten(X, Y):
    """Whiten context ``X`` and queries ``Y`` with statistics of ``X`` only.

    Returns ``(Xw, Yw, WhiteningTransform)`` as float64 numpy arrays.
    """
    X = as_tensor(X, torch.float64)
    Y = as_tensor(Y, torch.float64)
    if X.dim() != 2 or Y.dim() != 2 or X.shape[1] != Y.shape[1]:
        raise ValueError(f"expected (n, d) and (m, d) arrays, got {tuple(X.shape)} and {tuple(Y.shape)}")
    Xw, Yw, m, A, log_det = _whiten_t(X, Y)
    return Xw.numpy(), Yw.numpy(), WhiteningTransform(m.numpy(), A.numpy(), float(log_det))


# -- embedding --------------------------------------------------------------


def embed_pad(points, d_max: int) -> torch.Tensor:
    """Zero-pad coordinates to ``d_max`` and append the active-dimension mask."""
    P = points if isinstance(points, torch.Tensor) else as_tensor(points)
    d = P.shape[-1]
    if d > d_max:
        raise ValueError(f"dimension {d} exceeds d_max={d_max}")
    pad_shape = P.shape[:-1] + (d_max - d,)
    coords = torch.cat([P, P.new_zeros(pad_shape)], dim=-1)
    mask = torch.cat([P.new_ones(P.shape[:-1] + (d,)), P.new_zeros(pad_shape)], dim=-1)
    return torch.cat([coords, mask], dim=-1)


# -- transformer core -------------------------------------------------------


class _Ctx:
    """Per-call settings threaded through the blocks."""

    def __init__(self, training=False, seed=0, step=0, capture=None, p=0.0):
        self.training, self.seed, self.step, self.capture, self.p = training, seed, step, capture, p

    def drop(self, x, tag):
        return dropout(x, self.p, training=self.training, seed=self.seed, step=self.step, layer=tag)


def _attention(w, prefix, hq, hkv, heads, ctx: _Ctx, layer_index: int):
    B, nq, W = hq.shape
    nk = hkv.shape[1]
    dh = W // heads
    q = linear(hq, w[f"{prefix}/wq"], w[f"{prefix}/bq"]).reshape(B, nq, heads, dh).transpose(1, 2)
    k = linear(hkv, w[f"{prefix}/wk"], w[f"{prefix}/bk"]).reshape(B, nk, heads, dh).transpose(1, 2)
    v = linear(hkv, w[f"{prefix}/wv"], w[f"{prefix}/bv"]).reshape(B, nk, heads, dh).transpose(1, 2)
    scale = 1.0 / math.sqrt(dh)
    tile = nq
    if not torch.is_grad_enabled() and ctx.capture is None:
        tile = max(1, min(nq, _ATTN_TILE_ELEMS // max(1, B * heads * nk)))
    outs = []
    for s in range(0, nq, tile):
        att = softmax_rows((q[:, :, s : s + tile] @ k.transpose(-1, -2)) * scale)
        if ctx.capture is not None:
            ctx.capture[layer_index] = att.detach()
        outs.append(att @ v)
    o = torch.cat(outs, dim=2) if len(outs) > 1 else outs[0]
    o = o.transpose(1, 2).reshape(B, nq, W)
    return linear(o, w[f"{prefix}/wo"], w[f"{prefix}/bo"])


def _block(w, prefix, x, kv, cfg, ctx, layer_index):
    h = layer_norm(x, w[f"{prefix}/ln1/g"], w[f"{prefix}/ln1/b"])
    src = h if kv is None else kv
    x = x + ctx.drop(_attention(w, prefix, h, src, cfg.heads, ctx, layer_index), f"{prefix}/attn")
    h = layer_norm(x, w[f"{prefix}/ln2/g"], w[f"{prefix}/ln2/b"])
    h = linear(gelu(linear(h, w[f"{prefix}/ff1/w"], w[f"{prefix}/ff1/b"])), w[f"{prefix}/ff2/w"], w[f"{prefix}/ff2/b"])
    return x + ctx.drop(h, f"{prefix}/ff")


def core_forward(weights: ModelWeights, Xw_padded, Yw_padded, *, training=False, seed=0, step=0, capture=None):
    """Transformer on padded, whitened inputs.

    ``Xw_padded``: (B, n_x, 2 d_max), ``Yw_padded``: (B, n_y, 2 d_max) as built
    by :func:`embed_pad`.  Returns log-densities (B, n_y) and masked scores
    (B, n_y, d_max), both in whitened coordinates.

    Whitened coordinates have scale n_x^{-1/2}; tokens are built from
    ``sqrt(n_x) * Xw`` and the outputs are converted back.
    """
    cfg, w = weights.config, weights.tensors
    Xp, Yp = as_tensor(Xw_padded, weights.dtype), as_tensor(Yw_padded, weights.dtype)
    if Xp.dim() == 2:
        Xp, Yp = Xp[None], Yp[None]
        squeeze = True
    else:
        squeeze = False
    D = cfg.d_max
    if Xp.shape[-1] != 2 * D or Yp.shape[-1] != 2 * D or Xp.shape[0] != Yp.shape[0]:
        raise ValueError(f"padded inputs must have last axis {2 * D}: {tuple(Xp.shape)}, {tuple(Yp.shape)}")
    n_x = Xp.shape[1]
    root_n = math.sqrt(n_x)
    mask = Yp[..., D:]
    d = float(Xp[0, 0, D:].sum()) if n_x else 0.0
    tx = torch.cat([Xp[..., :D] * root_n, Xp[..., D:]], dim=-1)
    ty = torch.cat([Yp[..., :D] * root_n, Yp[..., D:]], dim=-1)

    ctx = _Ctx(training, seed, step, capture, cfg.dropout)
    x = linear(tx, w["embed/w"], w["embed/b"])
    for i in range(cfg.layers):
        x = _block(w, f"enc{i}", x, None, cfg, ctx, i)
    x = layer_norm(x, w["enc_ln/g"], w["enc_ln/b"])
    q = linear(ty, w["embed/w"], w["embed/b"])
    for i in range(cfg.decoder_layers):
        q = _block(w, f"dec{i}", q, x, cfg, ctx, cfg.layers + i)
    q = layer_norm(q, w["out_ln/g"], w["out_ln/b"])

    log_dens = linear(q, w["head_density/w"], w["head_density/b"])[..., 0]
    score = linear(q, w["head_score/w"], w["head_score/b"])
    t = ty[..., :D]
    if cfg.gaussian_baseline:
        log_dens = log_dens - 0.5 * (t * t).sum(-1) - 0.5 * d * LOG_2PI
        score = score - t
    # whitened-coordinate outputs: u = t / sqrt(n_x)
    log_dens = log_dens + 0.5 * d * math.log(n_x)
    score = score * mask * root_n
    log_dens, score = check_finite(log_dens, "density head"), check_finite(score, "score head")
    if squeeze:
        return log_dens[0], score[0]
    return log_dens, score


def forward(
    weights: ModelWeights,
    X,
    Y,
    *,
    training: bool = False,
    seed: int = 0,
    step: int = 0,
    create_graph: bool | None = None,
    capture: dict | None = None,
) -> DensityScoreEstimate:
    """Equivariant density/score estimate at queries ``Y`` from sample ``X``.

    ``X``: (n_x, d) or (B, n_x, d); ``Y`` likewise.  Returns tensors (float64)
    that stay attached to the graph of ``weights`` (and of ``Y`` if it requires
    grad).
    """
    cfg = weights.config
    X = as_tensor(X, torch.float64)
    Y = Y if isinstance(Y, torch.Tensor) and Y.dtype == torch.float64 else as_tensor(Y, torch.float64)
    squeeze = X.dim() == 2
    if squeeze:
        X, Y = X[None], Y[None]
    d = X.shape[-1]
    if Y.shape[-1] != d:
        raise ValueError(f"context has d={d} but queries have d={Y.shape[-1]}")
    if d > cfg.d_max:
        raise ValueError(f"dimension {d} exceeds d_max={cfg.d_max}")
    if Y.shape[-2] == 0:
        empty = DensityScoreEstimate(X.new_zeros(X.shape[0], 0), X.new_zeros(X.shape[0], 0, d))
        return DensityScoreEstimate(empty.log_densities[0], empty.scores[0]) if squeeze else empty

    autograd_score = cfg.head_mode == "autograd"
    if autograd_score and not Y.requires_grad:
        Y = Y.detach().requires_grad_(True)
    Xw, Yw, m, A, log_det = _whiten_t(X, Y)
    log_core, score_core = core_forward(
        weights, embed_pad(Xw.to(weights.dtype), cfg.d_max), embed_pad(Yw.to(weights.dtype), cfg.d_max),
        training=training, seed=seed, step=step, capture=capture,
    )
    log_dens = log_core.to(torch.float64) + log_det[:, None]
    if autograd_score:
        if create_graph is None:
            create_graph = torch.is_grad_enabled() and training
        (score,) = torch.autograd.grad(log_dens.sum(), Y, create_graph=create_graph)
    else:
        score = score_core[..., :d].to(torch.float64) @ A.transpose(-1, -2)
    if squeeze:
        return DensityScoreEstimate(log_dens[0], score[0])
    return DensityScoreEstimate(log_dens, score)


def predict(weights: ModelWeights, X, Y=None) -> DensityScoreEstimate:
    """Inference helper returning numpy arrays; queries default to ``X``."""
    if Y is None:
        Y = X
    if weights.config.head_mode == "autograd":
        est = forward(weights, X, Y, create_graph=False)
    else:
        with torch.no_grad():
            est = forward(weights, X, Y)
    return est.numpy()


# -- KDE head and attention export ----------------------------------------------


def kde_attention_head(X_unit, h: float) -> np.ndarray:
    """Single attention head with Q = K = X/h and V = I on unit-norm rows.

    The result is the row-normalised Gaussian kernel matrix of bandwidth h.
    """
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    X = as_tensor(X_unit, torch.float64)
    if X.dim() != 2:
        raise ValueError("expected an (n, d) matrix")
    norms = torch.linalg.norm(X, dim=1)
    if bool((norms - 1.0).abs().max() > 1e-10):
        raise ValueError("rows of X must have unit norm")
    Q = K = X / h
    return softmax_rows(Q @ K.T).numpy()


def normalized_gaussian_kernel(Q, K, h: float = 1.0 / math.sqrt(2.0)) -> np.ndarray:
    """Row-normalised ``exp(-|q_i - k_j|^2 / 2h^2)``; the default h gives
    ``exp(-|q_i - k_j|^2)``."""
    Q, K = np.asarray(Q, dtype=np.float64), np.asarray(K, dtype=np.float64)
    sq = ((Q[:, None, :] - K[None, :, :]) ** 2).sum(-1)
    logw = -sq / (2.0 * h * h)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=1, keepdims=True)


def export_attention(weights: ModelWeights, X, Y=None, layer: int = 0) -> dict:
    """Attention maps of one layer plus the KDE comparison matrix.

    Layers ``0 .. layers-1`` are the context self-attention blocks; the
    following ``decoder_layers`` indices are the query cross-attention blocks.
    """
    cfg = weights.config
    n_layers = cfg.layers + cfg.decoder_layers
    if not 0 <= layer < n_layers:
        raise IndexError(f"layer {layer} out of range [0, {n_layers})")
    X = np.asarray(X, dtype=np.float64)
    Y = X if Y is None else np.asarray(Y, dtype=np.float64)
    capture: dict = {}
    with torch.no_grad():
        Xw, Yw, *_ = _whiten_t(as_tensor(X)[None], as_tensor(Y)[None])
        core_forward(
            weights,
            embed_pad(Xw.to(weights.dtype), cfg.d_max),
            embed_pad(Yw.to(weights.dtype), cfg.d_max),
            capture=capture,
        )
    heads = capture[layer][0].to(torch.float64).numpy()
    mean = heads.mean(axis=0)
    queries = X if layer < cfg.layers else Y
    D = normalized_gaussian_kernel(queries, X)
    corr = float(np.corrcoef(mean.ravel(), D.ravel())[0, 1]) if mean.size > 1 else float("nan")
    return {"heads": heads, "mean": mean, "kde": D, "correlation": corr, "layer": layer}


def autograd_scores(weights: ModelWeights, X, Y=None) -> np.ndarray:
    """Gradient of the density head's log-density with respect to the queries,
    regardless of head mode."""
    Y = X if Y is None else Y
    Yt = as_tensor(Y, torch.float64).requires_grad_(True)
    est = forward(weights, X, Yt, create_graph=False)
    (g,) = torch.autograd.grad(est.log_densities.sum(), Yt)
    return g.numpy()
