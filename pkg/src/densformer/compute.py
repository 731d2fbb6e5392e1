"""Dense-tensor primitives, reverse-mode gradients and Adam.

Everything here operates on :class:`torch.Tensor` values.  Torch supplies the
tape (autograd); this module pins down the handful of differentiable
primitives the transformer is built from (max-shifted softmax, exact GELU,
layer normalisation, counter-keyed dropout) so each can be gradient-checked
on its own.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

DEFAULT_DTYPE = torch.float64

_check_finite = True


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf guard run after every primitive."""
    global _check_finite
    _check_finite = bool(enabled)


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Temporarily enable or disable the per-primitive NaN/Inf guard."""
    global _check_finite
    old, _check_finite = _check_finite, bool(enabled)
    try:
        yield
    finally:
        _check_finite = old


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if _check_finite and not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def as_tensor(x, dtype: torch.dtype | None = None) -> torch.Tensor:
    """Convert array-likes to a tensor of ``dtype`` (float64 by default)."""
    dtype = dtype or DEFAULT_DTYPE
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def softmax_rows(M: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax over the last axis with per-row max subtraction.

    Leading axes are treated as a stack of matrices; a 1-D input is rejected.
    """
    if M.dim() < 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {tuple(M.shape)}")
    # torch.softmax subtracts the row maximum before exponentiating
    return check_finite(torch.softmax(M, dim=-1), "softmax_rows")


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact (erf) GELU."""
    return check_finite(0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0))), "gelu")


def layer_norm(
    x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    return check_finite(xc / torch.sqrt(var + eps) * weight + bias, "layer_norm")


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = x @ weight
    if bias is not None:
        y = y + bias
    return check_finite(y, "linear")


def dropout_key(seed: int, step: int, layer: str) -> int:
    """Counter-based RNG key for a dropout mask, independent of call order."""
    h = hashlib.blake2b(f"{seed}:{step}:{layer}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") & ((1 << 63) - 1)


def dropout(
    x: torch.Tensor,
    p: float,
    *,
    training: bool,
    seed: int = 0,
    step: int = 0,
    layer: str = "",
) -> torch.Tensor:
    """Inverted dropout; identity unless ``training``.  Masks depend only on
    ``(seed, step, layer)``."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        return torch.zeros_like(x)
    gen = torch.Generator().manual_seed(dropout_key(seed, step, layer))
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def grad(loss: torch.Tensor, params: Sequence[torch.Tensor], create_graph: bool = False):
    """Reverse-mode gradients of scalar ``loss`` with respect to ``params``."""
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any parameter")
    params = list(params)
    grads = torch.autograd.grad(
        loss.reshape(()), params, allow_unused=True, create_graph=create_graph
    )
    missing = [i for i, g in enumerate(grads) if g is None]
    if missing:
        raise ValueError(f"parameters {missing} are not in the recorded graph")
    return list(grads)


def global_norm(grads: Sequence[torch.Tensor]) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))


def clip_by_global_norm(grads: Sequence[torch.Tensor], max_norm: float):
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return list(grads), norm


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls(
            m=[torch.zeros_like(p, dtype=p.dtype).detach() for p in params],
            v=[torch.zeros_like(p, dtype=p.dtype).detach() for p in params],
            step=0,
        )


def adam_update(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One bias-corrected Adam step.

    Parameters are updated in place (they are usually leaf tensors owned by a
    module) and returned together with the advanced state.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not state.m:
        state = AdamState.zeros_like(params)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if p.shape != g.shape or p.shape != m.shape:
                raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    state.step = t
    return params, state
