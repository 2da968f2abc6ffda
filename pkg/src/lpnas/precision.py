"""FP16 deployment emulation: projection, STE, activation clipping, deploy mode.

The projection rounds each scalar to the nearest binary16 value
(round-to-nearest, ties-to-even) and widens it back, so the forward pass sees
deployment numerics while master weights and gradients stay full precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensorcore as tc
from .tensorcore import Ctx, Tensor

__all__ = [
    "HALF_MAX",
    "PrecisionConfig",
    "PrecisionError",
    "project_fp16",
    "ste_backward",
    "clip_activation",
    "wrap_network",
    "deploy_context",
    "deploy_mode_forward",
]

HALF_MAX = 65504.0


class PrecisionError(RuntimeError):
    pass


@dataclass
class PrecisionConfig:
    """Forward-pass FP16 policy used during deployment-aligned fine-tuning."""

    project_activations: bool = True
    round_weights: bool = True
    clip_bound: float = 12.0
    overflow_policy: str = "saturate"  # "saturate" | "infinity"
    warmup_epochs: int = 1

    def __post_init__(self):
        if not 0.0 < self.clip_bound < HALF_MAX:
            raise ValueError(f"clip_bound must be in (0, {HALF_MAX}), got {self.clip_bound}")
        if self.overflow_policy not in ("saturate", "infinity"):
            raise ValueError(f"unknown overflow_policy {self.overflow_policy!r}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")


def _project_array(arr: np.ndarray, overflow_policy: str) -> np.ndarray:
    with np.errstate(over="ignore"):
        out = arr.astype(np.float16).astype(arr.dtype)
    if overflow_policy == "saturate":
        # Finite inputs beyond the half range saturate; true infinities (like
        # NaNs) propagate unchanged.
        over = np.isinf(out) & np.isfinite(arr)
        if over.any():
            out = np.where(over, np.copysign(arr.dtype.type(HALF_MAX), arr), out)
    return out


def project_fp16(x: Union[float, np.ndarray, Tensor], overflow_policy: str = "saturate") -> Union[float, np.ndarray, Tensor]:
    """Round to nearest binary16 (ties-to-even) and widen back.

    Accepts a scalar, an ndarray, or a Tensor. On tensors the backward rule
    is the straight-through estimator: the upstream gradient passes unchanged.
    """
    if isinstance(x, Tensor):
        out = Tensor(_project_array(x.data, overflow_policy), dtype=x.data.dtype)

        def backward(g: np.ndarray) -> None:
            tc.accumulate_grad(x, ste_backward(g))

        return tc.record_op(out, (x,), backward)
    if isinstance(x, np.ndarray):
        return _project_array(x, overflow_policy)
    arr = _project_array(np.asarray(x, dtype=np.float64), overflow_policy)
    return float(arr)


def ste_backward(upstream_grad: np.ndarray) -> np.ndarray:
    """Straight-through estimator: d projection / d input treated as 1."""
    return upstream_grad


def clip_activation(x: Tensor, bound: float = 12.0) -> Tensor:
    """Symmetric clip to [-bound, bound]; gradient passes where |x| <= bound."""
    if bound <= 0:
        raise ValueError(f"clip_activation: bound must be > 0, got {bound}")
    out = Tensor(np.clip(x.data, -bound, bound), dtype=x.data.dtype)
    inside = (x.data >= -bound) & (x.data <= bound)

    def backward(g: np.ndarray) -> None:
        tc.accumulate_grad(x, g * inside)

    return tc.record_op(out, (x,), backward)


def wrap_network(network, config: PrecisionConfig):
    """Attach the FP16 forward policy to a network.

    Conv layers then read projected weights and clip+project their outputs
    whenever the forward context leaves precision on "auto". Master weights
    are untouched; only the forward computation changes.
    """
    if getattr(network, "precision_config", None) is not None:
        raise PrecisionError("network is already wrapped")
    network.precision_config = config
    return network


def deploy_context() -> Ctx:
    """Context for simulated device inference, reusable across batches.

    Every operator output is projected to FP16, parameters are folded
    (batchnorm into the preceding conv) and pre-projected once per context,
    and no clipping is applied.
    """
    return Ctx(mode="eval", precision=None, deploy=True, post=project_fp16, deploy_cache={})


def deploy_mode_forward(network, x: Tensor, ctx: Optional[Ctx] = None) -> Tensor:
    """Simulated device inference on one input batch."""
    if ctx is None:
        ctx = deploy_context()
    xb = x if isinstance(x, Tensor) else Tensor(x)
    return network.forward(project_fp16(xb), ctx)
