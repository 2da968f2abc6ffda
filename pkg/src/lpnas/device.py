"""Simulated target accelerator: additive roofline cost model + deploy eval.

Latency sums, over the deployed (batchnorm-folded) operator list, a compute
term, a memory term over input/output/weight bytes, and a fixed per-operator
overhead. Accuracy is measured under the FP16 deploy path, so the resulting
Measurement carries exactly the quantities the fitness function consumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from . import trainer
from .blocks import Network, param_count

__all__ = [
    "DeviceProfile",
    "DEFAULT_PROFILE",
    "Measurement",
    "load_profile",
    "save_profile",
    "estimate_latency",
    "measure",
]


@dataclass(frozen=True)
class DeviceProfile:
    mac_rate: float = 1.0e9           # MAC/s
    mem_bandwidth: float = 2.0e9      # bytes/s
    per_op_overhead: float = 2.0e-3   # seconds
    weight_byte_width: int = 2        # FP16
    activation_byte_width: int = 2

    def __post_init__(self):
        if min(self.mac_rate, self.mem_bandwidth, self.per_op_overhead) <= 0:
            raise ValueError("device profile rates must be positive")
        if self.weight_byte_width < 1 or self.activation_byte_width < 1:
            raise ValueError("byte widths must be >= 1")


DEFAULT_PROFILE = DeviceProfile()

_PROFILE_FIELDS = ("mac_rate", "mem_bandwidth", "per_op_overhead",
                   "weight_byte_width", "activation_byte_width")


def load_profile(path) -> DeviceProfile:
    """Read a profile from UTF-8 key=value lines ('#' starts a comment)."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _PROFILE_FIELDS:
            raise ValueError(f"{path}:{lineno}: unknown profile key {key!r}")
        values[key] = int(value) if key.endswith("byte_width") else float(value)
    return DeviceProfile(**values)


def save_profile(path, profile: DeviceProfile) -> None:
    lines = [f"{name}={getattr(profile, name)}" for name in _PROFILE_FIELDS]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def estimate_latency(network: Network, input_shape: tuple, profile: DeviceProfile) -> float:
    """Deterministic latency (milliseconds) of one forward pass."""
    seconds = 0.0
    for op in network.deploy_cost_ops(input_shape):
        data_bytes = (op.elems_in + op.elems_out) * profile.activation_byte_width
        data_bytes += op.weight_elems * profile.weight_byte_width
        seconds += op.macs / profile.mac_rate
        seconds += data_bytes / profile.mem_bandwidth
        seconds += profile.per_op_overhead
    return seconds * 1000.0


@dataclass(frozen=True)
class Measurement:
    fps: float
    latency_ms: float
    miou_device: float
    param_count: int


def measure(network: Network, eval_dataset, profile: DeviceProfile, batch_size: int = 32) -> Measurement:
    """Simulated device-in-the-loop result: deploy-mode mIoU plus timing."""
    if len(eval_dataset) == 0:
        raise ValueError("measure: empty evaluation dataset")
    shape = (1,) + tuple(eval_dataset.images.shape[1:])
    latency_ms = estimate_latency(network, shape, profile)
    miou_device = trainer.evaluate(network, eval_dataset, mode="deploy", batch_size=batch_size)
    return Measurement(
        fps=1000.0 / latency_ms,
        latency_ms=latency_ms,
        miou_device=miou_device,
        param_count=param_count(network),
    )
