"""Hardware-aware NAS over a simulated FP16 edge device, fully deterministic."""

__version__ = "0.1.0"
