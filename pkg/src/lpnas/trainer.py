"""Staged training: FP32 base training, then FP16-aware fine-tuning.

Both branches of the paired experiment start from bit-identical FP32 weights;
fine-tuning wraps the forward pass (clip, activation projection, weight
rounding through the straight-through estimator) while master weights and
gradient accumulation stay full precision. The fine-tune warmup ramps the
learning rate linearly over the first epoch with projections already active.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as datamod
from . import metrics
from . import precision as prec
from . import tensorcore as tc
from .blocks import Network, build_network
from .tensorcore import Ctx, Tape, Tensor

__all__ = [
    "TrainConfig",
    "TrainLog",
    "TrainingDiverged",
    "Adam",
    "Sgd",
    "make_optimizer",
    "train_fp32",
    "finetune_fp16_aware",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class TrainConfig:
    e_fp32: int = 10
    e_lp: int = 10
    warmup_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.e_fp32 < 0 or self.e_lp < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainLog:
    epoch_losses: list = field(default_factory=list)
    lr_by_step: list = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the epoch, batch and activation peak."""

    def __init__(self, epoch: int, batch: int, max_abs_activation: float):
        self.epoch = epoch
        self.batch = batch
        self.max_abs_activation = max_abs_activation
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch} "
            f"(max |activation| {max_abs_activation:.4g})")


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Sgd:
    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is not None:
                p.data -= lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def make_optimizer(name: str, params, lr: float):
    return Adam(params, lr) if name == "adam" else Sgd(params, lr)


def _run_epochs(network: Network, dataset: datamod.Dataset, config: TrainConfig, *,
                epochs: int, optimizer, shuffle_rng, dropout_rng,
                lr_for_step, log: TrainLog, epoch_offset: int = 0) -> None:
    params = network.parameters()
    n = len(dataset)
    for epoch in range(epochs):
        perm = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            xb = Tensor(dataset.images[idx], dtype=network.precision.dtype)
            yb = dataset.masks[idx]
            optimizer.zero_grad()
            ctx = Ctx(mode="train", rng=dropout_rng)
            with Tape() as tape:
                logits = network.forward(xb, ctx)
                loss = metrics.segmentation_loss(logits, yb)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                peak = [0.0]
                probe = Ctx(mode="eval", precision="auto", peak_abs=peak)
                network.forward(xb, probe)
                raise TrainingDiverged(epoch_offset + epoch, bi, peak[0])
            tape.backward(loss, params)
            lr = lr_for_step(epoch, bi)
            log.lr_by_step.append(lr)
            optimizer.step(lr)
            epoch_loss += loss_val
            batches += 1
        log.epoch_losses.append(epoch_loss / max(batches, 1))


def train_fp32(network: Network, train_data: datamod.Dataset, config: TrainConfig) -> TrainLog:
    """Plain full-precision training; deterministic given config.seed."""
    log = TrainLog()
    if config.e_fp32 == 0:
        return log
    shuffle_rng, dropout_rng = _streams(config.seed, "fp32")
    optimizer = make_optimizer(config.optimizer, network.parameters(), config.learning_rate)
    _run_epochs(network, train_data, config, epochs=config.e_fp32, optimizer=optimizer,
                shuffle_rng=shuffle_rng, dropout_rng=dropout_rng,
                lr_for_step=lambda e, b: config.learning_rate, log=log)
    return log


def finetune_fp16_aware(network: Network, train_data: datamod.Dataset, config: TrainConfig,
                        precision_config: prec.PrecisionConfig) -> TrainLog:
    """Deployment-aligned fine-tuning from the FP32-trained weights.

    Projections are active from the first step; the warmup epoch only ramps
    the learning rate (lr * t / steps_per_epoch at 1-indexed step t).
    """
    prec.wrap_network(network, precision_config)
    log = TrainLog()
    warmup = precision_config.warmup_epochs
    if config.e_lp == 0 and warmup == 0:
        return log
    shuffle_rng, dropout_rng = _streams(config.seed, "lp")
    optimizer = make_optimizer(config.optimizer, network.parameters(), config.learning_rate)
    steps_per_epoch = (len(train_data) + config.batch_size - 1) // config.batch_size
    total_warmup_steps = warmup * steps_per_epoch

    if warmup > 0:
        def warm_lr(epoch, batch):
            t = epoch * steps_per_epoch + batch + 1
            return config.learning_rate * t / total_warmup_steps

        _run_epochs(network, train_data, config, epochs=warmup, optimizer=optimizer,
                    shuffle_rng=shuffle_rng, dropout_rng=dropout_rng,
                    lr_for_step=warm_lr, log=log)
    if config.e_lp > 0:
        _run_epochs(network, train_data, config, epochs=config.e_lp, optimizer=optimizer,
                    shuffle_rng=shuffle_rng, dropout_rng=dropout_rng,
                    lr_for_step=lambda e, b: config.learning_rate, log=log,
                    epoch_offset=warmup)
    return log


def _streams(seed: int, label: str) -> tuple[np.random.Generator, np.random.Generator]:
    tag = {"fp32": 1, "lp": 2}[label]
    root = np.random.SeedSequence([int(seed), tag])
    shuffle_seq, dropout_seq = root.spawn(2)
    return np.random.default_rng(shuffle_seq), np.random.default_rng(dropout_seq)


def evaluate(network: Network, dataset: datamod.Dataset, mode: str = "fp32", batch_size: int = 32) -> float:
    """mIoU under plain FP32 inference or the simulated device path."""
    if len(dataset) == 0:
        raise metrics.MetricsError("empty evaluation dataset")
    if mode not in ("fp32", "deploy"):
        raise ValueError(f"unknown evaluate mode {mode!r}")
    acc = metrics.MiouAccumulator()
    deploy_ctx = prec.deploy_context() if mode == "deploy" else None
    for xb, yb in dataset.batches(batch_size):
        xt = Tensor(xb, dtype=network.precision.dtype)
        if mode == "deploy":
            logits = prec.deploy_mode_forward(network, xt, deploy_ctx)
        else:
            logits = network.forward(xt, Ctx(mode="eval", precision=None))
        acc.update(np.argmax(logits.data, axis=1), yb)
    return acc.result()


# ---------------------------------------------------------------------------
# checkpoints: one JSON manifest line, then one container per named tensor


def save_checkpoint(path, network: Network, config_hash: str = "") -> None:
    state = network.state_arrays()
    manifest = {
        "format": "lpnas-checkpoint",
        "version": 1,
        "genotype": network.code,
        "config_sha256": config_hash,
        "tensors": [name for name, _ in state],
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(manifest, sort_keys=True) + "\n").encode("utf-8"))
        for _, arr in state:
            fh.write(datamod.container_to_bytes(arr))


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (manifest, arrays-by-name)."""
    blob = Path(path).read_bytes()
    newline = blob.find(b"\n")
    if newline < 0:
        raise datamod.ContainerHeaderError("checkpoint has no manifest line")
    manifest = json.loads(blob[: newline].decode("utf-8"))
    if manifest.get("format") != "lpnas-checkpoint":
        raise datamod.ContainerHeaderError("not an lpnas checkpoint")
    arrays = {}
    offset = newline + 1
    for name in manifest["tensors"]:
        arr, offset = datamod._read_container(blob, offset)
        arrays[name] = arr
    return manifest, arrays


def restore_network(path, in_channels: int = 3, num_classes: int = 2) -> Network:
    """Rebuild the genotype's network and load the checkpointed tensors."""
    from . import genotype as gt

    manifest, arrays = load_checkpoint(path)
    g = gt.parse(manifest["genotype"])
    net = build_network(g, in_channels=in_channels, num_classes=num_classes, seed=0)
    net.load_state(arrays)
    return net


def config_hash(payload: str) -> str:
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
