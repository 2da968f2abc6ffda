"""Search-space block library: conv primitives assembled into named blocks.

Each block kind builds a small subgraph of tensorcore ops and reports its
channel arithmetic, parameter count and MAC count. Spatial downsampling only
ever happens through explicit pool tokens; every convolution is stride 1 with
same padding, so output shapes are decidable from the token sequence alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator, Optional

import numpy as np

from . import precision as prec
from . import tensorcore as tc
from .tensorcore import CorePrecision, Ctx, Parameter, Tensor

__all__ = [
    "OpCost",
    "SE_RATIO",
    "SE_MIN_CHANNELS",
    "Module",
    "Conv2d",
    "DepthwiseConv2d",
    "BatchNorm2d",
    "Activation",
    "Pool",
    "Dropout",
    "SqueezeExcite",
    "Head",
    "Network",
    "build_block",
    "build_network",
    "param_count",
    "mac_count",
]

SE_RATIO = 0.25
SE_MIN_CHANNELS = 4


@dataclass(frozen=True)
class OpCost:
    """One inference-graph operator: MACs plus tensor/weight element traffic."""

    name: str
    macs: int
    elems_in: int
    elems_out: int
    weight_elems: int = 0


def _log(ctx: Ctx, name: str, macs: int, elems_in: int, elems_out: int, weight_elems: int = 0) -> None:
    if ctx.cost_log is not None:
        ctx.cost_log.append(OpCost(name, int(macs), int(elems_in), int(elems_out), int(weight_elems)))


class Module:
    """Base for layers and blocks: forward plus parameter/stat traversal."""

    _children: tuple = ()

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, ctx: Optional[Ctx] = None) -> Tensor:
        return self.forward(x, ctx if ctx is not None else Ctx())

    def iter_params(self) -> Iterator[Parameter]:
        for child in self._children:
            yield from child.iter_params()

    def iter_stats(self) -> Iterator[tuple[str, np.ndarray]]:
        for child in self._children:
            yield from child.iter_stats()


class BatchNorm2d(Module):
    def __init__(self, channels: int, name: str, dtype, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self.gamma = Parameter(np.ones(channels, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), f"{name}.beta")
        self.running = tc.BatchNormStats(
            mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype)
        )

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        # Deploy mode folds this into the preceding conv; it never runs here.
        out = tc.batchnorm2d(x, self.gamma, self.beta, self.running, ctx.mode, self.momentum, self.eps)
        return ctx.apply_post(out)

    def iter_params(self):
        yield self.gamma
        yield self.beta

    def iter_stats(self):
        yield f"{self.name}.running_mean", self.running.mean
        yield f"{self.name}.running_var", self.running.var


class Conv2d(Module):
    """Stride-1 same-padding conv, optionally fused with a following batchnorm.

    Owning the batchnorm makes both the FP16 projection site (conv output,
    before normalization) and deploy-time folding local decisions.
    """

    def __init__(self, cin: int, cout: int, kernel: int, name: str, rng, dtype, bias: bool = True, bn: bool = False):
        self.cin, self.cout, self.kernel = cin, cout, kernel
        std = math.sqrt(2.0 / (cin * kernel * kernel))
        self.weight = Parameter(rng.normal(0.0, std, (cout, cin, kernel, kernel)).astype(dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout, dtype=dtype), f"{name}.bias") if bias else None
        self.bn = BatchNorm2d(cout, f"{name}.bn", dtype) if bn else None
        self._children = (self.bn,) if bn else ()

    def _folded_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        w = self.weight.data
        b = self.bias.data if self.bias is not None else np.zeros(self.cout, dtype=w.dtype)
        if self.bn is None:
            return w, b
        scale = self.bn.gamma.data / np.sqrt(self.bn.running.var + self.bn.eps)
        return w * scale[:, None, None, None], (b - self.bn.running.mean) * scale + self.bn.beta.data

    def _deploy_params(self, ctx: Ctx) -> tuple[np.ndarray, np.ndarray]:
        cache = ctx.deploy_cache
        if cache is not None and id(self) in cache:
            return cache[id(self)]
        w, b = self._folded_arrays()
        pair = (prec.project_fp16(w), prec.project_fp16(b))
        if cache is not None:
            cache[id(self)] = pair
        return pair

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        n, _, h, w = x.shape
        if ctx.deploy:
            wf, bf = self._deploy_params(ctx)
            out = tc.conv2d(x, Tensor(wf, dtype=wf.dtype), Tensor(bf, dtype=bf.dtype))
            _log(ctx, f"conv{self.kernel}x{self.kernel}",
                 self.cout * self.cin * self.kernel ** 2 * h * w,
                 x.data.size, out.data.size, wf.size + bf.size)
            return ctx.apply_post(out)

        wrap = ctx.precision
        weight = self.weight
        if wrap is not None and wrap.round_weights:
            weight = prec.project_fp16(weight, wrap.overflow_policy)
        out = tc.conv2d(x, weight, self.bias)
        _log(ctx, f"conv{self.kernel}x{self.kernel}",
             self.cout * self.cin * self.kernel ** 2 * h * w,
             x.data.size, out.data.size,
             self.weight.data.size + (self.bias.data.size if self.bias is not None else 0))
        if wrap is not None and wrap.project_activations:
            if ctx.kink_gaps is not None and out.data.size:
                ctx.note_kink(float(np.min(np.abs(wrap.clip_bound - np.abs(out.data)))))
            out = prec.clip_activation(out, wrap.clip_bound)
            out = prec.project_fp16(out, wrap.overflow_policy)
        out = ctx.apply_post(out)
        if self.bn is not None:
            out = self.bn.forward(out, ctx)
        return out

    def iter_params(self):
        yield self.weight
        if self.bias is not None:
            yield self.bias
        if self.bn is not None:
            yield from self.bn.iter_params()


class DepthwiseConv2d(Module):
    """Per-channel conv (groups == C), optionally fused with a batchnorm."""

    def __init__(self, channels: int, kernel: int, name: str, rng, dtype, bn: bool = False):
        self.channels, self.kernel = channels, kernel
        std = math.sqrt(2.0 / (kernel * kernel))
        self.weight = Parameter(rng.normal(0.0, std, (channels, 1, kernel, kernel)).astype(dtype), f"{name}.weight")
        self.bn = BatchNorm2d(channels, f"{name}.bn", dtype) if bn else None
        self._children = (self.bn,) if bn else ()

    def _folded_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        w = self.weight.data
        b = np.zeros(self.channels, dtype=w.dtype)
        if self.bn is None:
            return w, b
        scale = self.bn.gamma.data / np.sqrt(self.bn.running.var + self.bn.eps)
        return w * scale[:, None, None, None], (b - self.bn.running.mean) * scale + self.bn.beta.data

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        n, _, h, w = x.shape
        macs = self.channels * self.kernel ** 2 * h * w
        if ctx.deploy:
            cache = ctx.deploy_cache
            if cache is not None and id(self) in cache:
                wf, bf = cache[id(self)]
            else:
                wa, ba = self._folded_arrays()
                wf, bf = prec.project_fp16(wa), prec.project_fp16(ba)
                if cache is not None:
                    cache[id(self)] = (wf, bf)
            out = tc.depthwise_conv2d(x, Tensor(wf, dtype=wf.dtype))
            out = tc.add(out, Tensor(np.broadcast_to(bf[None, :, None, None], out.shape).copy(), dtype=bf.dtype))
            _log(ctx, f"dwconv{self.kernel}x{self.kernel}", macs, x.data.size, out.data.size, wf.size + bf.size)
            return ctx.apply_post(out)

        wrap = ctx.precision
        weight = self.weight
        if wrap is not None and wrap.round_weights:
            weight = prec.project_fp16(weight, wrap.overflow_policy)
        out = tc.depthwise_conv2d(x, weight)
        _log(ctx, f"dwconv{self.kernel}x{self.kernel}", macs, x.data.size, out.data.size, self.weight.data.size)
        if wrap is not None and wrap.project_activations:
            out = prec.clip_activation(out, wrap.clip_bound)
            out = prec.project_fp16(out, wrap.overflow_policy)
        out = ctx.apply_post(out)
        if self.bn is not None:
            out = self.bn.forward(out, ctx)
        return out

    def iter_params(self):
        yield self.weight
        if self.bn is not None:
            yield from self.bn.iter_params()


class Activation(Module):
    def __init__(self, kind: str):
        self.kind = kind

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        if self.kind == "relu" and ctx.kink_gaps is not None and x.data.size:
            ctx.note_kink(float(np.min(np.abs(x.data))))
        out = tc.activation(x, self.kind)
        _log(ctx, self.kind, 0, x.data.size, out.data.size)
        return ctx.apply_post(out)


class Pool(Module):
    def __init__(self, kind: str):
        self.kind = kind

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        if self.kind == "max" and ctx.kink_gaps is not None:
            n, c, h, w = x.shape
            ho, wo = (h + 1) // 2, (w + 1) // 2
            xp = np.pad(x.data, ((0, 0), (0, 0), (0, 2 * ho - h), (0, 2 * wo - w)), constant_values=-np.inf)
            wins = xp.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
            top2 = np.partition(wins, 2, axis=-1)[..., 2:]
            gaps = top2[..., 1] - top2[..., 0]
            finite = gaps[np.isfinite(gaps)]
            if finite.size:
                ctx.note_kink(float(finite.min()))
        out = tc.pool2d(x, self.kind)
        _log(ctx, f"{self.kind}pool", 0, x.data.size, out.data.size)
        return ctx.apply_post(out)


class Dropout(Module):
    def __init__(self, rate: float):
        self.rate = rate

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        # stripped from the inference graph: no cost entry, no projection
        if ctx.mode != "train":
            return x
        return tc.dropout(x, self.rate, ctx.mode, ctx.rng)


class SqueezeExcite(Module):
    """Channel gate: global pool, bottleneck MLP (as 1x1 convs), sigmoid scale."""

    def __init__(self, channels: int, act: str, name: str, rng, dtype):
        reduced = max(SE_MIN_CHANNELS, int(channels * SE_RATIO))
        self.reduce = Conv2d(channels, reduced, 1, f"{name}.reduce", rng, dtype, bias=True)
        self.expand = Conv2d(reduced, channels, 1, f"{name}.expand", rng, dtype, bias=True)
        self.act = Activation(act)
        self.gate = Activation("sigmoid")
        self._children = (self.reduce, self.expand)

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        s = tc.global_avg_pool(x)
        _log(ctx, "gap", 0, x.data.size, s.data.size)
        s = ctx.apply_post(s)
        s = self.act.forward(self.reduce.forward(s, ctx), ctx)
        s = self.gate.forward(self.expand.forward(s, ctx), ctx)
        out = tc.mul_broadcast(x, s)
        _log(ctx, "scale", 0, x.data.size + s.data.size, out.data.size)
        return ctx.apply_post(out)


# ---------------------------------------------------------------------------
# blocks


class ConvActBlock(Module):
    def __init__(self, spec, cin: int, prefix: str, rng, dtype):
        self.in_channels, self.out_channels = cin, spec.width
        self.conv = Conv2d(cin, spec.width, spec.kernel, f"{prefix}.conv", rng, dtype, bias=True)
        self.act = Activation(spec.activation)
        self._children = (self.conv,)

    def forward(self, x, ctx):
        return self.act.forward(self.conv.forward(x, ctx), ctx)


class ConvBnActBlock(Module):
    def __init__(self, spec, cin: int, prefix: str, rng, dtype):
        self.in_channels, self.out_channels = cin, spec.width
        self.conv = Conv2d(cin, spec.width, spec.kernel, f"{prefix}.conv", rng, dtype, bias=False, bn=True)
        self.act = Activation(spec.activation)
        self._children = (self.conv,)

    def forward(self, x, ctx):
        return self.act.forward(self.conv.forward(x, ctx), ctx)


class ConvSEBlock(Module):
    def __init__(self, spec, cin: int, prefix: str, rng, dtype):
        self.in_channels, self.out_channels = cin, spec.width
        self.conv = Conv2d(cin, spec.width, spec.kernel, f"{prefix}.conv", rng, dtype, bias=True)
        self.act = Activation(spec.activation)
        self.se = SqueezeExcite(spec.width, spec.activation, f"{prefix}.se", rng, dtype)
        self._children = (self.conv, self.se)

    def forward(self, x, ctx):
        return self.se.forward(self.act.forward(self.conv.forward(x, ctx), ctx), ctx)


class MBConvBlock(Module):
    """Mobile inverted bottleneck; residual add only when channels match."""

    def __init__(self, spec, cin: int, prefix: str, rng, dtype, residual: bool):
        self.in_channels, self.out_channels = cin, spec.width
        hidden = cin * spec.expansion
        self.expand = Conv2d(cin, hidden, 1, f"{prefix}.expand", rng, dtype, bias=False, bn=True)
        self.dw = DepthwiseConv2d(hidden, 3, f"{prefix}.dw", rng, dtype, bn=True)
        self.proj = Conv2d(hidden, spec.width, 1, f"{prefix}.proj", rng, dtype, bias=False, bn=True)
        self.act = Activation(spec.activation)
        self.residual = residual and cin == spec.width
        self._children = (self.expand, self.dw, self.proj)

    def forward(self, x, ctx):
        h = self.act.forward(self.expand.forward(x, ctx), ctx)
        h = self.act.forward(self.dw.forward(h, ctx), ctx)
        h = self.proj.forward(h, ctx)
        if self.residual:
            h = tc.add(h, x)
            _log(ctx, "add", 0, 2 * h.data.size, h.data.size)
            h = ctx.apply_post(h)
        return h


class ResNetBlock(Module):
    def __init__(self, spec, cin: int, prefix: str, rng, dtype):
        self.in_channels, self.out_channels = cin, spec.width
        self.conv1 = Conv2d(cin, spec.width, spec.kernel, f"{prefix}.conv1", rng, dtype, bias=False, bn=True)
        self.conv2 = Conv2d(spec.width, spec.width, spec.kernel, f"{prefix}.conv2", rng, dtype, bias=False, bn=True)
        self.shortcut = None if cin == spec.width else Conv2d(cin, spec.width, 1, f"{prefix}.short", rng, dtype, bias=False)
        self.act = Activation(spec.activation)
        self._children = tuple(c for c in (self.conv1, self.conv2, self.shortcut) if c is not None)

    def forward(self, x, ctx):
        h = self.act.forward(self.conv1.forward(x, ctx), ctx)
        h = self.conv2.forward(h, ctx)
        s = x if self.shortcut is None else self.shortcut.forward(x, ctx)
        h = tc.add(h, s)
        _log(ctx, "add", 0, 2 * h.data.size, h.data.size)
        h = ctx.apply_post(h)
        return self.act.forward(h, ctx)


class DenseNetBlock(Module):
    """conv-bn-act producing `width` new channels, concatenated onto the input."""

    def __init__(self, spec, cin: int, prefix: str, rng, dtype):
        self.in_channels, self.out_channels = cin, cin + spec.width
        self.conv = Conv2d(cin, spec.width, 3, f"{prefix}.conv", rng, dtype, bias=False, bn=True)
        self.act = Activation(spec.activation)
        self._children = (self.conv,)

    def forward(self, x, ctx):
        new = self.act.forward(self.conv.forward(x, ctx), ctx)
        out = tc.concat_channels(x, new)
        _log(ctx, "concat", 0, x.data.size + new.data.size, out.data.size)
        return ctx.apply_post(out)


class CSPBlockBase(Module):
    """Cross-stage partial: transform the first ceil(C/2) channels, pass the
    rest through untouched, concatenate and apply a 1x1 transition conv."""

    def __init__(self, cin: int, width: int, prefix: str, rng, dtype):
        self.in_channels, self.out_channels = cin, width
        self.split_point = (cin + 1) // 2
        self.transition = Conv2d(cin, width, 1, f"{prefix}.transition", rng, dtype, bias=True)
        self.inner: Module = None  # set by subclasses

    def forward(self, x, ctx):
        c = x.shape[1]
        left = tc.slice_channels(x, 0, self.split_point)
        _log(ctx, "slice", 0, left.data.size, left.data.size)
        left = ctx.apply_post(left)
        if self.split_point < c:
            right = tc.slice_channels(x, self.split_point, c)
            _log(ctx, "slice", 0, right.data.size, right.data.size)
            right = ctx.apply_post(right)
        else:
            right = None
        merged = self.inner.forward(left, ctx)
        if right is not None:
            merged = tc.concat_channels(merged, right)
            _log(ctx, "concat", 0, merged.data.size, merged.data.size)
            merged = ctx.apply_post(merged)
        return self.transition.forward(merged, ctx)


class CSPConvBlock(CSPBlockBase):
    def __init__(self, spec, cin: int, prefix: str, rng, dtype):
        super().__init__(cin, spec.width, prefix, rng, dtype)
        inner_spec = replace(spec, kind="CBA", kernel=3, width=self.split_point)
        self.inner = ConvBnActBlock(inner_spec, self.split_point, f"{prefix}.inner", rng, dtype)
        self._children = (self.inner, self.transition)


class CSPMBConvBlock(CSPBlockBase):
    def __init__(self, spec, cin: int, prefix: str, rng, dtype):
        super().__init__(cin, spec.width, prefix, rng, dtype)
        inner_spec = replace(spec, kind="MBN", width=self.split_point)
        self.inner = MBConvBlock(inner_spec, self.split_point, f"{prefix}.inner", rng, dtype, residual=False)
        self._children = (self.inner, self.transition)


class Head(Module):
    """Fixed segmentation head: nearest upsample back to input resolution,
    then a 1x1 conv to per-class logits."""

    def __init__(self, cin: int, num_classes: int, upsample_factor: int, name: str, rng, dtype):
        self.in_channels = cin
        self.num_classes = num_classes
        self.factor = upsample_factor
        self.conv = Conv2d(cin, num_classes, 1, f"{name}.conv", rng, dtype, bias=True)
        self._children = (self.conv,)

    def forward(self, x: Tensor, ctx: Ctx, target_hw: Optional[tuple] = None) -> Tensor:
        if self.factor > 1:
            up = tc.upsample_nearest(x, self.factor)
            _log(ctx, "upsample", 0, x.data.size, up.data.size)
            x = ctx.apply_post(up)
        if target_hw is not None and x.shape[2:] != tuple(target_hw):
            x = tc.crop_spatial(x, target_hw[0], target_hw[1])
            _log(ctx, "crop", 0, x.data.size, x.data.size)
            x = ctx.apply_post(x)
        return self.conv.forward(x, ctx)


_BLOCK_BUILDERS = {
    "CA": ConvActBlock,
    "CBA": ConvBnActBlock,
    "CSE": ConvSEBlock,
    "MB": lambda spec, cin, prefix, rng, dtype: MBConvBlock(spec, cin, prefix, rng, dtype, residual=True),
    "MBN": lambda spec, cin, prefix, rng, dtype: MBConvBlock(spec, cin, prefix, rng, dtype, residual=False),
    "CSPC": CSPConvBlock,
    "CSPM": CSPMBConvBlock,
    "DN": DenseNetBlock,
    "RN": ResNetBlock,
}


def build_block(spec, in_channels: int, prefix: str = "b0", rng=None, precision: CorePrecision = CorePrecision.BINARY32):
    """Instantiate one block; returns (subgraph, out_channels)."""
    if in_channels < 1:
        raise ValueError(f"in_channels must be >= 1, got {in_channels}")
    builder = _BLOCK_BUILDERS.get(spec.kind)
    if builder is None:
        raise ValueError(f"unknown block kind {spec.kind!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    block = builder(spec, in_channels, prefix, rng, precision.dtype)
    return block, block.out_channels


class Network(Module):
    """A parsed genotype instantiated as an executable layer sequence."""

    def __init__(self, entries: list, head: Head, code: str = "", precision: CorePrecision = CorePrecision.BINARY32, in_channels: int = 3):
        self.entries = entries
        self.head = head
        self.code = code
        self.precision = precision
        self.in_channels = in_channels
        self.precision_config = None  # set by precision.wrap_network
        self._children = tuple(entries) + (head,)

    def forward(self, x: Tensor, ctx: Optional[Ctx] = None) -> Tensor:
        if ctx is None:
            ctx = Ctx()
        if ctx.precision == "auto":
            ctx = replace(ctx, precision=self.precision_config)
        target_hw = x.shape[2:]
        for entry in self.entries:
            x = entry.forward(x, ctx)
        return self.head.forward(x, ctx, target_hw=target_hw)

    def parameters(self) -> list[Parameter]:
        return list(self.iter_params())

    def named_stats(self) -> list[tuple[str, np.ndarray]]:
        return list(self.iter_stats())

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Named parameter and running-stat arrays, in traversal order."""
        out = [(p.name, p.data) for p in self.iter_params()]
        out.extend(self.iter_stats())
        return out

    def load_state(self, arrays: dict) -> None:
        for name, arr in self.state_arrays():
            src = arrays.get(name)
            if src is None:
                raise KeyError(f"checkpoint is missing tensor {name!r}")
            if src.shape != arr.shape:
                raise ValueError(f"tensor {name!r}: shape {src.shape} != {arr.shape}")
            arr[...] = src.astype(arr.dtype, copy=False)

    def deploy_cost_ops(self, input_shape: tuple) -> list[OpCost]:
        """Operator list of the deployed (folded) inference graph."""
        ctx = prec.deploy_context()
        ctx.cost_log = []
        x = Tensor(np.zeros(input_shape, dtype=self.precision.dtype))
        self.forward(x, ctx)
        return ctx.cost_log


def build_network(genotype, in_channels: int = 3, num_classes: int = 2, seed: int = 0,
                  precision: CorePrecision = CorePrecision.BINARY32) -> Network:
    """Deterministically instantiate a genotype (weights drawn from `seed`)."""
    from .genotype import BlockSpec, DropToken, PoolToken, serialize

    rng = np.random.default_rng(seed)
    dtype = precision.dtype
    entries: list[Module] = []
    channels = in_channels
    pools = 0
    block_idx = 0
    for token in genotype.tokens:
        if isinstance(token, BlockSpec):
            block, channels = build_block(token, channels, f"b{block_idx}", rng, precision)
            entries.append(block)
            block_idx += 1
        elif isinstance(token, PoolToken):
            entries.append(Pool(token.kind))
            pools += 1
        elif isinstance(token, DropToken):
            entries.append(Dropout(token.rate))
        else:
            raise TypeError(f"unknown token {token!r}")
    head = Head(channels, num_classes, 2 ** pools, "head", rng, dtype)
    return Network(entries, head, code=serialize(genotype), precision=precision, in_channels=in_channels)


def param_count(network: Module) -> int:
    """Exact number of scalar parameters."""
    return sum(p.data.size for p in network.iter_params())


def mac_count(network: Network, input_shape: tuple) -> int:
    """Multiply-accumulates of one deployed forward pass."""
    return sum(op.macs for op in network.deploy_cost_ops(input_shape))
