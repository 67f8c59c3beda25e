"""
TakuNet model graph: layer objects with cached forward/backward, the composite
blocks (stem, Taku block, downsampler, refiner) and the full network.

Parameter names are stable dotted paths, e.g. ``stem.conv.w``,
``stage2.block3.dw.w``, ``downsampler1.pw.w``, ``refiner.dw.w``,
``classifier.w``. Stages, blocks and downsamplers are numbered from 1.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .config import ArchConfig
from .ops import BatchNormState, ConvSpec, GrnState
from .tensor import Precision, concat_channels

Shape = Tuple[int, ...]


@dataclass
class LayerInfo:
    name: str
    kind: str
    in_shape: Shape
    out_shape: Shape
    params: int
    flops: int


def _numel(shape: Sequence[int]) -> int:
    return int(np.prod(shape, dtype=np.int64))


def _grad_dtype(dtype) -> np.dtype:
    return np.dtype(np.float64) if np.dtype(dtype) == np.float64 else np.dtype(np.float32)


class Layer:
    """Leaf layer. ``params``/``buffers`` map local names to arrays."""

    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: Dict[str, np.ndarray] = OrderedDict()
        self.buffers: Dict[str, np.ndarray] = OrderedDict()
        self.grads: Dict[str, np.ndarray] = {}
        self._x: Optional[np.ndarray] = None

    def leaves(self) -> Iterator["Layer"]:
        yield self

    def _cache(self, x: np.ndarray, train: bool) -> None:
        self._x = x if train else None

    def _cached(self) -> np.ndarray:
        if self._x is None:
            raise RuntimeError(f"{self.name}: backward called without a cached train-mode forward")
        return self._x

    def out_shape(self, s: Shape) -> Shape:
        return s

    def flops(self, in_shape: Shape) -> int:
        return _numel(self.out_shape(in_shape))

    def trace(self, s: Shape, rows: List[LayerInfo]) -> Shape:
        out = self.out_shape(s)
        n_params = sum(p.size for p in self.params.values())
        rows.append(LayerInfo(self.name, self.kind, tuple(s), tuple(out), n_params, self.flops(s)))
        return out


class Conv(Layer):
    kind = "conv"

    def __init__(self, name: str, spec: ConvSpec):
        super().__init__(name)
        self.spec = spec
        self.params["w"] = np.zeros(spec.weight_shape, np.float32)
        if spec.bias:
            self.params["b"] = np.zeros(spec.out_channels, np.float32)

    def init(self, rng: np.random.Generator) -> None:
        fan_in = self.params["w"][0].size
        bound = math.sqrt(6.0 / fan_in)
        self.params["w"][...] = rng.uniform(-bound, bound, self.params["w"].shape)
        if "b" in self.params:
            bb = 1.0 / math.sqrt(fan_in)
            self.params["b"][...] = rng.uniform(-bb, bb, self.params["b"].shape)

    def forward(self, x, train):
        self._cache(x, train)
        return ops.conv2d(x, self.params["w"], self.params.get("b"), self.spec)

    def backward(self, g):
        gx, gw, gb = ops.conv2d_vjp(self._cached(), self.params["w"], self.spec, g)
        self.grads["w"] = gw
        if gb is not None:
            self.grads["b"] = gb
        return gx

    def out_shape(self, s):
        if s[1] != self.spec.in_channels:
            raise ValueError(f"{self.name}: expected {self.spec.in_channels} channels, got {s[1]}")
        return (s[0], self.spec.out_channels) + self.spec.output_hw(s[2], s[3])

    def flops(self, s):
        n, _, ho, wo = self.out_shape(s)
        kh, kw = self.spec.kernel
        return n * ho * wo * self.spec.out_channels * (self.spec.in_channels // self.spec.groups) * kh * kw


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name: str, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__(name)
        self.eps, self.momentum = eps, momentum
        self.params["gamma"] = np.ones(channels, np.float32)
        self.params["beta"] = np.zeros(channels, np.float32)
        self.buffers["running_mean"] = np.zeros(channels, np.float32)
        self.buffers["running_var"] = np.ones(channels, np.float32)

    def state(self, train: bool) -> BatchNormState:
        return BatchNormState(
            self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            eps=self.eps, momentum=self.momentum, mode="train" if train else "eval",
        )

    def forward(self, x, train):
        self._cache(x, train)
        return ops.batch_norm(x, self.state(train))

    def backward(self, g):
        gx, self.grads["gamma"], self.grads["beta"] = ops.batch_norm_vjp(self._cached(), self.state(True), g)
        return gx


class ReLU6(Layer):
    kind = "relu6"

    def forward(self, x, train):
        self._cache(x, train)
        return ops.relu6(x)

    def backward(self, g):
        return ops.relu6_vjp(self._cached(), g)


class Pool(Layer):
    def __init__(self, name: str, mode: str, k: int = 2, s: int = 2):
        super().__init__(name)
        if mode not in ("max", "avg"):
            raise ValueError(f"unknown pool mode {mode!r}")
        self.mode, self.k, self.s = mode, k, s
        self.kind = f"{mode}pool"

    def forward(self, x, train):
        self._cache(x, train)
        fn = ops.max_pool2d if self.mode == "max" else ops.avg_pool2d
        return fn(x, self.k, self.s)

    def backward(self, g):
        fn = ops.max_pool2d_vjp if self.mode == "max" else ops.avg_pool2d_vjp
        return fn(self._cached(), self.k, self.s, g)

    def out_shape(self, s):
        ho, wo = (s[2] - self.k) // self.s + 1, (s[3] - self.k) // self.s + 1
        if s[2] < self.k or s[3] < self.k:
            raise ValueError(f"{self.name}: spatial extent collapses below 1 (input {s[2]}x{s[3]})")
        return (s[0], s[1], ho, wo)


class AdaptiveAvgPool(Layer):
    kind = "adaptive_avgpool"

    def forward(self, x, train):
        self._cache(x, train)
        return ops.adaptive_avg_pool(x)

    def backward(self, g):
        return ops.adaptive_avg_pool_vjp(self._cached(), g)

    def out_shape(self, s):
        return (s[0], s[1], 1, 1)


class GRN(Layer):
    kind = "grn"

    def __init__(self, name: str, channels: int, per_channel: bool = True, eps: float = 1e-6):
        super().__init__(name)
        n = channels if per_channel else 1
        self.eps = eps
        self.params["gamma"] = np.zeros(n, np.float32)
        self.params["beta"] = np.zeros(n, np.float32)

    def state(self) -> GrnState:
        return GrnState(self.params["gamma"], self.params["beta"], self.eps)

    def forward(self, x, train):
        self._cache(x, train)
        return ops.grn(x, self.state())

    def backward(self, g):
        gx, self.grads["gamma"], self.grads["beta"] = ops.grn_vjp(self._cached(), self.state(), g)
        return gx


class ChannelShuffle(Layer):
    kind = "shuffle"

    def __init__(self, name: str, groups: int):
        super().__init__(name)
        self.groups = groups

    def forward(self, x, train):
        return ops.channel_shuffle(x, self.groups)

    def backward(self, g):
        return ops.channel_shuffle_vjp(g, self.groups)

    def flops(self, s):
        return 0


class Linear(Layer):
    kind = "linear"

    def __init__(self, name: str, in_features: int, out_features: int):
        super().__init__(name)
        self.params["w"] = np.zeros((out_features, in_features), np.float32)
        self.params["b"] = np.zeros(out_features, np.float32)

    def init(self, rng: np.random.Generator) -> None:
        fan_in = self.params["w"].shape[1]
        self.params["w"][...] = rng.uniform(-1, 1, self.params["w"].shape) * math.sqrt(6.0 / fan_in)
        self.params["b"][...] = rng.uniform(-1, 1, self.params["b"].shape) / math.sqrt(fan_in)

    def forward(self, x, train):
        x2 = x.reshape(x.shape[0], -1)
        self._cache(x2, train)
        return ops.linear(x2, self.params["w"], self.params["b"])

    def backward(self, g):
        gx, self.grads["w"], self.grads["b"] = ops.linear_vjp(self._cached(), self.params["w"], g)
        return gx

    def out_shape(self, s):
        f = _numel(s[1:])
        if f != self.params["w"].shape[1]:
            raise ValueError(f"{self.name}: expected {self.params['w'].shape[1]} features, got {f}")
        return (s[0], self.params["w"].shape[0])

    def flops(self, s):
        return s[0] * self.params["w"].size


def _run(layers: Sequence[Layer], x, train):
    for layer in layers:
        x = layer.forward(x, train)
    return x


def _back(layers: Sequence[Layer], g):
    for layer in reversed(layers):
        g = layer.backward(g)
    return g


def _trace_seq(layers: Sequence[Layer], s, rows):
    for layer in layers:
        s = layer.trace(s, rows)
    return s


# -- composite blocks ------------------------------------------------------------

class Block:
    """Composite of leaf layers with its own forward/backward wiring."""

    def leaves(self) -> Iterator[Layer]:
        for part in self.parts():
            yield from part.leaves()

    def parts(self) -> List:
        raise NotImplementedError


class Stem(Block):
    """Dilated 3x3 conv then a strided depthwise 3x3 with a pooled residual."""

    def __init__(self, in_ch: int, ch: int, bias: bool):
        self.conv = Conv("stem.conv", ConvSpec(in_ch, ch, 3, stride=2, padding=2, dilation=2, bias=bias))
        self.bn1 = BatchNorm("stem.bn1", ch)
        self.act1 = ReLU6("stem.act1")
        self.dw = Conv("stem.dw", ConvSpec(ch, ch, 3, stride=2, padding=1, groups=ch, bias=bias))
        self.bn2 = BatchNorm("stem.bn2", ch)
        self.act2 = ReLU6("stem.act2")
        self.skip = Pool("stem.skip_pool", "avg", 2, 2)

    def parts(self):
        return [self.conv, self.bn1, self.act1, self.dw, self.bn2, self.act2, self.skip]

    def forward(self, x, train):
        y = _run([self.conv, self.bn1, self.act1], x, train)
        z = _run([self.dw, self.bn2, self.act2], y, train)
        return z + self.skip.forward(y, train)

    def backward(self, g):
        gy = _back([self.dw, self.bn2, self.act2], g) + self.skip.backward(g)
        return _back([self.conv, self.bn1, self.act1], gy)

    def trace(self, s, rows):
        y = _trace_seq([self.conv, self.bn1, self.act1], s, rows)
        z = _trace_seq([self.dw, self.bn2, self.act2], y, rows)
        r = self.skip.trace(y, rows)
        if r != z:
            raise ValueError(f"stem residual shape {r} does not match main path {z}; use an input size divisible by 4")
        return z


class TakuBlock(Block):
    """Depthwise 3x3 -> BN -> ReLU6 with an identity residual."""

    def __init__(self, prefix: str, ch: int, bias: bool):
        self.dw = Conv(f"{prefix}.dw", ConvSpec(ch, ch, 3, stride=1, padding=1, groups=ch, bias=bias))
        self.bn = BatchNorm(f"{prefix}.bn", ch)
        self.act = ReLU6(f"{prefix}.act")

    def parts(self):
        return [self.dw, self.bn, self.act]

    def forward(self, x, train):
        return _run(self.parts(), x, train) + x

    def backward(self, g):
        return _back(self.parts(), g) + g

    def trace(self, s, rows):
        return _trace_seq(self.parts(), s, rows)


def downsampler_groups(in_channels: int, out_channels: int) -> int:
    """Group count of the downsampler's pointwise conv: floor((in + out) / 4)."""
    return (in_channels + out_channels) // 4


class Downsampler(Block):
    """Dense concat -> shuffle -> grouped 1x1 conv -> BN -> ReLU6 -> pool -> GRN."""

    def __init__(self, prefix: str, stage_in: int, block_out: int, target: int, pool: str, cfg: ArchConfig):
        self.dense = cfg.dense_connections
        conv_in = stage_in + block_out if self.dense else block_out
        groups = downsampler_groups(stage_in if self.dense else block_out, block_out)
        if groups < 1 or conv_in % groups or target % groups:
            raise ValueError(
                f"{prefix}: groups={groups} must divide conv input {conv_in} and output {target}"
            )
        self.groups = groups
        self.shuffle = ChannelShuffle(f"{prefix}.shuffle", 2) if cfg.channel_shuffle else None
        self.pw = Conv(f"{prefix}.pw", ConvSpec(conv_in, target, 1, groups=groups, bias=cfg.downsampler_bias))
        self.bn = BatchNorm(f"{prefix}.bn", target)
        self.act = ReLU6(f"{prefix}.act")
        self.pool = Pool(f"{prefix}.pool", pool, 2, 2)
        self.grn = GRN(f"{prefix}.grn", target, cfg.grn_per_channel) if cfg.grn else None
        self._split = 0

    def parts(self):
        return [p for p in (self.shuffle, self.pw, self.bn, self.act, self.pool, self.grn) if p is not None]

    def forward(self, stage_in, x, train):
        if self.dense:
            self._split = stage_in.shape[1]
            x = concat_channels(stage_in, x)
        return _run(self.parts(), x, train)

    def backward(self, g):
        """Returns ``(grad_stage_in, grad_block_out)``; the first is None without dense connections."""
        g = _back(self.parts(), g)
        if self.dense:
            return g[:, : self._split], g[:, self._split:]
        return None, g

    def trace(self, stage_in, s, rows):
        if self.dense:
            rows.append(LayerInfo(f"{self.pw.name.rsplit('.', 1)[0]}.concat", "concat",
                                  tuple(s), (s[0], s[1] + stage_in[1]) + tuple(s[2:]), 0, 0))
            s = (s[0], s[1] + stage_in[1]) + tuple(s[2:])
        return _trace_seq(self.parts(), s, rows)


class Refiner(Block):
    def __init__(self, ch: int, bias: bool):
        self.dw = Conv("refiner.dw", ConvSpec(ch, ch, 3, stride=1, padding=1, groups=ch, bias=bias))
        self.bn = BatchNorm("refiner.bn", ch)
        self.pool = AdaptiveAvgPool("refiner.pool")

    def parts(self):
        return [self.dw, self.bn, self.pool]

    def forward(self, x, train):
        return _run(self.parts(), x, train)

    def backward(self, g):
        return _back(self.parts(), g)

    def trace(self, s, rows):
        return _trace_seq(self.parts(), s, rows)


class TakuNet:
    """The full network built from an :class:`ArchConfig`."""

    def __init__(self, cfg: ArchConfig, seed: int = 0):
        self.cfg = cfg
        self.stem = Stem(3, cfg.stem_channels, cfg.stem_bias)
        self.stages: List[List[TakuBlock]] = []
        self.downsamplers: List[Downsampler] = []
        for s, (cin, depth, cout) in enumerate(
            zip(cfg.stage_in_channels, cfg.stage_depths, cfg.stage_out_channels), start=1
        ):
            blocks = [TakuBlock(f"stage{s}.block{b}", cin, cfg.block_bias) for b in range(1, depth + 1)]
            self.stages.append(blocks)
            pool = "avg" if s == 4 else "max"
            self.downsamplers.append(Downsampler(f"downsampler{s}", cin, cin, cout, pool, cfg))
        final = cfg.stage_out_channels[-1]
        self.refiner = Refiner(final, cfg.refiner_bias) if cfg.refiner else None
        self.head_pool = None if cfg.refiner else AdaptiveAvgPool("head.pool")
        self.classifier = Linear("classifier", final, cfg.num_classes)
        self.precision = Precision.F32
        self.initialize(seed)
        self.trace((1, 3) + cfg.input_size)
        if cfg.precision is not Precision.F32:
            self.set_precision(cfg.precision)

    # -- structure --------------------------------------------------------------
    def modules(self) -> List:
        mods: List = [self.stem]
        for blocks, ds in zip(self.stages, self.downsamplers):
            mods.extend(blocks)
            mods.append(ds)
        mods.append(self.refiner if self.refiner is not None else self.head_pool)
        mods.append(self.classifier)
        return mods

    def leaves(self) -> Iterator[Layer]:
        for m in self.modules():
            yield from m.leaves()

    def named_parameters(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((f"{l.name}.{k}", v) for l in self.leaves() for k, v in l.params.items())

    def named_buffers(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((f"{l.name}.{k}", v) for l in self.leaves() for k, v in l.buffers.items())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = self.named_parameters()
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = {}
        for leaf in self.leaves():
            for store in (leaf.params, leaf.buffers):
                for k in store:
                    own[f"{leaf.name}.{k}"] = (store, k)
        unknown = set(state) - set(own)
        missing = set(own) - set(state)
        if strict and (unknown or missing):
            raise KeyError(f"state mismatch: unknown={sorted(unknown)} missing={sorted(missing)}")
        for name, value in state.items():
            if name not in own:
                continue
            store, k = own[name]
            if tuple(value.shape) != store[k].shape:
                raise ValueError(f"{name}: shape {value.shape} != {store[k].shape}")
            store[k] = np.array(value, dtype=store[k].dtype)

    def initialize(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for leaf in self.leaves():
            if hasattr(leaf, "init"):
                leaf.init(rng)

    def set_precision(self, precision) -> None:
        """Cast parameters to ``precision``. BN running statistics stay in the accumulation dtype."""
        p = Precision.of(precision)
        for leaf in self.leaves():
            for k in leaf.params:
                leaf.params[k] = leaf.params[k].astype(p.dtype)
            for k in leaf.buffers:
                leaf.buffers[k] = leaf.buffers[k].astype(p.accumulator)
        self.precision = p
        self.cfg = self.cfg.replace(precision=p)

    def copy(self, precision=None) -> "TakuNet":
        """Independent copy with the same weights, optionally cast to another precision."""
        clone = TakuNet(self.cfg.replace(precision=self.precision))
        clone.load_state_dict(self.state_dict())
        if precision is not None:
            clone.set_precision(precision)
        return clone

    # -- execution ------------------------------------------------------------
    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != cfg.input_size:
            raise ValueError(f"expected input (N, 3, {cfg.input_size[0]}, {cfg.input_size[1]}), got {x.shape}")
        x = x.astype(self.precision.dtype, copy=False)
        x = self.stem.forward(x, train)
        for blocks, ds in zip(self.stages, self.downsamplers):
            stage_in = x
            for blk in blocks:
                x = blk.forward(x, train)
            x = ds.forward(stage_in, x, train)
        x = self.refiner.forward(x, train) if self.refiner is not None else self.head_pool.forward(x, train)
        return self.classifier.forward(x, train)

    __call__ = forward

    def backward(self, grad_logits: np.ndarray) -> "OrderedDict[str, np.ndarray]":
        for leaf in self.leaves():
            leaf.grads = {}
        g = self.classifier.backward(grad_logits.astype(_grad_dtype(self.precision.dtype)))
        final = self.cfg.stage_out_channels[-1]
        g = g.reshape(g.shape[0], final, 1, 1)
        g = self.refiner.backward(g) if self.refiner is not None else self.head_pool.backward(g)
        for blocks, ds in zip(reversed(self.stages), reversed(self.downsamplers)):
            g_in, g = ds.backward(g)
            for blk in reversed(blocks):
                g = blk.backward(g)
            if g_in is not None:
                g = g + g_in
        self.stem.backward(g)
        grads = OrderedDict()
        for leaf in self.leaves():
            for k, p in leaf.params.items():
                grads[f"{leaf.name}.{k}"] = leaf.grads.get(k, np.zeros(p.shape, _grad_dtype(p.dtype)))
        return grads

    def trace(self, input_shape: Shape) -> List[LayerInfo]:
        """Static shape inference; raises on divisibility or spatial collapse."""
        if len(input_shape) == 2:
            input_shape = (1, 3) + tuple(input_shape)
        elif len(input_shape) == 3:
            input_shape = (1,) + tuple(input_shape)
        rows: List[LayerInfo] = []
        s = self.stem.trace(tuple(input_shape), rows)
        for blocks, ds in zip(self.stages, self.downsamplers):
            stage_in = s
            for blk in blocks:
                s = blk.trace(s, rows)
            s = ds.trace(stage_in, s, rows)
        if self.refiner is not None:
            s = self.refiner.trace(s, rows)
        else:
            s = self.head_pool.trace(s, rows)
        self.classifier.trace(s, rows)
        return rows


def build_model(cfg: ArchConfig, seed: int = 0) -> TakuNet:
    return TakuNet(cfg, seed)
