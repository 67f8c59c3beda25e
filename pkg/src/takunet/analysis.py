"""
Static cost analysis: parameter and FLOP counts per layer, serialized payload
size, and the constrained search for per-stage channel widths.

FLOP convention: one multiply-accumulate counts as one FLOP. Convolutions
contribute ``output_positions * Cout * (Cin / groups) * kh * kw``; batch norm,
activations, pooling and GRN contribute one op per output element; the linear
head contributes ``F * K``. Concatenation, channel shuffle and residual
additions are free.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from .config import ArchConfig
from .model import LayerInfo, TakuNet, build_model
from .tensor import Precision

TARGET_PARAMS = {5: 37_685, 4: 37_444}
TARGET_FLOPS = {(240, 240): 35.93e6, (224, 224): 31.38e6}
FLOP_TOLERANCE = 0.02

BIAS_BITS = ("stem_bias", "block_bias", "downsampler_bias", "refiner_bias", "grn_per_channel")


@dataclass
class CountReport:
    rows: List[LayerInfo]
    total: int
    kind: str = "params"

    def by_layer(self) -> Dict[str, int]:
        return {r.name: r.params if self.kind == "params" else r.flops for r in self.rows}

    def by_kind(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for r in self.rows:
            out[r.kind] = out.get(r.kind, 0) + (r.params if self.kind == "params" else r.flops)
        return out


def _rows(model: TakuNet, input_shape=None) -> List[LayerInfo]:
    shape = input_shape if input_shape is not None else (1, 3) + model.cfg.input_size
    return model.trace(tuple(shape))


def count_params(model: TakuNet) -> CountReport:
    """Learnable parameters: conv/linear weights and biases, BN and GRN gamma/beta.

    BN running statistics are buffers and are not counted.
    """
    rows = [r for r in _rows(model) if r.params]
    return CountReport(rows, sum(r.params for r in rows), "params")


def count_flops(model: TakuNet, input_shape: Optional[Sequence[int]] = None) -> CountReport:
    """FLOPs for one sample (batch dimension forced to 1)."""
    if input_shape is not None:
        input_shape = tuple(input_shape)
        if len(input_shape) == 2:
            input_shape = (1, 3) + input_shape
        input_shape = (1,) + input_shape[-3:]
    rows = _rows(model, input_shape)
    return CountReport(rows, sum(r.flops for r in rows), "flops")


def parameter_payload_bytes(model: TakuNet, precision=None) -> int:
    """Raw bytes of the learnable parameters stored at ``precision``."""
    p = Precision.of(precision) if precision is not None else model.precision
    return count_params(model).total * p.dtype.itemsize


# -- channel derivation ------------------------------------------------------------

@dataclass(frozen=True)
class Candidate:
    stage_out_channels: Tuple[int, ...]
    bits: Tuple[bool, ...]
    params: Dict[int, int]
    flops: Dict[Tuple[int, int], int]

    def param_error(self, targets: Dict[int, int]) -> int:
        return abs(self.params[5] - targets[5])

    def flop_error(self, targets) -> float:
        return max(abs(self.flops[k] - v) / v for k, v in targets.items())

    def arch(self, **overrides) -> ArchConfig:
        kw = dict(zip(BIAS_BITS, self.bits))
        kw.update(overrides)
        return ArchConfig(stage_out_channels=self.stage_out_channels, **kw)


@dataclass
class DerivationResult:
    exact: List[Candidate]
    ranked: List[Candidate]
    chains_examined: int
    configs_examined: int
    seconds: float
    targets_params: Dict[int, int] = field(default_factory=lambda: dict(TARGET_PARAMS))
    targets_flops: Dict = field(default_factory=lambda: dict(TARGET_FLOPS))

    @property
    def chosen(self) -> Candidate:
        return self.exact[0] if self.exact else self.ranked[0]

    def near_misses(self, n: int = 10) -> List[Candidate]:
        return self.ranked[:n]

    def config(self, **overrides) -> ArchConfig:
        return self.chosen.arch(**overrides)


def channel_chains(stem: int = 40, final: int = 240, max_width: int = 240) -> Iterator[Tuple[int, ...]]:
    """Monotone width chains ending at ``final`` that satisfy downsampler divisibility.

    With dense connections the stage-s downsampler convolves ``2 * c_in`` channels
    in ``c_in / 2`` groups, so every next width must be a multiple of ``c_in / 2``.
    """

    def extend(chain: Tuple[int, ...]) -> Iterator[Tuple[int, ...]]:
        cin = chain[-1]
        groups = cin // 2
        if len(chain) == 4:
            if final >= cin and final % groups == 0 and (2 * cin) % groups == 0:
                yield chain[1:] + (final,)
            return
        for nxt in range(cin, max_width + 1, groups):
            yield from extend(chain + (nxt,))

    if stem % 2:
        return
    yield from extend((stem,))


def derive_channel_config(
    stem_channels: int = 40,
    stage_depths: Sequence[int] = (5, 5, 5, 4),
    final_width: int = 240,
    max_width: int = 240,
    target_params: Optional[Dict[int, int]] = None,
    target_flops: Optional[Dict[Tuple[int, int], float]] = None,
    flop_tolerance: float = FLOP_TOLERANCE,
    bit_space: Optional[Iterable[Tuple[bool, ...]]] = None,
) -> DerivationResult:
    """Search stage widths and counting-scope bits against parameter and FLOP targets.

    Every candidate is built with the real model builder and measured with
    :func:`count_params` / :func:`count_flops`. Chains whose FLOPs miss any
    target by more than ``flop_tolerance`` are discarded. Survivors are ranked
    by ``(|params - target|, worst FLOP error, widths, bits)``; exact parameter
    hits at every class count are returned separately.
    """
    t0 = time.perf_counter()
    tp = dict(target_params or TARGET_PARAMS)
    tf = dict(target_flops or TARGET_FLOPS)
    bits_list = list(bit_space) if bit_space is not None else list(itertools.product((False, True), repeat=5))
    chains = list(channel_chains(stem_channels, final_width, max_width))
    base = dict(stem_channels=stem_channels, stage_depths=tuple(stage_depths), num_classes=max(tp))
    ranked: List[Candidate] = []
    configs = 0
    for chain in chains:
        try:
            probe = build_model(ArchConfig(stage_out_channels=chain, **base))
        except ValueError:
            continue
        flops = {hw: count_flops(probe, (1, 3) + tuple(hw)).total for hw in tf}
        if any(abs(flops[hw] - v) / v > flop_tolerance for hw, v in tf.items()):
            continue
        for bits in bits_list:
            configs += 1
            kw = dict(zip(BIAS_BITS, bits))
            params = {}
            for k in tp:
                m = build_model(ArchConfig(stage_out_channels=chain, **{**base, "num_classes": k}, **kw))
                params[k] = count_params(m).total
            ranked.append(Candidate(chain, tuple(bits), params, flops))
    ranked.sort(key=lambda c: (c.param_error(tp), c.flop_error(tf), c.stage_out_channels, c.bits))
    exact = [c for c in ranked if all(c.params[k] == v for k, v in tp.items())]
    return DerivationResult(exact, ranked, len(chains), configs, time.perf_counter() - t0, tp, tf)


def discrepancy_report(model: TakuNet, target: int) -> str:
    """Per-layer parameter table with the gap to ``target``."""
    rep = count_params(model)
    lines = [f"{'layer':<32} {'kind':<18} {'params':>8}"]
    lines += [f"{r.name:<32} {r.kind:<18} {r.params:>8}" for r in rep.rows]
    for kind, n in sorted(rep.by_kind().items()):
        lines.append(f"  subtotal {kind:<29} {n:>8}")
    delta = rep.total - target
    lines.append(f"{'total':<51} {rep.total:>8}")
    lines.append(f"{'target':<51} {target:>8}")
    lines.append(f"{'difference':<51} {delta:>+8} ({100.0 * delta / target:+.2f}%)")
    return "\n".join(lines)


def analysis_summary(model: TakuNet, input_size=None) -> dict:
    hw = tuple(input_size) if input_size is not None else model.cfg.input_size
    params = count_params(model).total
    return {
        "params": params,
        "flops": count_flops(model, (1, 3) + hw).total,
        "size_bytes": parameter_payload_bytes(model),
        "size_bytes_f16": params * 2,
        "size_bytes_f32": params * 4,
    }
