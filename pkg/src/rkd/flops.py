"""Multiply-accumulate accounting and cost-preserving model separation.

Costs count one MAC per weight use: a conv layer costs
``Cout * Cin * kh * kw * Hout * Wout`` and a linear layer ``in * out``.
Normalization, activations and pooling are free.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

from .netspec import LayerInfo, LayerSpec, NetworkSpec, SpecError, infer_shapes

CONVENTIONS = {"mac": 1, "flop": 2}


def layer_flops(layer: LayerSpec, input_shape: Sequence[int]) -> int:
    """MACs for one layer given its ``(C, H, W)`` input (``(in,)`` for linear).

    A residual block is charged for its two convolutions and any projection.
    """
    if layer.kind == "linear":
        fin = int(input_shape[0])
        if fin < 1:
            raise SpecError(f"invalid linear input shape {tuple(input_shape)}")
        return fin * layer.channels_out
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise SpecError(f"invalid input shape {tuple(input_shape)}; expected (C, H, W)")
    if layer.kind not in ("conv", "residual-block"):
        return 0
    probe = NetworkSpec(tuple(input_shape), [[layer]], 1, "probe")
    return sum(_info_macs(info) for info in infer_shapes(probe).layers if info.id != "classifier")


def _info_macs(info: LayerInfo) -> int:
    if info.kind == "conv":
        _, ho, wo = info.out_shape
        return info.cout * info.cin * info.kernel[0] * info.kernel[1] * ho * wo
    if info.kind == "linear":
        return info.cin * info.cout
    return 0


@dataclass
class CostReport:
    per_layer: list[tuple[str, int]]
    total_macs: int
    convention: str = "mac"

    @property
    def total_gflops(self) -> float:
        return self.total_macs * CONVENTIONS[self.convention] / 1e9


def network_flops(spec: NetworkSpec, convention: str = "mac") -> CostReport:
    """Sum conv and linear costs over the network, projections included."""
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}")
    per = [(info.id, _info_macs(info)) for info in infer_shapes(spec).layers if info.kind in ("conv", "linear")]
    return CostReport(per, sum(m for _, m in per), convention)


# ---------------------------------------------------------------------------
# separation


def scaled_width(channels: int, fraction: float) -> int:
    """``round_half_up(sqrt(fraction) * channels)``.

    Raises :class:`SpecError` when the result is zero.
    """
    value = Decimal(repr(math.sqrt(fraction) * channels)).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    width = int(value)
    if width < 1:
        raise SpecError(
            f"a {channels}-channel layer rounds to 0 channels at fraction {fraction:g};"
            " use a larger base width"
        )
    return width


def width_groups(spec: NetworkSpec) -> list[list[tuple[int, int]]]:
    """Positions whose widths are tied together by identity shortcuts."""
    groups: list[list[tuple[int, int]]] = []
    for bi, block in enumerate(spec.blocks):
        for li, layer in enumerate(block):
            if layer.channels_out is None:
                continue
            if layer.kind == "residual-block" and layer.shortcut == "identity" and groups:
                groups[-1].append((bi, li))
            else:
                groups.append([(bi, li)])
    return groups


@dataclass
class SeparationPlan:
    ratio: float
    layers: list[dict]
    spec_S: NetworkSpec
    spec_A: NetworkSpec
    cost: dict = field(default_factory=dict)

    @property
    def conservation_error(self) -> float:
        """Relative gap ``(S + A - orig) / orig``."""
        return (self.cost["S"] + self.cost["A"] - self.cost["orig"]) / self.cost["orig"]

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "layers": self.layers,
            "spec_S": self.spec_S.to_dict(),
            "spec_A": self.spec_A.to_dict(),
            "cost": self.cost,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _round_width(value: float, what: str) -> int:
    width = int(Decimal(repr(value)).quantize(Decimal(1), rounding=ROUND_HALF_UP))
    if width < 1:
        raise SpecError(f"{what} rounds to 0 channels; use a larger base width")
    return width


def _relaxed_cost(spec: NetworkSpec, group_of: dict, scales: Sequence[float]) -> float:
    """Network cost with every width group ``g`` scaled by the real factor ``scales[g]``.

    Image channels and the class count stay fixed. Exact for integer widths,
    and a smooth function of the scales in between.
    """
    total = 0.0
    src = None  # width group feeding the current layer; None for the image
    block_src, last_pos = None, None
    for info in infer_shapes(spec).layers:
        if info.kind == "linear":
            total += info.cin * (scales[src] if src is not None else 1.0) * info.cout
            continue
        if info.kind != "conv":
            continue
        if info.position != last_pos:
            block_src, last_pos = src, info.position
        g = group_of[info.position]
        g_in = g if info.id.endswith(".conv2") else block_src
        cin = info.cin * (scales[g_in] if g_in is not None else 1.0)
        _, ho, wo = info.out_shape
        total += cin * info.cout * scales[g] * info.kernel[0] * info.kernel[1] * ho * wo
        src = g
    return total


def _stem_scale(spec: NetworkSpec, group_of: dict, n_groups: int, fraction: float, orig: int) -> float:
    """Scale for width group 0 that gives the relaxed network ``fraction`` of ``orig``.

    Other groups sit at ``sqrt(fraction)``. Found by bisection on (0, 1];
    capped at 1 (the original width).
    """
    rest = math.sqrt(fraction)
    target = fraction * orig

    def cost(s):
        return _relaxed_cost(spec, group_of, [s] + [rest] * (n_groups - 1))

    if cost(1.0) <= target:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if cost(mid) < target else (lo, mid)
    return 0.5 * (lo + hi)


def separate(spec: NetworkSpec, p: float) -> SeparationPlan:
    """Split ``spec`` into a student taking cost share ``p`` and an assistant taking ``1 - p``.

    Every layer keeps its kind, kernel and stride; channel counts shrink to
    ``round(sqrt(p) * C)`` and ``round(sqrt(1 - p) * C)`` so that each
    interior conv, whose cost is proportional to ``Cin * Cout``, splits its
    MACs in ratio ``p : 1 - p``.

    The width group fed by the first conv is the exception: the first conv
    sees fixed image channels, so its cost is linear in its width and the
    square-root rule would overspend. That group's scale is solved on the
    real-valued cost so each derived network's total matches its share, and
    then rounded like every other width. All widths are thus rounded
    non-decreasing functions of ``p``, so the student's cost never drops as
    ``p`` grows.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"separation ratio must lie in (0, 1), got {p}")
    orig = network_flops(spec).total_macs
    groups = width_groups(spec)
    positions = [pos for g in groups for pos in g]
    base = {pos: spec.blocks[pos[0]][pos[1]].channels_out for pos in positions}
    widths_S = {pos: scaled_width(c, p) for pos, c in base.items()}
    widths_A = {pos: scaled_width(c, 1.0 - p) for pos, c in base.items()}
    stem = groups[0]
    if spec.blocks[stem[0][0]][stem[0][1]].kind == "conv":
        group_of = {pos: gi for gi, g in enumerate(groups) for pos in g}
        c = base[stem[0]]
        for widths, frac in ((widths_S, p), (widths_A, 1.0 - p)):
            scale = _stem_scale(spec, group_of, len(groups), frac, orig)
            w = _round_width(scale * c, f"the {c}-channel stem at fraction {frac:g}")
            for pos in stem:
                widths[pos] = w
    tag = f"{round(p * 100)}"
    spec_S = spec.with_widths(widths_S, f"{spec.name}-S{tag}")
    spec_A = spec.with_widths(widths_A, f"{spec.name}-A{round((1 - p) * 100)}")
    for derived in (spec_S, spec_A):
        infer_shapes(derived)
    layers = [
        {"id": f"b{bi}.l{li}", "C": base[(bi, li)], "C_S": widths_S[(bi, li)], "C_A": widths_A[(bi, li)]}
        for bi, li in positions
    ]
    cost = {"orig": orig, "S": network_flops(spec_S).total_macs, "A": network_flops(spec_A).total_macs}
    return SeparationPlan(p, layers, spec_S, spec_A, cost)
