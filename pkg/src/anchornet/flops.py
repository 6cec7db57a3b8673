"""Analytic FLOPs counting for layer stacks and the patch-pipeline cost ratio.

Conventions: a multiply-accumulate is 2 FLOPs (bias folded in); activations,
pooling, residual additions and global pooling cost 1 FLOP per output
element; concatenation is free.  ``CostReport.macs`` keeps the plain
multiply-accumulate count, which is what published "GFLOPs" figures for
common backbones usually tabulate.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from typing import Sequence

from .errors import GeometryUnderflow, InvalidArgument, ParseError
from .rf import Pair, as_pair
from .stack import StackConfig

CONVENTIONS = {
    "mac": "2 flops",
    "elementwise": "1 flop per output element (activation, pooling, add, global pool)",
    "concat": "0 flops",
}


@dataclass(frozen=True)
class LayerCost:
    layer: str
    out_size: Pair
    out_channels: int
    flops: int
    macs: int = 0


@dataclass
class CostReport:
    layers: list[LayerCost]
    in_size: Pair
    baseline: int | None = None
    metadata: dict[str, str] = field(default_factory=lambda: dict(CONVENTIONS))

    @property
    def total(self) -> int:
        return sum(c.flops for c in self.layers)

    @property
    def macs(self) -> int:
        return sum(c.macs for c in self.layers)

    @property
    def ratio(self) -> float | None:
        return None if self.baseline is None else self.total / self.baseline


def _spatial(size, spec):
    out = []
    for n, k, s, p in zip(size, spec.kernel, spec.stride, spec.padding):
        if n + 2 * p < k:
            raise GeometryUnderflow(f"{spec.name}: input {size} smaller than kernel {spec.kernel}")
        out.append((n - k + 2 * p) // s + 1)
    return tuple(out)


def model_flops(stack: StackConfig, in_size, baseline: int | None = None) -> CostReport:
    """Per-layer FLOPs of ``stack`` on an input of ``in_size`` (int = square, or width for 1D)."""
    in_size = as_pair(in_size, one_d=stack.one_d)
    chans = stack.channels()
    sizes: dict[str, Pair] = {"input": in_size}
    costs = []
    for i, spec in enumerate(stack.layers):
        srcs = stack.sources(i)
        src_sizes = [sizes[s] for s in srcs]
        c_in = chans[srcs[0]]
        c_out = chans[spec.name]
        size = src_sizes[0]
        macs = flops = 0
        if spec.op in ("add", "concat") and len(set(src_sizes)) != 1:
            raise InvalidArgument(f"{spec.name}: inputs have different spatial sizes {src_sizes}")
        if spec.op == "conv":
            size = _spatial(size, spec)
            macs = size[0] * size[1] * c_out * (c_in // spec.groups) * spec.kernel[0] * spec.kernel[1]
            flops = 2 * macs
        elif spec.op == "bneck":
            exp = spec.expansion or c_in
            area_in = size[0] * size[1]
            size = _spatial(size, spec)
            area = size[0] * size[1]
            expand = area_in * c_in * exp if exp != c_in else 0
            macs = expand + area * exp * spec.kernel[0] * spec.kernel[1] + area * exp * c_out
            flops = 2 * macs
        elif spec.op in ("maxpool", "avgpool"):
            size = _spatial(size, spec)
            flops = size[0] * size[1] * c_out
        elif spec.op == "gap":
            size = (1, 1)
            flops = c_out
        elif spec.op == "fc":
            macs = size[0] * size[1] * c_in * c_out
            size = (1, 1)
            flops = 2 * macs
        elif spec.op in ("act", "add"):
            flops = size[0] * size[1] * c_out
        sizes[spec.name] = size
        costs.append(LayerCost(spec.name, size, c_out, flops, macs))
    return CostReport(costs, in_size, baseline)


@dataclass(frozen=True)
class BranchStats:
    """Images (or documents) routed to one branch and their mean patch count."""

    count: int
    mean_patches: float
    patch_size: int | Pair


# Routing statistics of the reference image and text pipelines: documents per
# branch, mean patches per document, patch size.
REFERENCE_STATS = {
    "image": [BranchStats(15050, 5.6, 63), BranchStats(18047, 2.9, 95), BranchStats(16903, 2.1, 111)],
    "text": [BranchStats(454, 1.0, (1, 3)), BranchStats(547, 1.0, (1, 5)), BranchStats(67, 1.0, (1, 7))],
}


def format_stats(stats: Sequence[BranchStats]) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser["stats"] = {"format": "anchornet-stats", "version": "1"}
    for i, st in enumerate(stats):
        h, w = as_pair(st.patch_size)
        parser[f"branch:{i}"] = {"count": str(st.count), "mean_patches": repr(float(st.mean_patches)),
                                 "patch_size": f"{h} {w}"}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def parse_stats(text: str) -> list[BranchStats]:
    """Branch statistics from INI text: ``[stats]`` header, one ``[branch:N]`` per branch."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ParseError(str(exc)) from None
    head = parser["stats"] if parser.has_section("stats") else {}
    if head.get("format") != "anchornet-stats" or head.get("version") != "1":
        raise ParseError("not an anchornet-stats v1 file")
    out = []
    try:
        for name in parser.sections():
            if name.startswith("branch:"):
                sect = parser[name]
                h, w = (int(t) for t in sect["patch_size"].split())
                out.append(BranchStats(int(sect["count"]), float(sect["mean_patches"]), (h, w)))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad branch statistics: {exc}") from None
    if not out:
        raise ParseError("stats file lists no branches")
    return out


@dataclass
class PipelineReport:
    branch_ratios: list[float]
    overall: float
    full_flops: int
    patch_flops: list[int]
    include_upstream: bool


def pipeline_ratio(
    stack: StackConfig,
    full_size,
    branch_stats: Sequence[BranchStats],
    include_upstream_cost: bool = False,
    upstream_flops: float = 0.0,
) -> PipelineReport:
    """Downstream cost of classifying localized patches, relative to the full input.

    Per branch: ``mean_patches * flops(patch) / flops(full)``, plus
    ``upstream_flops / flops(full)`` when the localizer's own cost is counted.
    The overall ratio weights branches by their counts.
    """
    if not branch_stats:
        raise InvalidArgument("need at least one branch")
    full = model_flops(stack, full_size).total
    ratios, patch_costs = [], []
    for st in branch_stats:
        if st.count <= 0 or st.mean_patches < 0:
            raise InvalidArgument(f"bad branch statistics {st}")
        cost = model_flops(stack, st.patch_size).total
        ratio = st.mean_patches * cost / full
        if include_upstream_cost:
            ratio += upstream_flops / full
        patch_costs.append(cost)
        ratios.append(ratio)
    weight = sum(st.count for st in branch_stats)
    overall = sum(st.count * r for st, r in zip(branch_stats, ratios)) / weight
    return PipelineReport(ratios, overall, full, patch_costs, include_upstream_cost)


def format_report(report: CostReport, limit: int | None = None) -> str:
    rows = [f"{'layer':<24}{'out':>12}{'ch':>7}{'FLOPs':>16}"]
    layers = report.layers if limit is None else report.layers[:limit]
    for c in layers:
        rows.append(f"{c.layer:<24}{c.out_size[0]:>5}x{c.out_size[1]:<6}{c.out_channels:>7}{c.flops:>16,}")
    if limit is not None and len(report.layers) > limit:
        rows.append(f"... {len(report.layers) - limit} more layers")
    rows.append(f"{'total':<49}{report.total:>16,}")
    rows.append(f"{'multiply-accumulates':<49}{report.macs:>16,}")
    return "\n".join(rows)
