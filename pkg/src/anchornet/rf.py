"""Receptive-field arithmetic for zero-padding convolution stacks.

Geometry is carried as ``(height, width)`` pairs.  One-dimensional stacks
(text) use height 1 throughout, so a token span is a rectangle of height 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

from .errors import GeometryUnderflow, InvalidArgument, OutOfBounds

Pair = tuple[int, int]
PairLike = Union[int, Sequence[int]]


def as_pair(value: PairLike, *, one_d: bool = False) -> Pair:
    """Normalize an int or a 2-sequence to a pair.

    A bare int means a square size, or a width with height 1 when ``one_d``.
    """
    if isinstance(value, int):
        return (1, value) if one_d else (value, value)
    items = tuple(int(v) for v in value)
    if len(items) == 1:
        return (1, items[0])
    if len(items) != 2:
        raise InvalidArgument(f"expected an int or a pair, got {value!r}")
    return items


@dataclass(frozen=True)
class LayerGeom:
    kernel: Pair
    stride: Pair = (1, 1)
    padding: Pair = (0, 0)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kernel", as_pair(self.kernel))
        object.__setattr__(self, "stride", as_pair(self.stride))
        object.__setattr__(self, "padding", as_pair(self.padding))
        if min(self.kernel) < 1:
            raise InvalidArgument(f"kernel must be >= 1, got {self.kernel}")
        if min(self.stride) < 1:
            raise InvalidArgument(f"stride must be >= 1, got {self.stride}")
        if min(self.padding) < 0:
            raise InvalidArgument(f"padding must be >= 0, got {self.padding}")

    @classmethod
    def square(cls, k: int, s: int = 1, p: int = 0, name: str = "") -> "LayerGeom":
        return cls((k, k), (s, s), (p, p), name)

    @classmethod
    def span(cls, k: int, s: int = 1, p: int = 0, name: str = "") -> "LayerGeom":
        """A 1D layer: kernel ``k`` along the width axis, height 1."""
        return cls((1, k), (1, s), (0, p), name)

    def label(self, index: int) -> str:
        return self.name or f"layer {index}"


@dataclass(frozen=True)
class RFSummary:
    """Accumulated geometry of a stack.

    ``start`` is the input coordinate where the patch of output location 0
    begins; it is 0 for zero-padding stacks and negative otherwise.
    ``in_size``/``out_size`` are set only when an input size was given.
    """

    rf: Pair
    jump: Pair
    start: Pair = (0, 0)
    n_layers: int = 0
    in_size: Pair | None = None
    out_size: Pair | None = None

    def at_input(self, in_size: PairLike) -> "RFSummary":
        """Attach an input size using the closed form (zero padding only)."""
        if self.start != (0, 0):
            raise InvalidArgument("closed-form sizing needs a zero-padding stack; use compose()")
        in_size = as_pair(in_size)
        out = patch_grid(in_size, self.rf, self.jump)
        return RFSummary(self.rf, self.jump, self.start, self.n_layers, in_size, out)


@dataclass(frozen=True)
class PatchRect:
    top: int
    left: int
    height: int
    width: int

    @classmethod
    def span(cls, left: int, width: int) -> "PatchRect":
        return cls(0, left, 1, width)

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def area(self) -> int:
        return self.height * self.width

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.bottom), slice(self.left, self.right)

    def inside(self, size: PairLike) -> bool:
        h, w = as_pair(size, one_d=True)
        return self.top >= 0 and self.left >= 0 and self.bottom <= h and self.right <= w


def _layer_out(size: Pair, layer: LayerGeom, index: int) -> Pair:
    out = []
    for n, k, s, p in zip(size, layer.kernel, layer.stride, layer.padding):
        if n + 2 * p < k:
            raise GeometryUnderflow(
                f"{layer.label(index)}: input {size} (padding {layer.padding}) "
                f"is smaller than kernel {layer.kernel}"
            )
        out.append((n - k + 2 * p) // s + 1)
    return tuple(out)


def _stack_size(in_size: PairLike, layers: Sequence[LayerGeom]) -> Pair:
    # a bare int is a sequence length for 1D stacks and a square side otherwise
    one_d = bool(layers) and all(l.kernel[0] == 1 and l.stride[0] == 1 and l.padding[0] == 0 for l in layers)
    return as_pair(in_size, one_d=one_d)


def layer_sizes(in_size: PairLike, layers: Sequence[LayerGeom]) -> list[Pair]:
    """Output size after each layer, in order."""
    size = _stack_size(in_size, layers)
    sizes = []
    for i, layer in enumerate(layers):
        size = _layer_out(size, layer, i)
        sizes.append(size)
    return sizes


def output_size(in_size: PairLike, layers: Sequence[LayerGeom]) -> Pair:
    if not layers:
        return as_pair(in_size)
    return layer_sizes(in_size, layers)[-1]


def compose(layers: Sequence[LayerGeom], in_size: PairLike | None = None) -> RFSummary:
    """Fold layer geometry input->output into accumulated RF, jump and start."""
    if not layers:
        raise InvalidArgument("cannot compose an empty layer stack")
    rf, jump, start = [1, 1], [1, 1], [0, 0]
    for layer in layers:
        for d in range(2):
            rf[d] += (layer.kernel[d] - 1) * jump[d]
            start[d] -= layer.padding[d] * jump[d]
            jump[d] *= layer.stride[d]
    summary = RFSummary(tuple(rf), tuple(jump), tuple(start), len(layers))
    if in_size is None:
        return summary
    in_size = _stack_size(in_size, layers)
    return RFSummary(summary.rf, summary.jump, summary.start, len(layers),
                     in_size, output_size(in_size, layers))


def patch_grid(in_size: PairLike, rf: PairLike, jump: PairLike) -> Pair:
    """Number of patch placements per dimension, ``floor((in - rf) / jump) + 1``."""
    one_d = isinstance(in_size, int)
    in_size, rf, jump = (as_pair(v, one_d=one_d) for v in (in_size, rf, jump))
    counts = []
    for n, k, s in zip(in_size, rf, jump):
        if n < k:
            raise GeometryUnderflow(f"input {in_size} is smaller than receptive field {rf}")
        counts.append((n - k) // s + 1)
    return tuple(counts)


def map_location(loc: PairLike, summary: RFSummary) -> PatchRect:
    """Input rectangle seen by output location ``loc`` (row, col).

    Refuses geometries in which any output location's patch leaves the input.
    """
    if summary.out_size is None or summary.in_size is None:
        raise InvalidArgument("summary has no input size; build it with compose(layers, in_size)")
    loc = as_pair(loc, one_d=True)
    if not all(0 <= x < n for x, n in zip(loc, summary.out_size)):
        raise InvalidArgument(f"location {loc} outside output grid {summary.out_size}")
    for d in range(2):
        last_end = summary.start[d] + (summary.out_size[d] - 1) * summary.jump[d] + summary.rf[d]
        if summary.start[d] < 0 or last_end > summary.in_size[d]:
            raise OutOfBounds(
                f"geometry maps patches outside the {summary.in_size} input "
                f"(start {summary.start}, rf {summary.rf}); padding breaks exact mapping"
            )
    top = summary.start[0] + loc[0] * summary.jump[0]
    left = summary.start[1] + loc[1] * summary.jump[1]
    return PatchRect(top, left, summary.rf[0], summary.rf[1])


def span_geometry(rf: int, seq_len: int) -> RFSummary:
    """Geometry of a stride-1 text branch with receptive field ``rf``."""
    return RFSummary((1, rf), (1, 1), (0, 0), 1, (1, seq_len), patch_grid((1, seq_len), (1, rf), (1, 1)))
