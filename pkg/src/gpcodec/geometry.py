"""Voxel coordinate algebra: quantization, octree levels and occupancy codes.

Coordinate sets are ``(n, 3)`` int64 arrays, unique and sorted
lexicographically by (x, y, z).  Child octant ``(dx, dy, dz)`` of a parent
maps to bit ``4*dx + 2*dy + dz`` of the parent's 8-bit occupancy code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCloud, EmptyCode, HierarchyMismatch, InvalidPoint

__all__ = [
    "QuantizedCloud",
    "Hierarchy",
    "OccupancyBits",
    "OCTANT_OFFSETS",
    "as_coords",
    "sort_unique",
    "pack_keys",
    "lookup",
    "octant_index",
    "quantize",
    "dequantize",
    "downsample",
    "build_hierarchy",
    "occupancy_codes",
    "parent_indices",
    "expand",
    "num_scales",
]

# row b holds the (dx, dy, dz) octant encoded by bit b
OCTANT_OFFSETS = np.array([[(b >> 2) & 1, (b >> 1) & 1, b & 1] for b in range(8)], dtype=np.int64)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def as_coords(coords) -> np.ndarray:
    a = np.asarray(coords, dtype=np.int64)
    if a.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    return a.reshape(-1, 3)


def pack_keys(coords: np.ndarray, extent: np.ndarray | None = None) -> np.ndarray:
    """Map non-negative coords to int64 keys whose order is lexicographic.

    ``extent`` is the per-axis exclusive upper bound; it defaults to
    ``coords.max(0) + 1``.  Callers that need to compare keys of two sets
    must pass the same extent.
    """
    if extent is None:
        extent = coords.max(axis=0) + 1 if len(coords) else np.ones(3, dtype=np.int64)
    ey, ez = int(extent[1]), int(extent[2])
    if int(extent[0]) * ey * ez >= 2**62:
        raise OverflowError("coordinate extent too large for 64-bit keys")
    return (coords[:, 0] * ey + coords[:, 1]) * ez + coords[:, 2]


def sort_unique(coords) -> np.ndarray:
    """Deduplicate and lexicographically sort a non-negative coordinate array."""
    c = as_coords(coords)
    if len(c) == 0:
        return c
    extent = c.max(axis=0) + 1
    if int(extent[0]) * int(extent[1]) * int(extent[2]) < 2**62:
        keys = pack_keys(c, extent)
        _, first = np.unique(keys, return_index=True)
        return c[first]
    return np.unique(c, axis=0)


def lookup(table: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Row index of each query in the sorted coordinate ``table``, -1 if absent."""
    out = np.full(len(queries), -1, dtype=np.int64)
    if len(table) == 0 or len(queries) == 0:
        return out
    extent = table.max(axis=0) + 1
    inside = np.all((queries >= 0) & (queries < extent), axis=1)
    tkeys = pack_keys(table, extent)
    qkeys = pack_keys(queries[inside], extent)
    pos = np.searchsorted(tkeys, qkeys)
    pos_c = np.minimum(pos, len(tkeys) - 1)
    hit = tkeys[pos_c] == qkeys
    sub = np.where(hit, pos_c, -1)
    out[inside] = sub
    return out


def octant_index(coords: np.ndarray) -> np.ndarray:
    """Bit position ``4*dx + 2*dy + dz`` of each voxel inside its parent."""
    c = as_coords(coords) & 1
    return (c[:, 0] << 2) | (c[:, 1] << 1) | c[:, 2]


def num_scales(max_coord: int) -> int:
    """Smallest L >= 1 with ``max_coord < 2**L``."""
    return max(1, int(max_coord).bit_length())


@dataclass(frozen=True, eq=False)
class QuantizedCloud:
    """Deduplicated voxel coordinates plus the mapping back to world units.

    World position of a voxel is ``(coord + origin) * step``.
    """

    coords: np.ndarray
    step: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    def __post_init__(self):
        object.__setattr__(self, "coords", _frozen(as_coords(self.coords).copy()))
        object.__setattr__(self, "origin", _frozen(np.asarray(self.origin, dtype=np.int64).reshape(3).copy()))
        object.__setattr__(self, "step", float(self.step))

    def __len__(self) -> int:
        return len(self.coords)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedCloud):
            return NotImplemented
        return (
            self.step == other.step
            and np.array_equal(self.origin, other.origin)
            and np.array_equal(self.coords, other.coords)
        )

    def __repr__(self) -> str:
        return f"QuantizedCloud(n={len(self)}, step={self.step}, origin={self.origin.tolist()})"

    @property
    def scales(self) -> int:
        if len(self.coords) == 0:
            return 1
        return num_scales(int(self.coords.max()))

    def validate(self) -> None:
        c = self.coords
        if len(c) == 0:
            raise EmptyCloud("cloud has no voxels")
        if c.min() < 0:
            raise InvalidPoint("coordinates must be non-negative after normalization")
        if len(c) > 1:
            keys = pack_keys(c)
            if np.any(np.diff(keys) <= 0):
                raise InvalidPoint("coordinates must be unique and lexicographically sorted")


class OccupancyBits:
    """Stage views of an 8-bit occupancy code for the 1-1-2-4 grouping."""

    __slots__ = ("code",)

    def __init__(self, code: int):
        if not 0 <= code <= 255:
            raise ValueError(f"occupancy code out of range: {code}")
        self.code = int(code)

    @classmethod
    def compose(cls, b1: int, b2: int, b34: int, b58: int) -> "OccupancyBits":
        return cls(b1 * 128 + b2 * 64 + b34 * 16 + b58)

    @property
    def b1(self) -> int:
        return (self.code >> 7) & 1

    @property
    def b2(self) -> int:
        return (self.code >> 6) & 1

    @property
    def b34(self) -> int:
        return (self.code >> 4) & 3

    @property
    def b58(self) -> int:
        return self.code & 15


def quantize(points, step: float) -> QuantizedCloud:
    """Voxelize world points with round-half-away-from-zero, then normalize.

    >>> quantize([(1.2, -0.7, 0.0)], 0.5).origin.tolist()
    [2, -1, 0]
    """
    if not step > 0 or not np.isfinite(step):
        raise ValueError("step must be a positive finite number")
    p = np.asarray(points, dtype=np.float64)
    if p.size == 0:
        raise EmptyCloud("no points to quantize")
    p = p.reshape(-1, 3)
    if not np.all(np.isfinite(p)):
        raise InvalidPoint("non-finite coordinate in input")
    v = p / step
    raw = (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)
    origin = raw.min(axis=0)
    coords = sort_unique(raw - origin)
    return QuantizedCloud(coords, step, origin)


def dequantize(cloud: QuantizedCloud) -> np.ndarray:
    return (cloud.coords + cloud.origin).astype(np.float64) * cloud.step


def downsample(level) -> np.ndarray:
    """Parent set: component-wise floor division by two, deduplicated."""
    c = as_coords(level)
    return sort_unique(c >> 1)


def parent_indices(parents: np.ndarray, children: np.ndarray) -> np.ndarray:
    """Index of each child's parent row; raises if a parent is missing."""
    idx = lookup(as_coords(parents), as_coords(children) >> 1)
    if np.any(idx < 0):
        raise HierarchyMismatch("child voxel without a parent")
    return idx


def occupancy_codes(parents, children) -> np.ndarray:
    parents = as_coords(parents)
    children = as_coords(children)
    idx = parent_indices(parents, children)
    weights = (1 << octant_index(children)).astype(np.float64)
    codes = np.bincount(idx, weights=weights, minlength=len(parents)).astype(np.int64)
    if np.any(codes == 0):
        raise HierarchyMismatch("parent voxel without children")
    return codes.astype(np.uint8)


def expand(parents, codes) -> np.ndarray:
    """Children of ``parents`` under ``codes``, sorted lexicographically."""
    return expand_with_parents(parents, codes)[0]


def expand_with_parents(parents, codes) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`expand` but also returns each child's parent row index."""
    parents = as_coords(parents)
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    if len(codes) != len(parents):
        raise HierarchyMismatch(f"{len(codes)} codes for {len(parents)} parents")
    if np.any(codes == 0):
        raise EmptyCode("occupancy code 0 has no children")
    if np.any((codes < 0) | (codes > 255)):
        raise EmptyCode("occupancy code out of range")
    mask = ((codes[:, None] >> np.arange(8)) & 1).astype(bool)
    pidx, bit = np.nonzero(mask)
    children = 2 * parents[pidx] + OCTANT_OFFSETS[bit]
    if len(children) == 0:
        return children.reshape(0, 3), pidx
    order = np.lexsort((children[:, 2], children[:, 1], children[:, 0]))
    return children[order], pidx[order]


@dataclass(frozen=True, eq=False)
class Hierarchy:
    """Octree levels, coarsest (``levels[0] == [(0,0,0)]``) to finest.

    ``codes[s]`` holds one occupancy code per voxel of ``levels[s]``.
    """

    levels: tuple
    codes: tuple

    @property
    def depth(self) -> int:
        return len(self.codes)

    @property
    def num_points(self) -> int:
        return len(self.levels[-1])

    def parent_index(self, s: int) -> np.ndarray:
        """Row of each ``levels[s]`` voxel's parent in ``levels[s-1]``."""
        if s == 0:
            return np.zeros(len(self.levels[0]), dtype=np.int64)
        return parent_indices(self.levels[s - 1], self.levels[s])


def build_hierarchy(cloud: QuantizedCloud | np.ndarray) -> Hierarchy:
    coords = cloud.coords if isinstance(cloud, QuantizedCloud) else sort_unique(cloud)
    if len(coords) == 0:
        raise EmptyCloud("cannot build a hierarchy of an empty set")
    if coords.min() < 0:
        raise InvalidPoint("hierarchy requires non-negative coordinates")
    depth = num_scales(int(coords.max()))
    levels = [coords]
    for _ in range(depth):
        levels.append(downsample(levels[-1]))
    levels.reverse()
    codes = [_frozen(occupancy_codes(levels[s], levels[s + 1])) for s in range(depth)]
    return Hierarchy(tuple(_frozen(np.ascontiguousarray(lv)) for lv in levels), tuple(codes))
