"""PLY ingestion/export and synthetic clustered point clouds."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MissingPositions, ParseError

__all__ = ["RawCloud", "SyntheticSpec", "read_ply", "write_ply", "generate"]

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass(eq=False)
class RawCloud:
    positions: np.ndarray
    label: str = ""

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        self.positions = p.reshape(-1, 3) if p.size else np.zeros((0, 3))
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")

    def __len__(self) -> int:
        return len(self.positions)


class _Element:
    def __init__(self, name: str, count: int):
        self.name = name
        self.count = count
        self.props: list[tuple] = []  # (name, dtype) or (name, count dtype, item dtype)

    @property
    def has_lists(self) -> bool:
        return any(len(p) == 3 for p in self.props)


def _parse_header(f, path) -> tuple[str, list[_Element]]:
    first = f.readline()
    if first.strip() != b"ply":
        raise ParseError(f"{path}: not a PLY file")
    fmt = None
    elements: list[_Element] = []
    while True:
        line = f.readline()
        if not line:
            raise ParseError(f"{path}: header has no end_header")
        words = line.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        key = words[0]
        try:
            if key == "format":
                fmt = words[1]
            elif key == "element":
                elements.append(_Element(words[1], int(words[2])))
            elif key == "property":
                if not elements:
                    raise ParseError(f"{path}: property before any element")
                if words[1] == "list":
                    elements[-1].props.append((words[4], _PLY_TYPES[words[2]], _PLY_TYPES[words[3]]))
                else:
                    elements[-1].props.append((words[2], _PLY_TYPES[words[1]]))
            elif key == "end_header":
                break
            else:
                raise ParseError(f"{path}: unexpected header line {line!r}")
        except (IndexError, KeyError, ValueError):
            raise ParseError(f"{path}: malformed header line {line!r}") from None
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements


def _skip_binary_lists(data: bytes, pos: int, el: _Element, path) -> int:
    for _ in range(el.count):
        for prop in el.props:
            if len(prop) == 2:
                pos += np.dtype(prop[1]).itemsize
            else:
                cnt_t, item_t = np.dtype("<" + prop[1]), np.dtype("<" + prop[2])
                if pos + cnt_t.itemsize > len(data):
                    raise ParseError(f"{path}: truncated list property")
                n = int(np.frombuffer(data, cnt_t, 1, pos)[0])
                pos += cnt_t.itemsize + n * item_t.itemsize
    return pos


def read_ply(path) -> RawCloud:
    """Positions of the ``vertex`` element; every other property is ignored."""
    path = Path(path)
    with open(path, "rb") as f:
        fmt, elements = _parse_header(f, path)
        body = f.read()
    vertex = next((e for e in elements if e.name == "vertex"), None)
    if vertex is None:
        raise MissingPositions(f"{path}: no vertex element")
    names = [p[0] for p in vertex.props]
    if not all(a in names for a in "xyz"):
        raise MissingPositions(f"{path}: vertex element lacks x/y/z")
    if fmt == "ascii":
        lines = body.decode("ascii", errors="replace").splitlines()
        lines = [ln for ln in lines if ln.strip()]
        start = 0
        for el in elements:
            if el is vertex:
                break
            start += el.count
        rows = lines[start : start + vertex.count]
        if len(rows) < vertex.count:
            raise ParseError(f"{path}: header declares {vertex.count} vertices, found {len(rows)}")
        if vertex.has_lists:
            raise ParseError(f"{path}: list properties on vertex are not supported")
        try:
            table = np.array([r.split()[: len(names)] for r in rows], dtype=np.float64).reshape(-1, len(names))
        except ValueError:
            raise ParseError(f"{path}: malformed vertex row") from None
        # values take the precision of their declared type, as in binary files
        pos = np.stack([table[:, names.index(a)].astype(vertex.props[names.index(a)][1]) for a in "xyz"], axis=1)
        pos = pos.astype(np.float64)
    else:
        offset = 0
        for el in elements:
            if el is vertex:
                break
            if el.has_lists:
                offset = _skip_binary_lists(body, offset, el, path)
            else:
                offset += el.count * np.dtype([(p[0], "<" + p[1]) for p in el.props]).itemsize
        if vertex.has_lists:
            raise ParseError(f"{path}: list properties on vertex are not supported")
        dt = np.dtype([(p[0], "<" + p[1]) for p in vertex.props])
        need = offset + vertex.count * dt.itemsize
        if len(body) < need:
            have = max(0, (len(body) - offset) // dt.itemsize)
            raise ParseError(f"{path}: header declares {vertex.count} vertices, found {have}")
        rec = np.frombuffer(body, dtype=dt, count=vertex.count, offset=offset)
        pos = np.stack([rec[a].astype(np.float64) for a in "xyz"], axis=1)
    if not np.all(np.isfinite(pos)):
        raise ParseError(f"{path}: non-finite vertex position")
    return RawCloud(pos, label=path.stem)


def write_ply(cloud: RawCloud, path, mode: str = "binary") -> None:
    """Write x, y, z as float32 in ``ascii`` or ``binary`` little-endian."""
    if mode not in ("ascii", "binary"):
        raise ValueError("mode must be 'ascii' or 'binary'")
    pos = np.asarray(cloud.positions, dtype="<f4").reshape(-1, 3)
    fmt = "ascii" if mode == "ascii" else "binary_little_endian"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(pos)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(header.encode("ascii"))
        if mode == "ascii":
            for x, y, z in pos.tolist():
                f.write(f"{x:.9g} {y:.9g} {z:.9g}\n".encode("ascii"))
        else:
            f.write(pos.tobytes())
    os.replace(tmp, path)


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian clusters in a cube of side ``extent`` plus uniform background.

    Background points make up ``background_fraction`` of the total.  When
    ``total_points`` is set it fixes the total and the cluster share is split
    evenly at random across clusters; otherwise every cluster draws its size
    from ``points_per_cluster``.
    """

    clusters: int = 20
    points_per_cluster: tuple = (200, 800)
    sigma: float = 2.0
    extent: float = 512.0
    background_fraction: float = 0.05
    total_points: int | None = None
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.points_per_cluster
        if self.clusters < 0 or lo < 0 or hi < lo:
            raise ValueError("cluster counts must be non-negative")
        if not self.sigma > 0 or not self.extent > 0:
            raise ValueError("sigma and extent must be positive")
        if not 0.0 <= self.background_fraction <= 1.0:
            raise ValueError("background_fraction must lie in [0, 1]")
        if self.total_points is not None and self.total_points < 0:
            raise ValueError("total_points must be non-negative")
        if self.background_fraction == 1.0 and self.total_points is None and self.clusters > 0:
            raise ValueError("a pure-background cloud needs total_points")


def generate(spec: SyntheticSpec) -> RawCloud:
    rng = np.random.default_rng(spec.seed)
    centers = rng.uniform(0.0, spec.extent, size=(spec.clusters, 3))
    if spec.total_points is not None:
        n_bg = int(round(spec.background_fraction * spec.total_points))
        n_cl = spec.total_points - n_bg
        sizes = rng.multinomial(n_cl, [1.0 / spec.clusters] * spec.clusters) if spec.clusters else np.zeros(0, int)
        if not spec.clusters:
            n_bg = spec.total_points
    else:
        lo, hi = spec.points_per_cluster
        sizes = rng.integers(lo, hi + 1, size=spec.clusters)
        n_cl = int(sizes.sum())
        f = spec.background_fraction
        n_bg = int(round(n_cl * f / (1.0 - f))) if f < 1.0 else 0
    parts = [rng.normal(c, spec.sigma, size=(int(k), 3)) for c, k in zip(centers, sizes)]
    parts.append(rng.uniform(0.0, spec.extent, size=(n_bg, 3)))
    pts = np.concatenate(parts, axis=0) if parts else np.zeros((0, 3))
    return RawCloud(pts, label=f"synthetic-{spec.seed}")

