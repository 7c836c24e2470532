"""Point-cloud distribution diagnostics: local density, KL divergence and
box-counting fractal dimension per octree scale."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import BinMismatch, EmptyCounts
from .geometry import Hierarchy, as_coords, lookup
from .model import kernel_offsets

__all__ = [
    "DensityHistogram",
    "FractalProfile",
    "neighbor_counts",
    "density_histogram",
    "kl_divergence",
    "kl_report",
    "fractal_profile",
    "density_by_scale",
    "write_histograms_csv",
    "write_fractal_csv",
    "write_kl_csv",
    "write_json",
]

KL_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class DensityHistogram:
    scale: int
    k: int
    edges: np.ndarray
    density: np.ndarray

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    def integral(self) -> float:
        return float(np.sum(self.density * self.widths))

    def to_dict(self) -> dict:
        return {"scale": self.scale, "k": self.k, "edges": self.edges.tolist(), "density": self.density.tolist()}


@dataclass(frozen=True, eq=False)
class FractalProfile:
    """``values[i]`` is ``log2(N_fine / N_coarse)`` for the i-th scale pair,
    finest pair first; ``counts`` are the voxel counts finest first.

    Rows are labelled with the hierarchy index of the finer scale of the pair
    (0 = coarsest level), the same convention the density report uses.
    """

    values: np.ndarray
    counts: np.ndarray

    def rows(self):
        top = len(self.counts) - 1
        for i, v in enumerate(self.values):
            yield top - i, float(v)


def neighbor_counts(level, k: int) -> np.ndarray:
    """Occupied voxels within the ``k**3`` box around each voxel, self included."""
    if k < 1 or k % 2 == 0:
        raise ValueError("k must be odd")
    coords = as_coords(level)
    counts = np.zeros(len(coords), dtype=np.int64)
    for off in kernel_offsets(k):
        counts += lookup(coords, coords + off) >= 0
    return counts


def density_histogram(counts, bins: int = 50, k: int = 5, scale: int = -1) -> DensityHistogram:
    """Normalized histogram of neighbor counts over ``[0, k**3]``, equal width bins.

    The last bin is closed so that a fully occupied neighborhood is counted.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    counts = np.asarray(counts, dtype=np.float64).reshape(-1)
    if counts.size == 0:
        raise EmptyCounts("no neighbor counts to histogram")
    edges = np.linspace(0.0, float(k**3), bins + 1)
    freq, _ = np.histogram(counts, bins=edges)
    density = freq / (counts.size * np.diff(edges))
    return DensityHistogram(scale, k, edges, density)


def kl_divergence(p: DensityHistogram, q: DensityHistogram) -> float:
    """Discrete KL(p || q) in bits; empty ``q`` bins under mass of ``p`` are floored."""
    if p.edges.shape != q.edges.shape or not np.array_equal(p.edges, q.edges):
        raise BinMismatch("histograms use different bin edges")
    mask = p.density > 0
    pd = p.density[mask]
    qd = np.maximum(q.density[mask], KL_FLOOR)
    return float(np.sum(pd * np.log2(pd / qd) * p.widths[mask]))


def kl_report(p: DensityHistogram, q: DensityHistogram) -> tuple[float, float, float]:
    """``(KL(p||q), KL(q||p), symmetric average)``."""
    a = kl_divergence(p, q)
    b = kl_divergence(q, p)
    return a, b, 0.5 * (a + b)


def fractal_profile(hierarchy: Hierarchy) -> FractalProfile:
    if len(hierarchy.levels) < 2:
        raise ValueError("fractal profile needs at least two scales")
    counts = np.array([len(lv) for lv in reversed(hierarchy.levels)], dtype=np.int64)
    values = np.log2(counts[:-1] / counts[1:])
    return FractalProfile(values, counts)


def density_by_scale(hierarchy: Hierarchy, k: int = 5, bins: int = 50) -> list[DensityHistogram]:
    """One histogram per scale index of ``hierarchy.levels`` (0 = coarsest)."""
    return [
        density_histogram(neighbor_counts(lv, k), bins=bins, k=k, scale=s)
        for s, lv in enumerate(hierarchy.levels)
    ]


def write_histograms_csv(hists, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scale", "bin_lo", "bin_hi", "density"])
        for h in hists:
            for lo, hi, d in zip(h.edges[:-1], h.edges[1:], h.density):
                w.writerow([h.scale, f"{lo:g}", f"{hi:g}", repr(float(d))])


def write_fractal_csv(profile: FractalProfile, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scale", "value"])
        for i, v in profile.rows():
            w.writerow([i, repr(v)])


def write_kl_csv(rows, path) -> None:
    """``rows`` of ``(scale, kl_pq, kl_qp, symmetric)``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scale", "kl_pq", "kl_qp", "symmetric"])
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])


def write_json(obj, path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2)
