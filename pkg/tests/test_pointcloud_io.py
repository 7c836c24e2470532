import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gpcodec.analysis import density_histogram, fractal_profile, neighbor_counts
from gpcodec.errors import MissingPositions, ParseError
from gpcodec.geometry import build_hierarchy, quantize
from gpcodec.pointcloud_io import RawCloud, SyntheticSpec, generate, read_ply, write_ply


def write_raw(path, header_lines, body: bytes = b""):
    path.write_bytes(("\n".join(header_lines) + "\n").encode() + body)
    return path


class TestReadPly:
    def test_ascii(self, tmp_path):
        p = write_raw(tmp_path / "a.ply", [
            "ply", "format ascii 1.0", "element vertex 2",
            "property float x", "property float y", "property float z", "end_header",
            "0 0 0", "1 2 3",
        ])
        assert read_ply(p).positions.tolist() == [[0, 0, 0], [1, 2, 3]]

    def test_binary_with_ignored_attribute(self, tmp_path):
        body = struct.pack("<4f", 0, 0, 0, 0.9) + struct.pack("<4f", 1, 2, 3, 0.1)
        p = write_raw(tmp_path / "b.ply", [
            "ply", "format binary_little_endian 1.0", "comment gaussian scene",
            "element vertex 2", "property float x", "property float y", "property float z",
            "property float opacity", "end_header",
        ], body)
        cloud = read_ply(p)
        assert cloud.positions.tolist() == [[0, 0, 0], [1, 2, 3]]
        assert cloud.label == "b"

    def test_binary_mixed_types_and_preceding_elements(self, tmp_path):
        cam = struct.pack("<d", 7.0)
        face = struct.pack("<B3i", 3, 0, 1, 2)
        dt = np.dtype([("red", "u1"), ("z", "<f8"), ("x", "<f8"), ("f_dc_0", "<f4"), ("y", "<f8")])
        rec = np.zeros(3, dtype=dt)
        rec["x"], rec["y"], rec["z"] = [1.5, 2, 3], [4, 5, 6], [7, 8, 9.25]
        p = write_raw(tmp_path / "c.ply", [
            "ply", "format binary_little_endian 1.0",
            "element camera 1", "property double fov",
            "element face 1", "property list uchar int vertex_indices",
            "element vertex 3", "property uchar red", "property double z", "property double x",
            "property float f_dc_0", "property double y", "end_header",
        ], cam + face + rec.tobytes())
        assert read_ply(p).positions.tolist() == [[1.5, 4, 7], [2, 5, 8], [3, 6, 9.25]]

    def test_short_body(self, tmp_path):
        body = struct.pack("<9f", *range(9))
        p = write_raw(tmp_path / "s.ply", [
            "ply", "format binary_little_endian 1.0", "element vertex 5",
            "property float x", "property float y", "property float z", "end_header",
        ], body)
        with pytest.raises(ParseError):
            read_ply(p)

    def test_short_ascii_body(self, tmp_path):
        p = write_raw(tmp_path / "s.ply", [
            "ply", "format ascii 1.0", "element vertex 5",
            "property float x", "property float y", "property float z", "end_header",
            "0 0 0", "1 1 1", "2 2 2",
        ])
        with pytest.raises(ParseError):
            read_ply(p)

    def test_missing_positions(self, tmp_path):
        p = write_raw(tmp_path / "m.ply", [
            "ply", "format ascii 1.0", "element vertex 1",
            "property float x", "property float y", "end_header", "0 0",
        ])
        with pytest.raises(MissingPositions):
            read_ply(p)

    @pytest.mark.parametrize("lines", [
        ["not a ply"],
        ["ply", "format binary_big_endian 1.0", "element vertex 0", "end_header"],
        ["ply", "format ascii 1.0", "element vertex 1", "property float x"],
        ["ply", "format ascii 1.0", "element vertex 1", "property quaternion x", "end_header"],
    ], ids=["magic", "big_endian", "no_end", "bad_type"])
    def test_malformed_header(self, tmp_path, lines):
        with pytest.raises(ParseError):
            read_ply(write_raw(tmp_path / "x.ply", lines))


class TestWritePly:
    @pytest.mark.parametrize("mode", ["ascii", "binary"])
    def test_single_point(self, tmp_path, mode):
        c = RawCloud([[1.25, -2.0, 3.5]])
        write_ply(c, tmp_path / "p.ply", mode=mode)
        assert read_ply(tmp_path / "p.ply").positions.tolist() == [[1.25, -2.0, 3.5]]

    def test_thousand_binary(self, tmp_path, rng):
        pts = rng.normal(0, 100, (1000, 3))
        write_ply(RawCloud(pts), tmp_path / "p.ply")
        back = read_ply(tmp_path / "p.ply").positions
        assert np.array_equal(back, pts.astype(np.float32).astype(np.float64))

    @pytest.mark.parametrize("mode", ["ascii", "binary"])
    def test_empty(self, tmp_path, mode):
        write_ply(RawCloud(np.zeros((0, 3))), tmp_path / "e.ply", mode=mode)
        assert b"element vertex 0" in (tmp_path / "e.ply").read_bytes()
        assert len(read_ply(tmp_path / "e.ply")) == 0

    @given(arrays(np.float32, st.tuples(st.integers(0, 50), st.just(3)),
                  elements=st.floats(-1e6, 1e6, width=32)), st.sampled_from(["ascii", "binary"]))
    def test_round_trip_property(self, tmp_path_factory, pts, mode):
        path = tmp_path_factory.mktemp("rt") / "p.ply"
        write_ply(RawCloud(pts), path, mode=mode)
        assert np.array_equal(read_ply(path).positions, pts.astype(np.float64))

    def test_bad_mode(self, tmp_path):
        with pytest.raises(ValueError):
            write_ply(RawCloud([[0, 0, 0]]), tmp_path / "p.ply", mode="xml")


class TestGenerate:
    def test_pure_background(self):
        c = generate(SyntheticSpec(clusters=0, background_fraction=1.0, total_points=100, extent=10.0))
        assert len(c) == 100
        assert c.positions.min() >= 0 and c.positions.max() <= 10.0

    def test_deterministic(self):
        spec = SyntheticSpec(seed=8)
        assert np.array_equal(generate(spec).positions, generate(spec).positions)
        assert not np.array_equal(generate(spec).positions, generate(SyntheticSpec(seed=9)).positions)

    def test_total_points(self):
        c = generate(SyntheticSpec(clusters=5, total_points=1234, background_fraction=0.1))
        assert len(c) == 1234

    def test_cluster_sizes_in_range(self):
        spec = SyntheticSpec(clusters=6, points_per_cluster=(10, 20), background_fraction=0.0)
        assert 60 <= len(generate(spec)) <= 120

    @pytest.mark.parametrize("kw", [dict(sigma=0.0), dict(background_fraction=1.5), dict(clusters=-1)])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            SyntheticSpec(**kw)

    def test_clustered_is_globally_sparse_and_locally_dense(self):
        extent = 512.0
        clustered = generate(SyntheticSpec(clusters=20, points_per_cluster=(500, 500), sigma=extent / 200,
                                           extent=extent, background_fraction=0.0, seed=1))
        uniform = generate(SyntheticSpec(clusters=0, background_fraction=1.0, total_points=len(clustered),
                                         extent=extent, seed=1))
        hc = build_hierarchy(quantize(clustered.positions, 1.0))
        hu = build_hierarchy(quantize(uniform.positions, 1.0))
        fc, fu = fractal_profile(hc), fractal_profile(hu)
        # coarse scale pairs: the coarsest half of the profile
        coarse = slice(len(fc.values) // 2, None)
        assert np.all(fc.values[coarse][:-1] < 2.0)
        assert fc.values[coarse].mean() < fu.values[coarse].mean()
        dc = density_histogram(neighbor_counts(hc.levels[-1], 5), bins=50, k=5)
        du = density_histogram(neighbor_counts(hu.levels[-1], 5), bins=50, k=5)
        assert dc.density.max() < du.density.max()
