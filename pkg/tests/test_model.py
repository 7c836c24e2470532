import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpcodec.errors import ConfigMismatch, DataError, InvalidContext
from gpcodec.geometry import build_hierarchy
from gpcodec.model import (
    FeatureMap,
    FopModel,
    Grouping,
    ModelConfig,
    kernel_offsets,
    make_context,
    neighbor_index,
    parameter_shapes,
    prior_features,
    prior_features_map,
    softmax,
    sparse_conv,
    stage_forward,
    stage_forward_map,
    stage_segments,
)
from gpcodec.training import code_bit_cost

from conftest import random_subset

ALL_GROUPINGS = list(Grouping)


def code_probabilities(model, ctx, feats):
    """Probability of every one of the 256 codes for every voxel (n, 256)."""
    cfg = model.config
    codes = np.arange(256)
    out = np.ones((ctx.n, 256))
    for j in range(cfg.num_stages):
        shift = cfg.shift(j)
        width = cfg.widths[j]
        seg = (codes >> shift) & ((1 << width) - 1)
        pre = codes >> (8 - cfg.prefix_bits(j))
        for prefix in np.unique(pre):
            probs = stage_forward(feats, np.full(ctx.n, prefix), j, model, ctx)
            sel = pre == prefix
            out[:, sel] *= probs[:, seg[sel]]
    return out


def random_context(rng, cfg, scale_side=6):
    h = build_hierarchy(random_subset(rng, scale_side, 0.3))
    s = h.depth - 1
    parent_code = h.codes[s - 1].astype(np.int64)[h.parent_index(s)] if s > 0 else None
    return h, make_context(h.levels[s], parent_code, cfg)


class TestConfig:
    def test_presets(self):
        d, p = ModelConfig.desk(), ModelConfig.full()
        assert (d.channels, d.kernel_size) == (8, 3)
        assert (p.channels, p.kernel_size) == (32, 5)
        assert d.grouping is Grouping.FOUR_STAGE_NON_UNIFORM

    @pytest.mark.parametrize("text,expected", [
        ("1124", Grouping.FOUR_STAGE_NON_UNIFORM),
        ("2222", Grouping.FOUR_STAGE_UNIFORM),
        ("44", Grouping.TWO_STAGE),
    ])
    def test_grouping_parse(self, text, expected):
        assert Grouping.parse(text) is expected

    def test_prefix_bits(self):
        cfg = ModelConfig.desk()
        assert [cfg.prefix_bits(j) for j in range(4)] == [0, 1, 2, 4]
        assert [cfg.shift(j) for j in range(4)] == [7, 6, 4, 0]

    @pytest.mark.parametrize("kw", [dict(channels=0), dict(kernel_size=4), dict(conv_blocks_per_stage=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_dict_round_trip(self):
        cfg = ModelConfig.full(grouping=Grouping.TWO_STAGE, neighbor_prior=False)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_np_off_uses_pointwise_kernel(self):
        cfg = ModelConfig.desk(neighbor_prior=False)
        assert cfg.conv_kernel == 1 and cfg.kernel_volume == 1


class TestParameters:
    def test_shapes(self):
        cfg = ModelConfig.desk()
        shapes = parameter_shapes(cfg)
        assert shapes["prior.code"] == (256, 8)
        assert shapes["prior.octant"] == (8, 8)
        assert shapes["prior.root"] == (8,)
        assert "stage0.embed" not in shapes
        assert [shapes[f"stage{j}.embed"][0] for j in (1, 2, 3)] == [2, 4, 16]
        assert shapes["stage0.block0.conv1.weight"] == (27, 8, 8)
        assert [shapes[f"stage{j}.head.weight"][1] for j in range(4)] == [2, 2, 4, 16]

    def test_initialization_bounds(self):
        cfg = ModelConfig.desk()
        m = FopModel.initialize(cfg, seed=3)
        assert np.abs(m.params["prior.code"]).max() <= 1 / np.sqrt(8)
        assert np.abs(m.params["stage1.block0.conv1.weight"]).max() <= 1 / np.sqrt(8 * 27)
        assert not np.any(m.params["stage2.head.bias"])
        assert m.dtype == np.float32 and m.is_finite()

    def test_seeded(self):
        cfg = ModelConfig.desk()
        assert FopModel.initialize(cfg, seed=1).digest() == FopModel.initialize(cfg, seed=1).digest()
        assert FopModel.initialize(cfg, seed=1).digest() != FopModel.initialize(cfg, seed=2).digest()

    def test_shape_mismatch(self):
        m = FopModel.zeros(ModelConfig.desk())
        m.params["prior.root"] = np.zeros(9, dtype=np.float32)
        with pytest.raises(ConfigMismatch):
            FopModel(m.config, m.params)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = FopModel.initialize(ModelConfig.desk(grouping=Grouping.TWO_STAGE), seed=5)
        m.save(tmp_path / "m.gpcm")
        back = FopModel.load(tmp_path / "m.gpcm")
        assert back.config == m.config
        assert back.digest() == m.digest()
        for k in m.params:
            assert np.array_equal(back.params[k], m.params[k])

    def test_layout(self, tmp_path):
        m = FopModel.zeros(ModelConfig.desk())
        m.save(tmp_path / "m.gpcm")
        data = (tmp_path / "m.gpcm").read_bytes()
        assert data[:4] == b"GPCM"
        assert int.from_bytes(data[4:6], "little") == 1
        n = int.from_bytes(data[6:10], "little")
        assert len(data) == 10 + n + 4 * m.num_parameters

    def test_digest_tracks_parameters(self):
        m = FopModel.zeros(ModelConfig.desk())
        d0 = m.digest()
        m.params["stage3.head.bias"][5] = 1e-3
        assert m.digest() != d0

    def test_corrupt_checkpoint(self, tmp_path):
        FopModel.zeros(ModelConfig.desk()).save(tmp_path / "m.gpcm")
        data = (tmp_path / "m.gpcm").read_bytes()
        (tmp_path / "short.gpcm").write_bytes(data[:-3])
        (tmp_path / "bad.gpcm").write_bytes(b"XXXX" + data[4:])
        for name in ("short.gpcm", "bad.gpcm"):
            with pytest.raises(DataError):
                FopModel.load(tmp_path / name)


class TestNeighbors:
    def test_offsets_lexicographic_and_mirrored(self):
        offs = kernel_offsets(3)
        assert offs[0].tolist() == [-1, -1, -1] and offs[13].tolist() == [0, 0, 0]
        assert np.array_equal(offs[::-1], -offs)

    def test_against_brute_force(self, rng):
        coords = random_subset(rng, 7, 0.2)
        nbr = neighbor_index(coords, 3)
        index = {tuple(c): i for i, c in enumerate(coords.tolist())}
        for i, c in enumerate(coords.tolist()):
            for o, off in enumerate(kernel_offsets(3).tolist()):
                q = (c[0] + off[0], c[1] + off[1], c[2] + off[2])
                assert nbr[i, o] == index.get(q, len(coords))


class TestPriorFeatures:
    def test_root_row(self):
        m = FopModel.initialize(ModelConfig.desk(), seed=0)
        f = prior_features_map([[0, 0, 0]], None, None, m)
        assert np.array_equal(f.features[0], m.params["prior.root"])

    def test_zero_model(self, rng):
        m = FopModel.zeros(ModelConfig.desk())
        h = build_hierarchy(random_subset(rng, 8, 0.1))
        f = prior_features_map(h.levels[2], h.codes[1], h.parent_index(2), m)
        assert not np.any(f.features)

    def test_octant_arithmetic(self):
        m = FopModel.initialize(ModelConfig.desk(), seed=0)
        f = prior_features_map([[2, 4, 6], [3, 5, 7]], [129], [0, 0], m)
        p = m.params
        assert np.allclose(f.features[0], p["prior.code"][129] + p["prior.octant"][0])
        assert np.allclose(f.features[1], p["prior.code"][129] + p["prior.octant"][7])

    def test_parent_index_shape(self):
        m = FopModel.zeros(ModelConfig.desk())
        with pytest.raises(ConfigMismatch):
            prior_features_map([[0, 0, 0], [1, 1, 1]], [129], [0], m)


class TestSparseConv:
    def test_identity_center(self, rng):
        x = rng.normal(size=(1, 4))
        w = np.zeros((27, 4, 4))
        w[13] = np.eye(4)
        out = sparse_conv(FeatureMap([[5, 5, 5]], x), w, np.zeros(4))
        assert np.allclose(out.features, x)

    def test_bias_only(self, rng):
        x = rng.normal(size=(3, 4))
        b = rng.normal(size=4)
        out = sparse_conv(FeatureMap([[0, 0, 0], [1, 0, 0], [4, 4, 4]], x), np.zeros((27, 4, 4)), b)
        assert np.allclose(out.features, np.tile(b, (3, 1)))

    def test_single_offset(self, rng):
        x = rng.normal(size=(2, 4))
        w = np.zeros((27, 4, 4))
        o = [tuple(v) for v in kernel_offsets(3).tolist()].index((1, 0, 0))
        w[o] = np.eye(4)
        out = sparse_conv(FeatureMap([[0, 0, 0], [1, 0, 0]], x), w, np.zeros(4))
        assert np.allclose(out.features[0], x[1])
        assert np.allclose(out.features[1], 0.0)

    def test_against_dense_loop(self, rng):
        coords = random_subset(rng, 6, 0.25)
        x = rng.normal(size=(len(coords), 3))
        w = rng.normal(size=(27, 3, 5))
        b = rng.normal(size=5)
        out = sparse_conv(FeatureMap(coords, x), w, b).features
        index = {tuple(c): i for i, c in enumerate(coords.tolist())}
        for i, c in enumerate(coords.tolist()):
            ref = b.copy()
            for o, off in enumerate(kernel_offsets(3).tolist()):
                u = index.get((c[0] + off[0], c[1] + off[1], c[2] + off[2]))
                if u is not None:
                    ref += x[u] @ w[o]
            assert np.allclose(out[i], ref)


class TestStageForward:
    def test_zero_model_uniform(self):
        m = FopModel.zeros(ModelConfig.desk())
        base = FeatureMap([[0, 0, 0], [1, 0, 0]], np.zeros((2, 8), dtype=np.float32))
        assert np.allclose(stage_forward_map(base, None, 0, m).probs, 0.5)
        assert np.allclose(stage_forward_map(base, [1, 3], 2, m).probs, 0.25)
        assert np.allclose(stage_forward_map(base, [0, 15], 3, m).probs, 1 / 16)

    def test_uniform_factorization(self):
        m = FopModel.zeros(ModelConfig.desk())
        ctx = make_context([[0, 0, 0]], None, m.config)
        probs = code_probabilities(m, ctx, prior_features(ctx, m))
        assert np.allclose(probs, 1 / 256)

    def test_bias_only_head_input_np_on_and_off(self, rng):
        b = rng.normal(size=8).astype(np.float32)
        inputs = []
        for np_flag in (True, False):
            m = FopModel.zeros(ModelConfig.desk(neighbor_prior=np_flag))
            m.params["stage0.block0.conv2.bias"][:] = b
            ctx = make_context([[0, 0, 0]], None, m.config)
            tape = {}
            stage_forward(prior_features(ctx, m), None, 0, m, ctx, tape=tape)
            inputs.append(tape["head_in"][0])
        assert np.array_equal(inputs[0], b) and np.array_equal(inputs[1], b)

    def test_prefix_out_of_range(self):
        m = FopModel.zeros(ModelConfig.desk())
        base = FeatureMap([[0, 0, 0]], np.zeros((1, 8), dtype=np.float32))
        with pytest.raises(InvalidContext):
            stage_forward_map(base, [2], 1, m)
        with pytest.raises(InvalidContext):
            stage_forward_map(base, [0], 4, m)

    def test_feature_shape_mismatch(self):
        m = FopModel.zeros(ModelConfig.desk())
        ctx = make_context([[0, 0, 0]], None, m.config)
        with pytest.raises(ConfigMismatch):
            stage_forward(np.zeros((1, 4), dtype=np.float32), None, 0, m, ctx)

    @pytest.mark.parametrize("grouping", ALL_GROUPINGS)
    @pytest.mark.parametrize("np_flag", [True, False])
    def test_factorization_sums_to_one(self, rng, grouping, np_flag):
        cfg = ModelConfig.desk(grouping=grouping, neighbor_prior=np_flag)
        m = FopModel.initialize(cfg, seed=int(rng.integers(1 << 30)))
        for p in m.params.values():
            p *= 4.0
        _, ctx = random_context(rng, cfg)
        probs = code_probabilities(m, ctx, prior_features(ctx, m))
        assert np.all(probs >= 0)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_rows_are_distributions(self, rng):
        cfg = ModelConfig.desk()
        m = FopModel.initialize(cfg, seed=11)
        h, ctx = random_context(rng, cfg)
        segs, prefixes = stage_segments(h.codes[-1], cfg)
        feats = prior_features(ctx, m)
        for j in range(cfg.num_stages):
            probs = stage_forward(feats, prefixes[j], j, m, ctx)
            assert probs.shape == (ctx.n, 2 ** cfg.widths[j])
            assert np.all(probs >= 0) and np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_deterministic(self, rng):
        cfg = ModelConfig.desk()
        m = FopModel.initialize(cfg, seed=4)
        h, ctx = random_context(rng, cfg)
        _, prefixes = stage_segments(h.codes[-1], cfg)
        feats = prior_features(ctx, m)
        a = stage_forward(feats, prefixes[3], 3, m, ctx)
        b = stage_forward(feats.copy(), prefixes[3].copy(), 3, m.copy(), ctx)
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("grouping", ALL_GROUPINGS)
    def test_future_bits_do_not_leak(self, rng, grouping):
        cfg = ModelConfig.desk(grouping=grouping)
        m = FopModel.initialize(cfg, seed=9)
        h, ctx = random_context(rng, cfg)
        codes = h.codes[-1].astype(np.int64)
        feats = prior_features(ctx, m)
        for j in range(cfg.num_stages):
            keep = 8 - cfg.prefix_bits(j)
            # rewrite every bit at or after stage j; the prefixes seen by stage j are unchanged
            noise = rng.integers(0, 256, len(codes)) & ((1 << keep) - 1)
            altered = (codes >> keep << keep) | noise
            _, pa = stage_segments(codes, cfg)
            _, pb = stage_segments(altered, cfg)
            assert np.array_equal(pa[j], pb[j])
            assert np.array_equal(stage_forward(feats, pa[j], j, m, ctx), stage_forward(feats, pb[j], j, m, ctx))


class TestSegments:
    @given(st.integers(1, 255), st.sampled_from(ALL_GROUPINGS))
    def test_segments_recompose(self, code, grouping):
        cfg = ModelConfig.desk(grouping=grouping)
        segs, prefixes = stage_segments(np.array([code]), cfg)
        value = 0
        for j, w in enumerate(cfg.widths):
            assert prefixes[j][0] == value
            value = (value << w) | int(segs[j][0])
        assert value == code

    def test_non_uniform_views(self):
        segs, _ = stage_segments(np.array([0b10110110]), ModelConfig.desk())
        assert [int(s[0]) for s in segs] == [1, 0, 3, 6]


class TestBitCost:
    def test_uniform_eight_bits(self):
        cfg = ModelConfig.desk()
        dists = [np.full((3, 2**w), 1 / 2**w) for w in cfg.widths]
        assert code_bit_cost(dists, [1, 77, 255], cfg) == pytest.approx(24.0)

    def test_certain(self):
        cfg = ModelConfig.desk()
        codes = np.array([200])
        segs, _ = stage_segments(codes, cfg)
        dists = []
        for w, s in zip(cfg.widths, segs):
            d = np.zeros((1, 2**w))
            d[0, s[0]] = 1.0
            dists.append(d)
        assert abs(code_bit_cost(dists, codes, cfg)) < 1e-8

    def test_hand_example(self):
        cfg = ModelConfig.desk()
        code = np.array([0])  # every true segment is 0
        dists = [
            np.array([[0.5, 0.5]]),
            np.array([[0.5, 0.5]]),
            np.array([[0.25, 0.25, 0.25, 0.25]]),
            np.array([[0.125] + [0.875 / 15] * 15]),
        ]
        assert code_bit_cost(dists, code, cfg) == pytest.approx(7.0, abs=1e-8)


def test_softmax_stable():
    z = np.array([[1000.0, 1000.0], [-1000.0, 0.0]])
    p = softmax(z)
    assert np.allclose(p, [[0.5, 0.5], [0.0, 1.0]])
