"""Staged occupancy predictor: parameters, checkpoints and the forward pass.

An 8-bit occupancy code is split into segments (most significant first) and
each segment is predicted by its own stage::

    x_j   = F + E_j(prefix)              prefix = bits decoded in stages < j
    x_j   = S_j(x_j)                     stacked Conv-ReLU-Conv blocks
    p_j   = softmax(x_j @ H_j + h_j)

``F`` is the prior feature of each voxel: the parent's code embedding plus
the voxel's octant embedding (a learned root vector at the coarsest scale).
With the neighbor prior disabled, the spatial convolutions shrink to
per-voxel linear layers (kernel size 1).

Stages are numbered from 0 in code.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigMismatch, DataError, InvalidContext
from .geometry import as_coords, lookup, octant_index

__all__ = [
    "Grouping",
    "ModelConfig",
    "FopModel",
    "FeatureMap",
    "StageDistribution",
    "VoxelContext",
    "EPS",
    "kernel_offsets",
    "neighbor_index",
    "make_context",
    "concat_contexts",
    "prior_features",
    "prior_features_map",
    "sparse_conv",
    "conv",
    "stage_forward",
    "stage_forward_map",
    "stage_segments",
    "softmax",
]

EPS = 1e-10
CHECKPOINT_MAGIC = b"GPCM"
CHECKPOINT_VERSION = 1


class Grouping(enum.Enum):
    TWO_STAGE = (4, 4)
    FOUR_STAGE_UNIFORM = (2, 2, 2, 2)
    FOUR_STAGE_NON_UNIFORM = (1, 1, 2, 4)

    @property
    def widths(self) -> tuple[int, ...]:
        return self.value

    @property
    def flag(self) -> int:
        return list(Grouping).index(self)

    @classmethod
    def from_flag(cls, flag: int) -> "Grouping":
        members = list(cls)
        if not 0 <= flag < len(members):
            raise ConfigMismatch(f"unknown grouping flag {flag}")
        return members[flag]

    @classmethod
    def parse(cls, text: str) -> "Grouping":
        key = str(text).replace("-", "").replace(",", "").replace(" ", "").lower()
        aliases = {
            "44": cls.TWO_STAGE, "twostage": cls.TWO_STAGE, "2stage": cls.TWO_STAGE,
            "2222": cls.FOUR_STAGE_UNIFORM, "fourstageuniform": cls.FOUR_STAGE_UNIFORM,
            "4stage": cls.FOUR_STAGE_UNIFORM, "uniform": cls.FOUR_STAGE_UNIFORM,
            "1124": cls.FOUR_STAGE_NON_UNIFORM, "fourstagenonuniform": cls.FOUR_STAGE_NON_UNIFORM,
            "nonuniform": cls.FOUR_STAGE_NON_UNIFORM, "ue": cls.FOUR_STAGE_NON_UNIFORM,
        }
        if key in aliases:
            return aliases[key]
        try:
            return cls[str(text).upper()]
        except KeyError:
            raise ValueError(f"unknown grouping {text!r}") from None


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    kernel_size: int = 3
    grouping: Grouping = Grouping.FOUR_STAGE_NON_UNIFORM
    neighbor_prior: bool = True
    conv_blocks_per_stage: int = 1
    # False: convs see only prior features; bit embeddings are added after S_j
    recompute_neighbors: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.grouping, str):
            object.__setattr__(self, "grouping", Grouping.parse(self.grouping))
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be an odd positive integer")
        if self.conv_blocks_per_stage < 1:
            raise ValueError("conv_blocks_per_stage must be positive")
        if sum(self.grouping.widths) != 8:
            raise ValueError("grouping widths must sum to 8")

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(channels=8, kernel_size=3, **kw)

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        return cls(channels=32, kernel_size=5, **kw)

    @property
    def widths(self) -> tuple[int, ...]:
        return self.grouping.widths

    @property
    def num_stages(self) -> int:
        return len(self.widths)

    def prefix_bits(self, j: int) -> int:
        return sum(self.widths[:j])

    def shift(self, j: int) -> int:
        """Right shift that brings stage ``j``'s segment to the low bits."""
        return 8 - self.prefix_bits(j + 1)

    @property
    def conv_kernel(self) -> int:
        return self.kernel_size if self.neighbor_prior else 1

    @property
    def kernel_volume(self) -> int:
        return self.conv_kernel**3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grouping"] = self.grouping.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "grouping" in d:
            d["grouping"] = Grouping.parse(d["grouping"])
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in declaration (checkpoint) order."""
    c = config.channels
    kv = config.kernel_volume
    shapes: dict[str, tuple[int, ...]] = {
        "prior.code": (256, c),
        "prior.octant": (8, c),
        "prior.root": (c,),
    }
    for j, w in enumerate(config.widths):
        if j > 0:
            shapes[f"stage{j}.embed"] = (2 ** config.prefix_bits(j), c)
        for b in range(config.conv_blocks_per_stage):
            for k in (1, 2):
                shapes[f"stage{j}.block{b}.conv{k}.weight"] = (kv, c, c)
                shapes[f"stage{j}.block{b}.conv{k}.bias"] = (c,)
        shapes[f"stage{j}.head.weight"] = (c, 2**w)
        shapes[f"stage{j}.head.bias"] = (2**w,)
    return shapes


@dataclass(eq=False)
class FopModel:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = parameter_shapes(self.config)
        if list(self.params) != list(shapes):
            raise ConfigMismatch("parameter names do not match the configuration")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ConfigMismatch(f"{name}: shape {self.params[name].shape} != {shape}")

    @classmethod
    def zeros(cls, config: ModelConfig, dtype=np.float32) -> "FopModel":
        return cls(config, {k: np.zeros(s, dtype=dtype) for k, s in parameter_shapes(config).items()})

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int | None = None, dtype=np.float32) -> "FopModel":
        rng = np.random.default_rng(config.seed if seed is None else seed)
        c = config.channels
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape, dtype=dtype)
                continue
            if ".conv" in name:
                bound = 1.0 / np.sqrt(c * config.kernel_volume)
            else:
                bound = 1.0 / np.sqrt(c)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["prior.root"].dtype

    def astype(self, dtype) -> "FopModel":
        return FopModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "FopModel":
        return FopModel(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def parameter_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in self.params.values())

    def digest(self) -> int:
        """64-bit identity of configuration plus single-precision parameters."""
        h = hashlib.blake2b(digest_size=8)
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        h.update(self.parameter_bytes())
        return int.from_bytes(h.digest(), "little")

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    def save(self, path) -> None:
        cfg = json.dumps(self.config.to_dict(), sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(cfg)))
            f.write(cfg)
            f.write(self.parameter_bytes())

    @classmethod
    def load(cls, path) -> "FopModel":
        data = Path(path).read_bytes()
        if data[:4] != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a model checkpoint")
        try:
            version, n = struct.unpack_from("<HI", data, 4)
        except struct.error:
            raise DataError(f"{path}: truncated checkpoint") from None
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        try:
            config = ModelConfig.from_dict(json.loads(data[10 : 10 + n]))
        except (ValueError, TypeError) as e:
            raise DataError(f"{path}: bad model configuration ({e})") from None
        pos = 10 + n
        params = {}
        for name, shape in parameter_shapes(config).items():
            size = int(np.prod(shape))
            chunk = data[pos : pos + 4 * size]
            if len(chunk) != 4 * size:
                raise DataError(f"{path}: truncated checkpoint")
            params[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
            pos += 4 * size
        if pos != len(data):
            raise DataError(f"{path}: trailing bytes in checkpoint")
        return cls(config, params)


def kernel_offsets(k: int) -> np.ndarray:
    """All ``k**3`` offsets in lexicographic (dx, dy, dz) order."""
    r = k // 2
    g = np.arange(-r, r + 1)
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)


def neighbor_index(coords: np.ndarray, k: int) -> np.ndarray:
    """``(n, k**3)`` row index of each neighbor, ``n`` where unoccupied.

    Offset ``K-1-o`` is the negation of offset ``o``, which the backward pass
    relies on to transpose the map.
    """
    coords = as_coords(coords)
    n = len(coords)
    if k == 1:
        return np.arange(n, dtype=np.int64)[:, None]
    offs = kernel_offsets(k)
    q = (coords[:, None, :] + offs[None, :, :]).reshape(-1, 3)
    idx = lookup(coords, q).reshape(n, len(offs))
    idx[idx < 0] = n
    return idx


@dataclass(eq=False)
class VoxelContext:
    """Decoder-available context for a batch of voxels (one or more scales).

    ``parent_code`` is -1 for root voxels.  ``nbr`` indexes rows of the same
    batch, with ``n`` marking an empty neighbor.
    """

    parent_code: np.ndarray
    octant: np.ndarray
    nbr: np.ndarray
    scale_sizes: tuple = ()

    @property
    def n(self) -> int:
        return len(self.octant)


def make_context(coords, parent_code, config: ModelConfig) -> VoxelContext:
    coords = as_coords(coords)
    if parent_code is None:
        parent_code = np.full(len(coords), -1, dtype=np.int64)
    parent_code = np.asarray(parent_code, dtype=np.int64)
    if parent_code.shape != (len(coords),):
        raise ConfigMismatch("one parent code per voxel required")
    return VoxelContext(
        parent_code=parent_code,
        octant=octant_index(coords),
        nbr=neighbor_index(coords, config.conv_kernel),
        scale_sizes=(len(coords),),
    )


def concat_contexts(contexts) -> VoxelContext:
    """Stack scale contexts into one batch; neighbors never cross scales."""
    contexts = list(contexts)
    total = sum(c.n for c in contexts)
    nbrs = []
    base = 0
    for c in contexts:
        shifted = c.nbr + base
        shifted[c.nbr == c.n] = total
        nbrs.append(shifted)
        base += c.n
    return VoxelContext(
        parent_code=np.concatenate([c.parent_code for c in contexts]),
        octant=np.concatenate([c.octant for c in contexts]),
        nbr=np.concatenate(nbrs, axis=0),
        scale_sizes=tuple(s for c in contexts for s in c.scale_sizes),
    )


def prior_features(ctx: VoxelContext, model: FopModel) -> np.ndarray:
    p = model.params
    root = ctx.parent_code < 0
    code = np.where(root, 0, ctx.parent_code)
    feats = p["prior.code"][code] + p["prior.octant"][ctx.octant]
    if np.any(root):
        feats[root] = p["prior.root"]
    return feats


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


_CHUNK_ELEMS = 1 << 22


def conv(x: np.ndarray, nbr: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Sparse convolution over the occupied rows given by ``nbr``."""
    n, kv = nbr.shape
    if kv == 1:
        return x @ weight[0] + bias
    c_in = x.shape[1]
    xp = np.concatenate([x, np.zeros((1, c_in), dtype=x.dtype)], axis=0)
    w = weight.reshape(kv * c_in, -1)
    rows = max(1, _CHUNK_ELEMS // (kv * c_in))
    if n <= rows:
        return xp.take(nbr, axis=0).reshape(n, kv * c_in) @ w + bias
    out = np.empty((n, w.shape[1]), dtype=np.result_type(x, weight))
    for s in range(0, n, rows):
        sl = slice(s, min(n, s + rows))
        out[sl] = xp.take(nbr[sl], axis=0).reshape(-1, kv * c_in) @ w + bias
    return out


def _check_prefix(prefix, j: int, config: ModelConfig, n: int) -> np.ndarray:
    if j == 0:
        return np.zeros(n, dtype=np.int64)
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
    if prefix.shape != (n,):
        raise InvalidContext("one decoded prefix per voxel required")
    if len(prefix) and (prefix.min() < 0 or prefix.max() >= 2 ** config.prefix_bits(j)):
        raise InvalidContext(f"decoded bits out of range for stage {j}")
    return prefix


def stage_forward(
    feats: np.ndarray,
    prefix,
    j: int,
    model: FopModel,
    ctx: VoxelContext,
    tape: dict | None = None,
) -> np.ndarray:
    """Stage ``j`` segment distribution for every voxel of ``ctx``.

    ``prefix`` holds the value of each voxel's bits from stages < j.  When
    ``tape`` is given, the intermediates needed for backprop are stored in it.
    """
    cfg = model.config
    if not 0 <= j < cfg.num_stages:
        raise InvalidContext(f"stage {j} outside 0..{cfg.num_stages - 1}")
    if feats.shape != (ctx.n, cfg.channels):
        raise ConfigMismatch(f"features {feats.shape} do not match ({ctx.n}, {cfg.channels})")
    p = model.params
    prefix = _check_prefix(prefix, j, cfg, ctx.n)
    embed = p[f"stage{j}.embed"][prefix] if j > 0 else None

    x = feats + embed if (embed is not None and cfg.recompute_neighbors) else feats
    blocks = []
    for b in range(cfg.conv_blocks_per_stage):
        pre = f"stage{j}.block{b}"
        h = conv(x, ctx.nbr, p[pre + ".conv1.weight"], p[pre + ".conv1.bias"])
        a = np.maximum(h, 0)
        blocks.append((x, h, a))
        x = conv(a, ctx.nbr, p[pre + ".conv2.weight"], p[pre + ".conv2.bias"])
    if embed is not None and not cfg.recompute_neighbors:
        x = x + embed
    probs = softmax(x @ p[f"stage{j}.head.weight"] + p[f"stage{j}.head.bias"])
    if tape is not None:
        tape.update(prefix=prefix, blocks=blocks, head_in=x, probs=probs)
    return probs


def stage_segments(codes: np.ndarray, config: ModelConfig) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-stage true segments and the prefixes each stage conditions on."""
    codes = np.asarray(codes, dtype=np.int64)
    segs, prefixes = [], []
    for j, w in enumerate(config.widths):
        prefixes.append(codes >> (8 - config.prefix_bits(j)) if j > 0 else np.zeros_like(codes))
        segs.append((codes >> config.shift(j)) & ((1 << w) - 1))
    return segs, prefixes


# ---------------------------------------------------------------------------
# coordinate-level API


@dataclass(eq=False)
class FeatureMap:
    """Per-voxel features aligned with one scale's sorted coordinates."""

    coords: np.ndarray
    features: np.ndarray
    _nbr: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.coords = as_coords(self.coords)
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or len(self.features) != len(self.coords):
            raise ConfigMismatch("feature rows must align with coordinates")

    def neighbors(self, k: int) -> np.ndarray:
        if k not in self._nbr:
            self._nbr[k] = neighbor_index(self.coords, k)
        return self._nbr[k]


@dataclass(eq=False)
class StageDistribution:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs)

    @property
    def width(self) -> int:
        return int(self.probs.shape[1]).bit_length() - 1


def prior_features_map(coords, parent_codes, parent_index, model: FopModel) -> FeatureMap:
    """Prior features from the parent scale's codes (``None`` at the root)."""
    coords = as_coords(coords)
    if parent_codes is None:
        per_voxel = None
    else:
        parent_index = np.asarray(parent_index, dtype=np.int64)
        if parent_index.shape != (len(coords),):
            raise ConfigMismatch("parent_index must map every voxel")
        per_voxel = np.asarray(parent_codes, dtype=np.int64)[parent_index]
    ctx = make_context(coords, per_voxel, model.config.replace(neighbor_prior=False))
    return FeatureMap(coords, prior_features(ctx, model))


def sparse_conv(fmap: FeatureMap, weight: np.ndarray, bias: np.ndarray) -> FeatureMap:
    kv = weight.shape[0]
    k = round(kv ** (1.0 / 3.0))
    if k**3 != kv:
        raise ConfigMismatch(f"kernel of {kv} taps is not a cube")
    return FeatureMap(fmap.coords, conv(fmap.features, fmap.neighbors(k), weight, bias))


def stage_forward_map(base: FeatureMap, decoded_bits, j: int, model: FopModel) -> StageDistribution:
    ctx = VoxelContext(
        parent_code=np.zeros(len(base.coords), dtype=np.int64),
        octant=octant_index(base.coords),
        nbr=base.neighbors(model.config.conv_kernel),
    )
    return StageDistribution(stage_forward(base.features, decoded_bits, j, model, ctx))
