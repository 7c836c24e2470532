"""Container format and the coarse-to-fine encoder/decoder.

Every scale is coded in stage passes: all voxels' stage-0 segments, then all
stage-1 segments, and so on, so that the spatial convolutions of a later
stage may read the earlier segments of neighboring voxels.  A single range
coder session spans the whole file.
"""

from __future__ import annotations

import hashlib
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigMismatch, CorruptStream, EmptyCode, HierarchyMismatch, WrongModel
from .geometry import QuantizedCloud, build_hierarchy, expand_with_parents
from .model import EPS, FopModel, make_context, prior_features, stage_forward, stage_segments
from .rangecoder import (
    PRECISION,
    RangeDecoder,
    RangeEncoder,
    cumulative,
    quantize_probs_batch,
)

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "StreamHeader",
    "EncodeReport",
    "encode",
    "decode",
    "read_header",
]

MAGIC = b"GPCG"
FORMAT_VERSION = 1
FLAG_TABLE_DIGESTS = 1

# magic, version, step, origin xyz, points, scales, grouping, neighbor prior,
# model digest, flags, payload crc32
_HEADER = struct.Struct("<4sHd3qQHBBQBI")
HEADER_SIZE = _HEADER.size

# uniform 256-ary table used to embed table digests in debug streams
_BYTE_CUM = np.arange(0, (1 << PRECISION) + 1, 256, dtype=np.int64)[None, :]


@dataclass(frozen=True)
class StreamHeader:
    step: float
    origin: tuple
    num_points: int
    num_scales: int
    grouping: int
    neighbor_prior: int
    model_digest: int
    flags: int = 0
    payload_crc: int = 0
    version: int = FORMAT_VERSION

    def pack(self) -> bytes:
        return _HEADER.pack(
            MAGIC, self.version, self.step, *self.origin, self.num_points, self.num_scales,
            self.grouping, self.neighbor_prior, self.model_digest, self.flags, self.payload_crc,
        )

    @classmethod
    def unpack(cls, data: bytes) -> "StreamHeader":
        if len(data) < HEADER_SIZE:
            raise CorruptStream("stream shorter than its header")
        magic, version, step, ox, oy, oz, n, scales, grouping, np_flag, digest, flags, crc = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CorruptStream("bad magic")
        if version != FORMAT_VERSION:
            raise CorruptStream(f"unsupported format version {version}")
        return cls(step, (ox, oy, oz), n, scales, grouping, np_flag, digest, flags, crc, version)


@dataclass
class EncodeReport:
    """Rate accounting for one encode.

    ``coded_bits`` is the ideal code length of the true segments under the
    quantized tables the coder used; ``bpp`` and the per-scale and per-stage
    breakdowns are expressed in it.  ``model_bits`` is the training objective,
    the summed ``-log2(p + EPS)`` under the unquantized probabilities.
    """

    num_points: int
    model_bits: float
    coded_bits: float
    payload_bits: int
    header_bits: int
    per_scale_bits: list = field(default_factory=list)
    per_stage_bits: list = field(default_factory=list)
    encode_seconds: float = 0.0

    @property
    def bpp(self) -> float:
        return self.coded_bits / self.num_points

    @property
    def model_bpp(self) -> float:
        return self.model_bits / self.num_points

    @property
    def payload_bpp(self) -> float:
        return self.payload_bits / self.num_points

    @property
    def stream_bits(self) -> int:
        return self.payload_bits + self.header_bits

    @property
    def stream_bpp(self) -> float:
        return self.stream_bits / self.num_points

    def summary(self) -> str:
        lines = [
            f"points       {self.num_points}",
            f"bpp          {self.bpp:.4f}",
            f"model bpp    {self.model_bpp:.4f}",
            f"payload bpp  {self.payload_bpp:.4f}",
            f"stream bytes {self.stream_bits // 8}",
            f"encode s     {self.encode_seconds:.3f}",
            "bits by scale: " + " ".join(f"{b:.0f}" for b in self.per_scale_bits),
            "bits by stage: " + " ".join(f"{b:.0f}" for b in self.per_stage_bits),
        ]
        return "\n".join(lines)


def _table_digest(freqs: np.ndarray) -> np.ndarray:
    d = hashlib.blake2b(np.ascontiguousarray(freqs, dtype="<i8").tobytes(), digest_size=8).digest()
    return np.frombuffer(d, dtype=np.uint8).astype(np.int64)


def _scale_context(coords, parent_code, model):
    return make_context(coords, parent_code, model.config)


def encode(cloud: QuantizedCloud, model: FopModel, debug_tables: bool = False) -> tuple[bytes, EncodeReport]:
    t0 = time.perf_counter()
    cloud.validate()
    cfg = model.config
    hier = build_hierarchy(cloud)
    enc = RangeEncoder()
    per_scale = []
    per_stage = [0.0] * cfg.num_stages
    model_bits = 0.0
    coded_bits = 0.0
    for s in range(hier.depth):
        parent_code = None if s == 0 else hier.codes[s - 1].astype(np.int64)[hier.parent_index(s)]
        ctx = _scale_context(hier.levels[s], parent_code, model)
        feats = prior_features(ctx, model)
        segs, prefixes = stage_segments(hier.codes[s], cfg)
        rows = np.arange(ctx.n)
        scale_bits = 0.0
        for j in range(cfg.num_stages):
            probs = stage_forward(feats, prefixes[j], j, model, ctx)
            freqs = quantize_probs_batch(probs)
            enc.encode_batch(cumulative(freqs), segs[j])
            if debug_tables:
                enc.encode_batch(np.repeat(_BYTE_CUM, 8, axis=0), _table_digest(freqs))
            model_bits += float(np.sum(-np.log2(probs[rows, segs[j]].astype(np.float64) + EPS)))
            bits = float(np.sum(PRECISION - np.log2(freqs[rows, segs[j]])))
            scale_bits += bits
            per_stage[j] += bits
        per_scale.append(scale_bits)
        coded_bits += scale_bits
    payload = enc.finish()
    header = StreamHeader(
        step=cloud.step,
        origin=tuple(int(v) for v in cloud.origin),
        num_points=len(cloud),
        num_scales=hier.depth,
        grouping=cfg.grouping.flag,
        neighbor_prior=int(cfg.neighbor_prior),
        model_digest=model.digest(),
        flags=FLAG_TABLE_DIGESTS if debug_tables else 0,
        payload_crc=zlib.crc32(payload),
    )
    report = EncodeReport(
        num_points=len(cloud),
        model_bits=model_bits,
        coded_bits=coded_bits,
        payload_bits=8 * len(payload),
        header_bits=8 * HEADER_SIZE,
        per_scale_bits=per_scale,
        per_stage_bits=per_stage,
        encode_seconds=time.perf_counter() - t0,
    )
    return header.pack() + payload, report


def read_header(stream: bytes) -> StreamHeader:
    return StreamHeader.unpack(stream)


def decode(stream: bytes, model: FopModel) -> QuantizedCloud:
    header = StreamHeader.unpack(stream)
    if header.model_digest != model.digest():
        raise WrongModel("stream was encoded with a different model")
    cfg = model.config
    if header.grouping != cfg.grouping.flag or header.neighbor_prior != int(cfg.neighbor_prior):
        raise ConfigMismatch("stream flags disagree with the model configuration")
    payload = bytes(stream[HEADER_SIZE:])
    if zlib.crc32(payload) != header.payload_crc:
        raise CorruptStream("payload checksum mismatch")
    if header.num_scales < 1 or header.num_points < 1:
        raise CorruptStream("empty stream header")
    debug_tables = bool(header.flags & FLAG_TABLE_DIGESTS)
    dec = RangeDecoder(payload)
    coords = np.zeros((1, 3), dtype=np.int64)
    parent_code = None
    for s in range(header.num_scales):
        ctx = _scale_context(coords, parent_code, model)
        feats = prior_features(ctx, model)
        prefix = np.zeros(ctx.n, dtype=np.int64)
        for j, w in enumerate(cfg.widths):
            probs = stage_forward(feats, prefix, j, model, ctx)
            freqs = quantize_probs_batch(probs)
            seg = dec.decode_batch(cumulative(freqs))
            if debug_tables:
                embedded = dec.decode_batch(np.repeat(_BYTE_CUM, 8, axis=0))
                if not np.array_equal(embedded, _table_digest(freqs)):
                    raise CorruptStream(f"probability tables diverged at scale {s}, stage {j}")
            prefix = (prefix << w) | seg
        try:
            coords, pidx = expand_with_parents(coords, prefix)
        except (EmptyCode, HierarchyMismatch) as e:
            raise CorruptStream(f"invalid occupancy code at scale {s}: {e}") from None
        parent_code = prefix[pidx]
        if len(coords) > header.num_points:
            raise CorruptStream("decoded more voxels than the header declares")
    dec.finish()
    if len(coords) != header.num_points:
        raise CorruptStream("decoded point count disagrees with the header")
    return QuantizedCloud(coords, header.step, np.array(header.origin, dtype=np.int64))
