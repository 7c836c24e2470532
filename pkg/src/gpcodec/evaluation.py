"""Corpus evaluation and the configuration ablation harness."""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .codec import decode, encode
from .errors import CorruptStream, ValidationError
from .geometry import QuantizedCloud, build_hierarchy, quantize
from .model import FopModel, Grouping, ModelConfig
from .pointcloud_io import SyntheticSpec, generate
from .training import prepare_batch, train

__all__ = [
    "DESK_SCENE",
    "ABLATION_CONFIGS",
    "EvalRow",
    "AblationResult",
    "worker_count",
    "synthetic_corpus",
    "evaluate",
    "write_eval_csv",
    "zero_model_bpp",
    "train_on",
    "ablation",
    "ablation_trends",
]

# small clustered scene used for desk-scale corpora: ~1.7k voxels, 9 scales
DESK_SCENE = SyntheticSpec(clusters=8, points_per_cluster=(100, 300), sigma=3.0, extent=256.0)

ABLATION_CONFIGS = {
    "two_stage": dict(grouping=Grouping.TWO_STAGE, neighbor_prior=False),
    "two_stage+np": dict(grouping=Grouping.TWO_STAGE, neighbor_prior=True),
    "four_stage": dict(grouping=Grouping.FOUR_STAGE_UNIFORM, neighbor_prior=False),
    "four_stage+np": dict(grouping=Grouping.FOUR_STAGE_UNIFORM, neighbor_prior=True),
    "four_stage_ue+np": dict(grouping=Grouping.FOUR_STAGE_NON_UNIFORM, neighbor_prior=True),
}


@dataclass(frozen=True)
class EvalRow:
    name: str
    points: int
    bpp: float
    enc_s: float
    dec_s: float


@dataclass
class AblationResult:
    """``bpp[config][seed]`` holds one value per test cloud, in corpus order."""

    names: list
    points: list
    seeds: list
    bpp: dict = field(default_factory=dict)
    losses: dict = field(default_factory=dict)

    def mean(self, config: str) -> float:
        return float(np.mean([np.mean(v) for v in self.bpp[config].values()]))

    def seed_mean(self, config: str, seed: int) -> float:
        return float(np.mean(self.bpp[config][seed]))

    def write_csv(self, path) -> None:
        configs = list(self.bpp)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["seed", "name", "points", *configs])
            for s in self.seeds:
                for i, (name, n) in enumerate(zip(self.names, self.points)):
                    w.writerow([s, name, n, *(f"{self.bpp[c][s][i]:.6f}" for c in configs)])
                w.writerow([s, "mean", "", *(f"{self.seed_mean(c, s):.6f}" for c in configs)])
            w.writerow(["all", "mean", "", *(f"{self.mean(c):.6f}" for c in configs)])


def worker_count(jobs: int) -> int:
    """Pool size: ``GPCC_THREADS`` if set, else the CPU count, never above ``jobs``."""
    env = os.environ.get("GPCC_THREADS", "").strip()
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ValidationError(f"GPCC_THREADS must be an integer, got {env!r}") from None
        if cap < 1:
            raise ValidationError("GPCC_THREADS must be >= 1")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, jobs))


def synthetic_corpus(n: int, seed: int = 0, scene: SyntheticSpec = DESK_SCENE, step: float = 1.0):
    """``n`` named clouds from consecutive generator seeds starting at ``seed``."""
    out = []
    for i in range(n):
        spec = SyntheticSpec(**{**scene.__dict__, "seed": seed + i})
        out.append((f"synthetic-{seed + i}", quantize(generate(spec).positions, step)))
    return out


def _named(corpus):
    items = []
    for i, item in enumerate(corpus):
        if isinstance(item, QuantizedCloud):
            items.append((f"cloud-{i}", item))
        else:
            items.append(tuple(item))
    return items


def _eval_one(name: str, cloud: QuantizedCloud, model: FopModel) -> EvalRow:
    stream, report = encode(cloud, model)
    t0 = time.perf_counter()
    back = decode(stream, model)
    dec_s = time.perf_counter() - t0
    if back != cloud:
        raise CorruptStream(f"{name}: decoded cloud differs from the input")
    return EvalRow(name, report.num_points, report.bpp, report.encode_seconds, dec_s)


def evaluate(corpus, model: FopModel, workers: int | None = None) -> list[EvalRow]:
    """Encode and decode every cloud, checking losslessness; rows in corpus order."""
    items = _named(corpus)
    if not items:
        raise ValidationError("evaluation corpus is empty")
    workers = worker_count(len(items)) if workers is None else max(1, workers)
    if workers == 1:
        return [_eval_one(n, c, model) for n, c in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda it: _eval_one(it[0], it[1], model), items))


def write_eval_csv(rows: list[EvalRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["name", "points", "bpp", "enc_s", "dec_s"])
        for r in rows:
            w.writerow([r.name, r.points, f"{r.bpp:.6f}", f"{r.enc_s:.4f}", f"{r.dec_s:.4f}"])
        w.writerow([
            "mean",
            f"{np.mean([r.points for r in rows]):.1f}",
            f"{np.mean([r.bpp for r in rows]):.6f}",
            f"{np.mean([r.enc_s for r in rows]):.4f}",
            f"{np.mean([r.dec_s for r in rows]):.4f}",
        ])


def zero_model_bpp(cloud: QuantizedCloud) -> float:
    """Rate of the uniform predictor: 8 bits for every occupancy code."""
    h = build_hierarchy(cloud)
    return 8.0 * sum(len(c) for c in h.codes) / h.num_points


def train_on(corpus, config: ModelConfig, iters: int, seed: int = 0, lr: float = 1e-3, on_step=None):
    """Freshly initialized model trained on ``corpus``; returns ``(model, losses)``."""
    model = FopModel.initialize(config, seed=seed)
    batches = [prepare_batch(build_hierarchy(c), config) for _, c in _named(corpus)]
    return train(model, batches, iters, lr=lr, seed=seed, on_step=on_step)


def ablation(
    train_corpus,
    test_corpus,
    iters: int,
    seeds=(0, 1, 2),
    base: ModelConfig | None = None,
    configs: dict | None = None,
) -> AblationResult:
    """Train every configuration with the same budget and score it on ``test_corpus``.

    The per-cloud score is the model bit rate reported by the encoder; every
    test cloud is also decoded and checked for losslessness.
    """
    base = base or ModelConfig.desk()
    configs = configs or ABLATION_CONFIGS
    tests = _named(test_corpus)
    if not tests or not list(train_corpus):
        raise ValidationError("ablation needs non-empty train and test corpora")
    result = AblationResult([n for n, _ in tests], [len(c) for _, c in tests], list(seeds))
    for name, overrides in configs.items():
        cfg = base.replace(**overrides)
        result.bpp[name] = {}
        result.losses[name] = {}
        for s in seeds:
            model, losses = train_on(train_corpus, cfg, iters, seed=s)
            result.bpp[name][s] = [r.bpp for r in evaluate(tests, model, workers=1)]
            result.losses[name][s] = losses
    return result


def ablation_trends(result: AblationResult, allowance: float = 0.02) -> list[tuple[str, float, float, bool]]:
    """Expected orderings as ``(label, better, worse, holds)``.

    ``holds`` is true when the seed-averaged mean bpp of the configuration
    expected to be better is at most ``(1 + allowance)`` times the other one.
    """
    pairs = [
        ("two_stage+np", "two_stage"),
        ("four_stage+np", "four_stage"),
        ("four_stage", "two_stage"),
        ("four_stage+np", "two_stage+np"),
    ]
    out = []
    for a, b in pairs:
        if a in result.bpp and b in result.bpp:
            ma, mb = result.mean(a), result.mean(b)
            out.append((f"{a} <= {b}", ma, mb, ma <= mb * (1.0 + allowance)))
    return out
