"""Command-line interface: ``gpcodec {encode,decode,train,eval,analyze,generate}``.

Exit codes: 0 success, 2 usage or validation error, 3 data or stream error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .codec import decode, encode
from .errors import CorruptStream, DataError, ValidationError, WrongModel
from .evaluation import (
    ABLATION_CONFIGS,
    DESK_SCENE,
    ablation,
    ablation_trends,
    evaluate,
    synthetic_corpus,
    train_on,
    write_eval_csv,
)
from .geometry import build_hierarchy, dequantize, quantize
from .model import FopModel, Grouping, ModelConfig
from .pointcloud_io import RawCloud, SyntheticSpec, generate, read_ply, write_ply

log = logging.getLogger("gpcodec")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3

DEFAULT_STEP = 0.001


class UsageError(Exception):
    pass


@dataclass
class CliConfig:
    """Validated view of the parsed flags shared by every subcommand."""

    command: str
    inputs: list = field(default_factory=list)
    output: Path | None = None
    step: float = DEFAULT_STEP
    model: Path | None = None
    overrides: dict = field(default_factory=dict)
    seed: int = 0
    report: Path | None = None

    @classmethod
    def from_args(cls, args) -> "CliConfig":
        step = getattr(args, "step", DEFAULT_STEP)
        if step is not None and not step > 0:
            raise UsageError(f"--step must be positive, got {step}")
        inputs = [Path(p) for p in (getattr(args, "input", None), getattr(args, "corpus", None)) if p]
        model = getattr(args, "model", None)
        out = getattr(args, "output", None)
        return cls(
            command=args.command,
            inputs=inputs,
            output=Path(out) if out else None,
            step=step if step is not None else DEFAULT_STEP,
            model=Path(model) if model else None,
            overrides=_overrides(args),
            seed=getattr(args, "seed", 0),
            report=Path(args.log) if getattr(args, "log", None) else None,
        )


def _overrides(args) -> dict:
    ov = {}
    if getattr(args, "channels", None) is not None:
        ov["channels"] = args.channels
    if getattr(args, "kernel_size", None) is not None:
        ov["kernel_size"] = args.kernel_size
    if getattr(args, "grouping", None) is not None:
        ov["grouping"] = Grouping.parse(args.grouping)
    if getattr(args, "np", None) is not None:
        ov["neighbor_prior"] = args.np
    if getattr(args, "blocks", None) is not None:
        ov["conv_blocks_per_stage"] = args.blocks
    return ov


def _parse_spec(text: str | None) -> tuple[int, SyntheticSpec]:
    """``"n=20,seed=0,clusters=8,..."`` into a cloud count and a scene spec."""
    fields = dict(DESK_SCENE.__dict__)
    n = 20
    if text:
        for item in text.split(","):
            if not item.strip():
                continue
            if "=" not in item:
                raise UsageError(f"bad synthetic spec item {item!r}; expected key=value")
            key, value = (s.strip() for s in item.split("=", 1))
            try:
                if key == "n":
                    n = int(value)
                elif key == "points_per_cluster":
                    lo, hi = value.split(":")
                    fields[key] = (int(lo), int(hi))
                elif key in ("clusters", "seed", "total_points"):
                    fields[key] = int(value)
                elif key in ("sigma", "extent", "background_fraction"):
                    fields[key] = float(value)
                else:
                    raise UsageError(f"unknown synthetic spec key {key!r}")
            except ValueError:
                raise UsageError(f"bad value for {key!r}: {value!r}") from None
    if n < 1:
        raise UsageError("synthetic corpus needs n >= 1")
    try:
        return n, SyntheticSpec(**fields)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _load_corpus(path, step: float):
    d = Path(path)
    if d.is_file():
        files = [d]
    elif d.is_dir():
        files = sorted(d.glob("*.ply"))
    else:
        raise UsageError(f"cannot read corpus {path}")
    if not files:
        raise UsageError(f"corpus {path} has no .ply files")
    out = []
    for f in files:
        try:
            raw = read_ply(f)
        except OSError as e:
            raise UsageError(f"cannot read {f}: {e.strerror}") from None
        out.append((f.stem, quantize(raw.positions, step)))
    return out


def _corpus(args, step: float, dir_attr: str = "corpus", spec_attr: str = "synthetic"):
    if getattr(args, dir_attr, None):
        return _load_corpus(getattr(args, dir_attr), step)
    if getattr(args, spec_attr, None) is not None:
        n, spec = _parse_spec(getattr(args, spec_attr))
        return synthetic_corpus(n, seed=spec.seed, scene=spec, step=1.0)
    return None


def _load_model(path) -> FopModel:
    if path is None:
        raise UsageError("--model is required")
    try:
        return FopModel.load(path)
    except OSError as e:
        raise UsageError(f"cannot read model {path}: {e.strerror}") from None


def _base_config(name: str | None) -> ModelConfig:
    if name is None or name == "desk":
        return ModelConfig.desk()
    if name == "full":
        return ModelConfig.full()
    if name in ABLATION_CONFIGS:
        return ModelConfig.desk(**ABLATION_CONFIGS[name])
    p = Path(name)
    if p.is_file():
        try:
            return ModelConfig.from_dict(json.loads(p.read_text()))
        except (ValueError, TypeError, KeyError) as e:
            raise UsageError(f"bad config file {p}: {e}") from None
    choices = ", ".join(["desk", "full", *ABLATION_CONFIGS])
    raise UsageError(f"unknown config {name!r}; use one of {choices} or a JSON file")


def _read_cloud(path, step: float):
    try:
        raw = read_ply(path)
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}") from None
    return quantize(raw.positions, step)


def cmd_encode(args) -> int:
    cfg = CliConfig.from_args(args)
    model = _load_model(cfg.model)
    cloud = _read_cloud(args.input, cfg.step)
    stream, report = encode(cloud, model, debug_tables=args.debug_tables)
    out = cfg.output or Path(args.input).with_suffix(".gpcc")
    out.write_bytes(stream)
    print(report.summary())
    print(f"wrote {out} ({len(stream)} bytes)")
    return EXIT_OK


def cmd_decode(args) -> int:
    cfg = CliConfig.from_args(args)
    model = _load_model(cfg.model)
    try:
        stream = Path(args.input).read_bytes()
    except OSError as e:
        raise UsageError(f"cannot read {args.input}: {e.strerror}") from None
    cloud = decode(stream, model)
    out = cfg.output or Path(args.input).with_suffix(".ply")
    write_ply(RawCloud(dequantize(cloud)), out, mode=args.format)
    print(f"decoded {len(cloud)} points to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = CliConfig.from_args(args)
    if args.iters < 0:
        raise UsageError("--iters must be >= 0")
    if args.corpus and args.synthetic is not None:
        raise UsageError("use either --corpus or --synthetic")
    corpus = _corpus(args, cfg.step)
    if corpus is None:
        if args.iters > 0:
            raise UsageError("training needs --corpus or --synthetic")
        corpus = []
    try:
        config = _base_config(args.config).replace(seed=cfg.seed, **cfg.overrides)
    except ValueError as e:
        raise UsageError(str(e)) from None
    model, losses = train_on(corpus, config, args.iters, seed=cfg.seed, lr=args.lr)
    out = cfg.output or Path("model.gpcm")
    model.save(out)
    log_path = cfg.report or out.with_suffix(".loss.csv")
    with open(log_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "bpp"])
        for i, v in enumerate(losses):
            w.writerow([i, f"{v:.6f}"])
    if losses:
        k = min(len(losses), max(1, len(corpus)))
        print(f"initial bpp {np.mean(losses[:k]):.4f}  final bpp {np.mean(losses[-k:]):.4f}")
    print(f"wrote {out} ({model.num_parameters} parameters, digest {model.digest():016x})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = CliConfig.from_args(args)
    corpus = _corpus(args, cfg.step)
    if not corpus:
        raise UsageError("evaluation needs a non-empty --corpus or --synthetic")
    if args.ablate:
        base = _load_model(cfg.model).config if cfg.model else ModelConfig.desk()
        train_corpus = _corpus(args, cfg.step, "train_corpus", "train_synthetic")
        if train_corpus is None:
            n, spec = _parse_spec("n=20,seed=1000")
            train_corpus = synthetic_corpus(n, seed=spec.seed, scene=spec)
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        result = ablation(train_corpus, corpus, args.iters, seeds=seeds, base=base)
        out = cfg.output or Path("ablation.csv")
        result.write_csv(out)
        for name in result.bpp:
            print(f"{name:18s} {result.mean(name):.4f} bpp")
        for label, a, b, ok in ablation_trends(result):
            print(f"{'ok  ' if ok else 'FAIL'} {label}: {a:.4f} vs {b:.4f}")
        print(f"wrote {out}")
        return EXIT_OK
    model = _load_model(cfg.model)
    rows = evaluate(corpus, model, workers=args.workers)
    out = cfg.output or Path("eval.csv")
    write_eval_csv(rows, out)
    for r in rows:
        print(f"{r.name:24s} {r.points:8d} {r.bpp:8.4f} bpp")
    print(f"{'mean':24s} {'':8s} {np.mean([r.bpp for r in rows]):8.4f} bpp")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = CliConfig.from_args(args)
    if args.k < 1 or args.k % 2 == 0:
        raise UsageError("k must be odd")
    if args.bins < 1:
        raise UsageError("--bins must be >= 1")
    hier = build_hierarchy(_read_cloud(args.input, cfg.step))
    out = cfg.output or Path(f"{Path(args.input).stem}.{args.mode}.csv")
    if args.mode == "fractal":
        if hier.depth < 2:
            raise UsageError("fractal mode needs a cloud spanning at least two scales")
        prof = analysis.fractal_profile(hier)
        analysis.write_fractal_csv(prof, out)
        for s, v in prof.rows():
            print(f"scale {s:3d}  {v:.4f}")
    elif args.mode == "density":
        hists = analysis.density_by_scale(hier, k=args.k, bins=args.bins)
        analysis.write_histograms_csv(hists, out)
        if args.json:
            analysis.write_json([h.to_dict() for h in hists], args.json)
        print(f"{len(hists)} scales, k={args.k}, {args.bins} bins")
    else:
        if not args.against:
            raise UsageError("kl mode needs --against")
        other = build_hierarchy(_read_cloud(args.against, cfg.step))
        ha = analysis.density_by_scale(hier, k=args.k, bins=args.bins)
        hb = analysis.density_by_scale(other, k=args.k, bins=args.bins)
        rows = [(p.scale, *analysis.kl_report(p, q)) for p, q in zip(ha, hb)]
        analysis.write_kl_csv(rows, out)
        for s, pq, qp, sym in rows:
            print(f"scale {s:3d}  {pq:.4f}  {qp:.4f}  {sym:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    n, spec = _parse_spec(args.synthetic)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        s = SyntheticSpec(**{**spec.__dict__, "seed": spec.seed + i})
        write_ply(generate(s), out / f"synthetic-{s.seed}.ply", mode=args.format)
    print(f"wrote {n} clouds to {out}")
    return EXIT_OK


def _add_model_flags(p) -> None:
    p.add_argument("--config", help="desk, full, an ablation name or a JSON file (default desk)")
    p.add_argument("--channels", type=int)
    p.add_argument("--kernel-size", type=int)
    p.add_argument("--grouping", help="1124, 2222 or 44")
    p.add_argument("--blocks", type=int, help="conv blocks per stage")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--np", dest="np", action="store_true", default=None, help="enable neighbor prior")
    g.add_argument("--no-np", dest="np", action="store_false", help="disable neighbor prior")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gpcodec", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="compress a PLY file")
    p.add_argument("input")
    p.add_argument("--step", type=float, default=DEFAULT_STEP, help="voxel size in input units")
    p.add_argument("--model", required=True)
    p.add_argument("-o", "--output")
    p.add_argument("--debug-tables", action="store_true", help="embed probability table digests")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress a .gpcc stream to PLY")
    p.add_argument("input")
    p.add_argument("--model", required=True)
    p.add_argument("-o", "--output")
    p.add_argument("--format", choices=("binary", "ascii"), default="binary")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="train a model checkpoint")
    p.add_argument("--corpus", help="directory of .ply files")
    p.add_argument("--synthetic", nargs="?", const="", help="synthetic corpus spec, e.g. n=20,seed=0")
    p.add_argument("--step", type=float, default=DEFAULT_STEP)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.add_argument("--log", help="loss log CSV (default next to the checkpoint)")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model or run the ablation matrix")
    p.add_argument("--corpus", help="directory of .ply files")
    p.add_argument("--synthetic", nargs="?", const="", help="synthetic corpus spec")
    p.add_argument("--step", type=float, default=DEFAULT_STEP)
    p.add_argument("--model")
    p.add_argument("--ablate", action="store_true")
    p.add_argument("--train-corpus")
    p.add_argument("--train-synthetic", nargs="?", const="")
    p.add_argument("--iters", type=int, default=500, help="training budget per ablation config")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--workers", type=int, help="override GPCC_THREADS")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="density, KL or fractal report")
    p.add_argument("--input", required=True)
    p.add_argument("--mode", choices=("density", "fractal", "kl"), required=True)
    p.add_argument("--step", type=float, default=DEFAULT_STEP)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--against")
    p.add_argument("--json", help="also write histograms as JSON")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("generate", help="write a synthetic PLY corpus")
    p.add_argument("--synthetic", default="", help="spec, e.g. n=20,seed=0,clusters=8")
    p.add_argument("--format", choices=("binary", "ascii"), default="binary")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_generate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except WrongModel as e:
        print(f"error: model mismatch: {e}", file=sys.stderr)
        return EXIT_DATA
    except CorruptStream as e:
        print(f"error: corrupt stream: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
