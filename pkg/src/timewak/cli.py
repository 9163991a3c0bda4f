"""Command-line front end.

Exit codes: 0 success or watermark detected, 1 not detected (or bound
violated), 2 usage error or malformed input tensor, 3 dataset/model error.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, apply_attack
from .core import InvalidRangeError, NoiseSchedule, TimeWakError, WatermarkKey, build_schedule
from .detect import build_report, null_accuracies, sample_accuracies, z_score
from .diffusion import AnalyticGaussianEstimator, LoadedLinearEstimator, bdia_sample
from .io import DataError, ar1_dataset, atomic_write_bytes, load_csv, load_tensor, save_tensor, window
from .theory import simulation_sweep, verify_bound, write_bound_csv, write_sweep_csv
from .watermark import EmbedParams, embed, generate_seeds

EXIT_OK, EXIT_NEGATIVE, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

BENCH_ATTACKS = [("none", "none:0"), ("offset_5", "offset:0.05"), ("offset_30", "offset:0.30"),
                 ("crop_5", "random_crop:0.05"), ("crop_30", "random_crop:0.30"),
                 ("minmax_5", "minmax_insert:0.05"), ("minmax_30", "minmax_insert:0.30")]


class UsageError(TimeWakError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Settings read from a ``key = value`` file; ``#`` starts a comment."""

    dataset: str = "synthetic"
    features: int = 6
    W: int = 24
    H: int = 2
    L: int = 2
    T: int = 100
    gamma: float = 1.0
    schedule: str = "linear"
    beta_min: float = 0.0
    beta_max: float = 0.0
    key: str = ""
    estimator: str = "analytic"
    normalization: str = "minmax"
    stride: int = 1
    batch: int = 200
    null_samples: int = 200
    attack: str = "none"
    out: str = "timewak-out"
    z_threshold: float = 4.0

    def __post_init__(self):
        if self.W < 2 or self.features < 1 or self.stride < 1:
            raise UsageError("need W >= 2, features >= 1 and stride >= 1")
        if not 1 <= self.H <= self.W:
            raise UsageError(f"H must lie in [1, W], got {self.H}")
        if self.L < 2 or self.T < 2:
            raise UsageError("need L >= 2 and T >= 2")
        if not 0.0 < self.gamma <= 1.0:
            raise UsageError("gamma must lie in (0, 1]")
        if self.batch < 1 or self.null_samples < 2:
            raise UsageError("need batch >= 1 and null_samples >= 2")
        if self.schedule not in ("linear", "cosine"):
            raise UsageError(f"unknown schedule {self.schedule!r}")
        if self.normalization not in ("minmax", "zscore", "none"):
            raise UsageError(f"unknown normalization {self.normalization!r}")

    @classmethod
    def parse(cls, text: str, base: Path | None = None) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            name, sep, value = line.partition("=")
            name, value = name.strip(), value.strip()
            if not sep or name not in types:
                raise UsageError(f"config line {lineno}: unknown or malformed entry {raw.strip()!r}")
            conv = {"int": int, "float": float}.get(types[name], str)
            try:
                values[name] = conv(value)
            except ValueError:
                raise UsageError(f"config line {lineno}: {name} expects {types[name]}, got {value!r}") from None
        for name in ("dataset", "estimator", "out"):
            v = values.get(name)
            if base is not None and v and v not in ("synthetic", "analytic") and not Path(v).is_absolute():
                values[name] = str(base / v)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text, path.parent)

    def betas(self) -> tuple[float, float]:
        lo = self.beta_min or 0.1 / self.T
        hi = self.beta_max or min(20.0 / self.T, 0.5)
        return lo, max(hi, lo)

    def master_key(self) -> WatermarkKey:
        if not self.key:
            raise UsageError("a key is required (--key HEX or key=... in the config); see `timewak keygen`")
        try:
            return WatermarkKey.from_hex(self.key)
        except (ValueError, TimeWakError) as exc:
            raise UsageError(f"invalid key: {exc}") from None


@dataclass
class Pipeline:
    config: RunConfig
    key: WatermarkKey
    params: EmbedParams
    schedule: NoiseSchedule
    estimator: object


def build_pipeline(cfg: RunConfig) -> Pipeline:
    key = cfg.master_key()
    lo, hi = cfg.betas()
    sched = build_schedule(cfg.T, cfg.schedule, lo, hi, cfg.gamma)
    if cfg.estimator == "analytic":
        if cfg.dataset == "synthetic":
            ds = ar1_dataset(features=cfg.features)
        else:
            if not Path(cfg.dataset).is_file():
                raise DataError(f"dataset {cfg.dataset} does not exist")
            ds = load_csv(cfg.dataset)
        windows = window(ds.normalized(cfg.normalization), cfg.W, cfg.stride)
        F = windows.shape[2]
        est = AnalyticGaussianEstimator.fit(windows, sched)
    else:
        if not Path(cfg.estimator).is_file():
            raise DataError(f"estimator file {cfg.estimator} does not exist")
        est = LoadedLinearEstimator.load(cfg.estimator)
        if est.steps != cfg.T or est.dim % cfg.W:
            raise DataError(f"estimator has {est.steps} steps and dimension {est.dim}; config needs T={cfg.T} "
                            f"and a multiple of W={cfg.W}")
        F = est.dim // cfg.W
    return Pipeline(cfg, key, EmbedParams(key, cfg.W, F, cfg.L, min(cfg.H, cfg.W)), sched, est)


def _chunked(fn, x: np.ndarray, threads: int) -> np.ndarray:
    """Apply ``fn`` to contiguous batch chunks, in parallel when ``threads > 1``."""
    if threads <= 1 or len(x) < 2:
        return fn(x)
    parts = np.array_split(x, min(threads, len(x)))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.concatenate(list(pool.map(fn, parts)))


def generate_watermarked(pipe: Pipeline, batch: int, threads: int = 1):
    noise, seeds = embed(pipe.params, batch)
    x0 = _chunked(lambda n: bdia_sample(n, pipe.estimator, pipe.schedule).x0, noise, threads)
    return x0, seeds


def _accuracies(pipe: Pipeline, x0, mode: str, threads: int) -> np.ndarray:
    reference = generate_seeds(pipe.params) if mode == "informed" else None
    fn = lambda chunk: sample_accuracies(chunk, pipe.key, pipe.params, pipe.estimator, pipe.schedule, mode,
                                         reference)
    return _chunked(fn, x0, threads)


def _baseline(pipe: Pipeline, mode: str) -> np.ndarray:
    reference = generate_seeds(pipe.params) if mode == "informed" else None
    return null_accuracies(pipe.key, pipe.params, pipe.estimator, pipe.schedule, pipe.config.null_samples, mode,
                           reference)


def _load_input(path) -> np.ndarray:
    try:
        return load_tensor(path)
    except (DataError, OSError) as exc:
        raise UsageError(f"malformed input: {exc}") from None


def _read_input(path, pipe: Pipeline) -> np.ndarray:
    x = _load_input(path)
    if x.shape[1:] != (pipe.params.W, pipe.params.F):
        raise UsageError(f"input windows are {x.shape[1:]}, model expects {(pipe.params.W, pipe.params.F)}")
    return x


def _emit(obj, out: Path, name: str) -> None:
    text = json.dumps(obj, indent=2)
    atomic_write_bytes(out / name, (text + "\n").encode())
    print(text)


# ------------------------------------------------------------------ commands


def cmd_keygen(args, cfg: RunConfig) -> int:
    text = WatermarkKey.generate().hex() + "\n"
    if args.output:
        atomic_write_bytes(args.output, text.encode())
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig) -> int:
    pipe = build_pipeline(cfg)
    x0, seeds = generate_watermarked(pipe, cfg.batch, args.threads)
    out = Path(cfg.out)
    save_tensor(x0, out / "samples.twk1")
    buf = _io.StringIO()
    np.savetxt(buf, seeds.seeds, fmt="%d", delimiter=",")
    atomic_write_bytes(out / "seeds.csv", buf.getvalue().encode())
    print(json.dumps({"samples": str(out / "samples.twk1"), "seeds": str(out / "seeds.csv"),
                      "shape": list(x0.shape)}))
    return EXIT_OK


def cmd_detect(args, cfg: RunConfig) -> int:
    pipe = build_pipeline(cfg)
    x0 = _read_input(args.input, pipe)
    acc = _accuracies(pipe, x0, args.mode, args.threads)
    fprs = (args.fpr,) if args.fpr is not None else (0.001, 0.01, 0.1)
    report = build_report(acc, _baseline(pipe, args.mode), args.mode, args.samples_per_record, fprs)
    doc = report.to_dict()
    doc["detected"] = bool(report.z >= cfg.z_threshold)
    _emit(doc, Path(cfg.out), "report.json")
    return EXIT_OK if doc["detected"] else EXIT_NEGATIVE


def cmd_attack(args, cfg: RunConfig) -> int:
    spec = AttackSpec.parse(args.attack or cfg.attack)
    if spec.kind == "reconstruct":
        pipe = build_pipeline(cfg)
        y = apply_attack(_read_input(args.input, pipe), spec, pipe.estimator, pipe.schedule)
    else:
        y = apply_attack(_load_input(args.input), spec)
    dest = Path(args.output) if args.output else Path(cfg.out) / f"attacked_{spec.kind}_{spec.strength:g}.twk1"
    save_tensor(y, dest)
    print(json.dumps({"attack": str(spec), "output": str(dest), "shape": list(y.shape)}))
    return EXIT_OK


def bench_table(pipe: Pipeline, batch: int, threads: int = 1, mode: str = "blind") -> dict[str, float]:
    """Z-score per attack column on one watermarked batch and one baseline."""
    x0, _ = generate_watermarked(pipe, batch, threads)
    baseline = _baseline(pipe, mode)
    row = {}
    for name, text in BENCH_ATTACKS:
        attacked = apply_attack(x0, AttackSpec.parse(text), pipe.estimator, pipe.schedule)
        row[name] = z_score(_accuracies(pipe, attacked, mode, threads), baseline, mode).z
    return row


def cmd_bench(args, cfg: RunConfig) -> int:
    pipe = build_pipeline(cfg)
    row = bench_table(pipe, cfg.batch, args.threads, args.mode)
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([n for n, _ in BENCH_ATTACKS])
    writer.writerow([f"{row[n]:.4f}" for n, _ in BENCH_ATTACKS])
    atomic_write_bytes(Path(cfg.out) / "bench.csv", buf.getvalue().encode())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    key = cfg.master_key() if cfg.key else None
    rows = simulation_sweep(args.sigmas, args.levels, not args.no_transposed, W=cfg.W, F=args.features,
                            H=cfg.H, trials=args.trials, samples_per_trial=args.samples, mean_std=args.mean_std,
                            key=key)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "simulation.csv")
    for r in rows:
        print(f"L={r['L']} sigma={r['sigma']:g} transposed={r['transposed']} acc={r['mean_acc']:.4f}")
    return EXIT_OK


def cmd_bound_check(args, cfg: RunConfig) -> int:
    pipe = build_pipeline(cfg)
    x_T = pipe.key.prf("bound-check").normal_block(("x_T",), (args.trials, pipe.params.W, pipe.params.F))
    report = verify_bound(x_T, pipe.estimator, pipe.schedule)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_bound_csv(report, out / "bound.csv")
    _emit({"trials": report.trials, "satisfied": report.satisfied_count, "log10_c_T": report.log10_c_T,
           "max_error": float(report.measured_delta_T.max()),
           "max_exact_relative_error": float(report.exact_delta_T.max())}, out, "bound.json")
    return EXIT_OK if report.satisfied else EXIT_NEGATIVE


# ------------------------------------------------------------------ parser


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--key", help="master key as 64 hex characters (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker threads over the batch")

    parser = argparse.ArgumentParser(prog="timewak", description="Time-series diffusion watermarking.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", parents=[common], help="print a fresh 256-bit master key")
    p.add_argument("-o", "--output", help="write the key to this file instead of stdout")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("sample", parents=[common], help="generate a watermarked batch")
    p.set_defaults(func=cmd_sample)

    for name, func, helptext in (("detect", cmd_detect, "detect the watermark in a TWK1 batch"),
                                 ("bench", cmd_bench, "Z-score table over post-editing attacks")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        if name == "detect":
            p.add_argument("input", help="TWK1 tensor file")
            p.add_argument("--fpr", type=float, help="report TPR at this false positive rate only")
            p.add_argument("--samples-per-record", type=int, default=1)
        p.add_argument("--mode", choices=("blind", "informed"), default="blind")
        p.set_defaults(func=func)

    p = sub.add_parser("attack", parents=[common], help="apply a post-editing attack to a TWK1 batch")
    p.add_argument("input")
    p.add_argument("--attack", help="kind:strength, e.g. random_crop:0.3 or offset:5%%")
    p.add_argument("-o", "--output", help="destination file (default: <out>/attacked_<kind>_<p>.twk1)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("simulate", parents=[common], help="noise-only bit accuracy sweep")
    p.add_argument("--sigmas", type=_floats, default=[0.0, 0.5, 1.0, 2.0])
    p.add_argument("--levels", type=_ints, default=[2, 3, 4])
    p.add_argument("--features", type=int, default=10)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--mean-std", type=float, default=5.0)
    p.add_argument("--no-transposed", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bound-check", parents=[common], help="check the x1:=x0 inversion error bound")
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_bound_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        overrides = {k: v for k, v in (("key", args.key), ("out", args.out)) if v}
        cfg = replace(cfg, **overrides)
        if args.threads < 1 or getattr(args, "samples_per_record", 1) < 1:
            raise UsageError("--threads and --samples-per-record must be >= 1")
        if getattr(args, "fpr", None) is not None and not 0 < args.fpr < 1:
            raise UsageError("--fpr must lie in (0, 1)")
        return args.func(args, cfg)
    except (UsageError, InvalidRangeError) as exc:
        print(f"timewak: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TimeWakError, OSError) as exc:
        print(f"timewak: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
