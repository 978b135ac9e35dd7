"""``vmamba`` command line: verify, bench, count, analyze, export.

Exit codes: 0 success, 1 a verified property failed, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import contextlib
import os
import sys
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis
from .model import (PRESETS, ModelConfig, build_model, cost_inventory, count_flops, load_config,
                    model_forward, model_from_bundle)
from .ss2d import InitKind, InitScheme
from .tensor import VMTBError, load_bundle, resolve_dtype, save_bundle
from .verify import SUITES, run_suite

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MIN_REPS = 5
WARMUPS = 2
BENCH_COLUMNS = ("resolution", "tokens", "wall_ns_mean", "wall_ns_std", "flops")


class UsageError(Exception):
    pass


@dataclass
class BenchRecord:
    resolution: int
    tokens: int
    wall_ns_mean: float
    wall_ns_std: float
    flops: int
    wall_ns_median: float = 0.0

    def csv_row(self) -> str:
        return f"{self.resolution},{self.tokens},{self.wall_ns_mean:.1f},{self.wall_ns_std:.1f},{self.flops}"


def resolve_config(name_or_path: Optional[str]) -> ModelConfig:
    """A preset name (``vmamba-t`` ...) or a path to a ``key = value`` file."""
    if name_or_path is None:
        raise UsageError("--config is required")
    if name_or_path.lower() in PRESETS:
        return PRESETS[name_or_path.lower()]()
    try:
        return load_config(name_or_path)
    except OSError as exc:
        raise UsageError(f"cannot read config {name_or_path!r}: {exc.strerror}") from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad config {name_or_path!r}: {exc}") from exc


def parse_int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma separated list of integers, got {text!r}") from exc
    if not vals:
        raise UsageError("empty list")
    return vals


@contextlib.contextmanager
def _output(path: Optional[str]):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w") as fh:
            yield fh


def _threads(n: Optional[int]):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return threadpool_limits(limits=n)


# --------------------------------------------------------------------------- commands


def cmd_verify(args) -> int:
    if args.suite != "all" and args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join([*SUITES, 'all'])}")
    reports = run_suite(args.suite, seed=args.seed, dtype=args.dtype)
    text = "\n".join(r.text() for r in reports) + "\n"
    with _output(args.out) as fh:
        fh.write(text)
    if args.out not in (None, "-"):
        sys.stdout.write(text)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares line y = slope * x + icpt; returns (slope, icpt, R^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, icpt = np.polyfit(x, y, 1)
    ss_res = float(((y - (slope * x + icpt)) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return float(slope), float(icpt), 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def bench(config: ModelConfig, resolutions, reps: int, seed: int = 0, dtype=np.float32) -> list[BenchRecord]:
    if reps < MIN_REPS:
        raise UsageError(f"--reps must be at least {MIN_REPS}, got {reps}")
    for r in resolutions:
        if r <= 0 or r % 32:
            raise UsageError(f"resolution {r} is not a positive multiple of 32")
    model = build_model(config, InitScheme(seed=seed), dtype=dtype)
    rng = np.random.default_rng(seed)
    images = [rng.standard_normal((3, res, res)).astype(dtype) for res in resolutions]
    for image in images:
        for _ in range(WARMUPS):
            model_forward(model, image)
    # round-robin over resolutions so a background burst is spread across all points, not one
    times = np.zeros((reps, len(images)))
    for i in range(reps):
        for j, image in enumerate(images):
            t0 = time.perf_counter_ns()
            model_forward(model, image)
            times[i, j] = time.perf_counter_ns() - t0
    return [BenchRecord(res, (res // 4) ** 2, float(t.mean()), float(t.std()), count_flops(config, (res, res)),
                        float(np.median(t))) for res, t in zip(resolutions, times.T)]


def format_bench(records: list[BenchRecord]) -> str:
    lines = [",".join(BENCH_COLUMNS)] + [r.csv_row() for r in records]
    if len(records) >= 2:
        slope, icpt, r2 = linear_fit([r.tokens for r in records], [r.wall_ns_mean for r in records])
        lines.append(f"# fit wall_ns_mean = {slope:.3f} * tokens + {icpt:.1f}")
        lines.append(f"# r2 = {r2:.6f}")
    lines.append("# median_ns " + " ".join(f"{r.resolution}:{r.wall_ns_median:.1f}" for r in records))
    return "\n".join(lines) + "\n"


def cmd_bench(args) -> int:
    config = resolve_config(args.config)
    resolutions = parse_int_list(args.resolutions)
    with _threads(args.threads):
        records = bench(config, resolutions, args.reps, args.seed, resolve_dtype(args.dtype))
    with _output(args.out) as fh:
        fh.write(format_bench(records))
    return EXIT_OK


def cmd_count(args) -> int:
    config = resolve_config(args.config)
    res = parse_int_list(args.resolutions)[0]
    try:
        inv = cost_inventory(config, (res, res))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    total_p = sum(c.params for c in inv)
    total_f = sum(c.flops for c in inv)
    human = [f"{c.component:<12} params {c.params / 1e6:9.3f}M   flops {c.flops / 1e9:9.4f}G" for c in inv]
    human.append(f"{'total':<12} params {total_p / 1e6:9.3f}M   flops {total_f / 1e9:9.4f}G  (at {res}x{res})")
    csv = ["component,params,flops"] + [f"{c.component},{c.params},{c.flops}" for c in inv]
    csv.append(f"total,{total_p},{total_f}")
    print("\n".join(human))
    with _output(args.out) as fh:
        if fh is sys.stdout:
            fh.write("\n")
        fh.write("\n".join(csv) + "\n")
    return EXIT_OK


def _load_model(args):
    config = resolve_config(args.config)
    if args.weights is None:
        raise UsageError("--weights is required")
    try:
        bundle = load_bundle(args.weights)
    except OSError as exc:
        raise UsageError(f"cannot read weights {args.weights!r}: {exc.strerror}") from exc
    except VMTBError as exc:
        raise UsageError(f"invalid weights file {args.weights!r}: {exc}") from exc
    try:
        return model_from_bundle(config, bundle, dtype=np.float64)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"weights do not match the config: {exc}") from exc


def analysis_filenames(kind: str, layer: int, query=None) -> str:
    """Output stem: ``activation_L{layer}_q{r}x{c}``, ``diagonal_L{layer}`` or ``erf``."""
    if kind == "activation":
        return f"activation_L{layer}_q{query[0]}x{query[1]}"
    if kind == "diagonal":
        return f"diagonal_L{layer}"
    return "erf"


def cmd_analyze(args) -> int:
    model = _load_model(args)
    if args.image is None:
        raise UsageError("--image is required")
    try:
        image = analysis.read_ppm(args.image)
    except OSError as exc:
        raise UsageError(f"cannot read image {args.image!r}: {exc.strerror}") from exc
    except ValueError as exc:
        raise UsageError(f"invalid image {args.image!r}: {exc}") from exc
    if image.shape[1] % 32 or image.shape[2] % 32:
        raise UsageError(f"image size {image.shape[2]}x{image.shape[1]} is not divisible by 32")
    query = None
    try:
        if args.kind == "activation":
            query = tuple(parse_int_list(args.query))
            if len(query) != 2:
                raise UsageError("--query expects ROW,COL")
            m = analysis.activation_map(model, image, args.layer, query, args.matrix, args.lane)
        elif args.kind == "diagonal":
            m = analysis.diagonal_map(model, image, args.layer, args.lane, args.matrix)
        else:
            if not args.epsilon > 0:
                raise UsageError("--epsilon must be positive")
            m = analysis.erf_map(model, image, args.epsilon)
    except IndexError as exc:
        raise UsageError(str(exc)) from exc
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, analysis_filenames(args.kind, args.layer, query))
    analysis.write_pgm(m, stem + ".pgm")
    analysis.write_csv(m, stem + ".csv")
    for k, comp in enumerate(m.components if args.kind != "erf" else []):
        analysis.write_csv(analysis.MapImage(comp, f"{m.tag}:path{k}"), f"{stem}_path{k}.csv")
    print(f"wrote {stem}.pgm and {stem}.csv")
    return EXIT_OK


def cmd_export(args) -> int:
    config = resolve_config(args.config)
    if args.out is None:
        raise UsageError("--out is required")
    model = build_model(config, InitScheme(InitKind(args.scheme), args.seed), dtype=resolve_dtype(args.dtype))
    try:
        save_bundle(model.to_bundle(), args.out)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out!r}: {exc.strerror}") from exc
    print(f"wrote {model.num_params()} parameters to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmamba", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dtype_default="f64"):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--dtype", choices=("f32", "f64"), default=dtype_default)
        sp.add_argument("--out", default=None, help="output file (default stdout)")

    v = sub.add_parser("verify", help="run a property suite")
    v.add_argument("--suite", required=True, help=f"one of {', '.join(SUITES)}, or all")
    common(v)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="time model_forward across resolutions")
    b.add_argument("--config", required=True)
    b.add_argument("--resolutions", default="224,288,384,512")
    b.add_argument("--reps", type=int, default=MIN_REPS)
    b.add_argument("--threads", type=int, default=None)
    common(b, "f32")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("count", help="parameter and FLOP breakdown")
    c.add_argument("--config", required=True)
    c.add_argument("--resolutions", default="224", help="input side (first value is used)")
    c.add_argument("--out", default=None, help="CSV breakdown file (default stdout)")
    c.set_defaults(func=cmd_count)

    a = sub.add_parser("analyze", help="activation / diagonal / ERF maps")
    a.add_argument("--config", required=True)
    a.add_argument("--weights", required=True)
    a.add_argument("--image", required=True, help="binary PPM (P6)")
    a.add_argument("--kind", choices=("activation", "diagonal", "erf"), required=True)
    a.add_argument("--layer", type=int, default=0, help="VSS block index over all stages")
    a.add_argument("--query", default="0,0", help="ROW,COL in the layer's grid")
    a.add_argument("--matrix", choices=("qk", "qwkw"), default="qwkw")
    a.add_argument("--lane", type=int, default=None, help="inner channel (default: mean over lanes)")
    a.add_argument("--epsilon", type=float, default=1e-3)
    a.add_argument("--out", default=".", help="output directory")
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("export", help="write a freshly initialized model as VMTB")
    e.add_argument("--config", required=True)
    e.add_argument("--scheme", choices=[k.value for k in InitKind], default="mamba")
    common(e, "f32")
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vmamba {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
