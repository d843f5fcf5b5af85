"""Command-line entry point tying the codecs and protocols into experiments.

Subcommands mirror the experiment families: ``codebook`` (build/cache
Lloyd-Max tables), ``quantize`` (write code files), ``eval-ip`` (error
distributions), ``eval-recall`` (Recall@1@k curves), ``bench-time``
(rotation-inclusive quantization timing), and ``mixed`` (outlier-aware
mixed-bitwidth round trips).

Every run persists its fully resolved configuration (seeds included) to
``<out>/config.json``; re-running with ``--config`` on that file reproduces
all numeric outputs bit-identically, timing excepted.  Exit codes: 0 success,
2 invalid arguments, 3 format error, 4 failed ``--assert`` check.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from . import mixed_precision as mp
from . import rabitq as rq
from . import turboquant as tq
from .data import generate_synthetic, load_matrix
from .errors import FormatError
from .rotation import save_rotation

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FORMAT = 3
EXIT_ASSERT = 4


class AssertionFailed(RuntimeError):
    """Raised when an --assert mode check fails (exit code 4)."""


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _persist_config(args, outdir: Path, derived: dict) -> dict:
    config = {k: v for k, v in vars(args).items()
              if k not in ("func",) and not k.startswith("_")}
    config["derived_seeds"] = derived
    resolved = {"command": args.command, "config": config,
                "environment": {"vqbench": __version__, "numpy": np.__version__,
                                "git": _git_describe()}}
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    print(json.dumps(resolved["config"], sort_keys=True))
    return resolved


def _write_json(outdir: Path, resolved: dict, results) -> None:
    doc = dict(resolved)
    doc["results"] = results
    (outdir / "results.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_dataset(args) -> np.ndarray:
    if args.data is not None:
        _, mat = load_matrix(args.data)
        return mat
    return generate_synthetic(args.n, args.dim, args.distribution, args.data_seed)


def _strategy_from_args(args) -> rq.RescaleStrategy:
    name = getattr(args, "strategy", "exhaustive")
    if name == "exhaustive":
        return rq.ExhaustiveCritical()
    if name == "expected":
        return rq.ExpectedFactor(samples=args.expected_samples)
    if name == "candidates":
        if not getattr(args, "candidates", None):
            raise ValueError("--candidates is required with --strategy candidates")
        vals = tuple(float(v) for v in args.candidates.split(","))
        return rq.CandidateSet(candidates=vals)
    raise ValueError(f"unknown strategy {name!r}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_codebook(args) -> int:
    outdir = Path(args.out)
    resolved = _persist_config(args, outdir, {})
    cache = args.cache_dir or str(outdir / "codebooks")
    book = tq.load_or_build_codebook(args.dim, args.bits, cache_dir=cache,
                                     tol=args.tol, max_iter=args.max_iter)
    rows = [(i, c) for i, c in enumerate(book.centroids)]
    write_csv(outdir / "results.csv", ["index", "centroid"], rows)
    _write_json(outdir, resolved, {"dim": book.dim_context, "bits": book.bits,
                                   "converged": book.converged,
                                   "centroids": [float(c) for c in book.centroids]})
    print(f"codebook dim={book.dim_context} bits={book.bits} "
          f"converged={book.converged} cached in {cache}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    outdir = Path(args.out)
    derived = {"rotation_seed": args.seed, "sketch_seed": args.seed + ev.SKETCH_SEED_OFFSET}
    resolved = _persist_config(args, outdir, derived)
    mat = _load_dataset(args)
    cache = args.cache_dir or str(outdir / "codebooks")
    pipe = ev.make_pipeline(args.method, args.bits, mat.shape[1],
                            rotation_kind=args.rotation, rotation_seed=args.seed,
                            strategy=_strategy_from_args(args),
                            sketch_seed=derived["sketch_seed"], cache_dir=cache)
    batch = pipe.quantize(pipe.rotate(mat))
    save_rotation(pipe.rotation, outdir / "rotation.rot")
    codes_path = outdir / "codes.bin"
    if args.method.startswith("rabitq"):
        rq.write_rabitq_codes(codes_path, batch)
    elif args.method == "tq-mse":
        tq.write_tq_mse_codes(codes_path, batch)
    else:
        tq.write_tq_prod_codes(codes_path, batch)
    size = codes_path.stat().st_size
    _write_json(outdir, resolved, {"n": mat.shape[0], "dim": mat.shape[1],
                                   "work_dim": pipe.work_dim, "code_bytes": size})
    print(f"quantized n={mat.shape[0]} dim={mat.shape[1]} -> {codes_path} ({size} bytes)")
    return EXIT_OK


def cmd_eval_ip(args) -> int:
    outdir = Path(args.out)
    methods = args.methods.split(",")
    bits_list = [int(b) for b in args.bits.split(",")]
    derived = {
        "rotation_seeds": [args.seed + ev.ROTATION_SEED_OFFSET + s for s in range(args.runs)],
        "sketch_seeds": [args.seed + ev.SKETCH_SEED_OFFSET + s for s in range(args.runs)],
        "pair_seeds": [args.seed + ev.PAIR_SEED_OFFSET + 2 * s for s in range(args.runs)],
    }
    resolved = _persist_config(args, outdir, derived)
    cache = args.cache_dir or str(outdir / "codebooks")
    pairs = None
    if args.data is not None:
        if args.queries is None:
            raise ValueError("--queries is required when --data is given")
        pairs = ev.build_pairs_from_data(load_matrix(args.data)[1],
                                         load_matrix(args.queries)[1], args.n_pairs)
    cells = ev.run_ip_error_experiment(methods, bits_list, dim=args.dim,
                                       n_pairs=args.n_pairs, n_seeds=args.runs,
                                       base_seed=args.seed, rotation_kind=args.rotation,
                                       strategy=_strategy_from_args(args),
                                       cache_dir=cache, pairs=pairs)
    rows = []
    summary = {}
    for (method, bits), cell in cells.items():
        for s, stats in enumerate(cell.per_seed):
            rows.append((method, bits, s, stats.count, stats.mean, stats.std,
                         stats.max_abs, stats.quantiles[0][1], stats.quantiles[1][1],
                         stats.quantiles[2][1]))
        pooled = cell.pooled
        summary[f"{method}@{bits}"] = {
            "count": pooled.count, "mean": pooled.mean, "std": pooled.std,
            "max_abs": pooled.max_abs,
            "quantiles": {str(p): v for p, v in pooled.quantiles},
        }
    write_csv(outdir / "results.csv",
              ["method", "bits", "seed", "count", "mean", "std", "max_abs",
               "q50", "q90", "q99"], rows)
    _write_json(outdir, resolved, summary)
    for key, stats in summary.items():
        print(f"{key}: mean={stats['mean']:.3e} std={stats['std']:.3e} "
              f"max={stats['max_abs']:.3e}")
    if args.assert_checks:
        for (method, bits), cell in cells.items():
            if not method.endswith("prod"):
                continue
            limit = 4.0 * cell.pooled.std / math.sqrt(cell.pooled.count)
            if abs(cell.pooled.mean) > limit:
                raise AssertionFailed(
                    f"{method}@{bits}: |mean error| {abs(cell.pooled.mean):.3e} "
                    f"exceeds 4 SE {limit:.3e}")
    return EXIT_OK


def cmd_eval_recall(args) -> int:
    outdir = Path(args.out)
    methods = args.methods.split(",")
    k_values = [int(k) for k in args.k.split(",")]
    derived = {
        "rotation_seeds": [args.seed + ev.ROTATION_SEED_OFFSET + r for r in range(args.runs)],
        "sketch_seeds": [args.seed + ev.SKETCH_SEED_OFFSET + r for r in range(args.runs)],
        "data_seeds": {"base": args.seed, "queries": args.seed + 1},
    }
    resolved = _persist_config(args, outdir, derived)
    cache = args.cache_dir or str(outdir / "codebooks")
    base = load_matrix(args.data)[1] if args.data is not None else None
    queries = load_matrix(args.queries)[1] if args.queries is not None else None
    results = ev.run_recall_experiment(methods, bits=args.bits, dim=args.dim,
                                       n_base=args.n_base, n_queries=args.n_queries,
                                       k_values=k_values, runs=args.runs,
                                       base_seed=args.seed, rotation_kind=args.rotation,
                                       strategy=_strategy_from_args(args),
                                       cache_dir=cache, threads=args.threads,
                                       base=base, queries=queries)
    rows = []
    summary = {}
    for method, res in results.items():
        for k, mean, std in zip(res.k_values, res.recall, res.std_per_k):
            rows.append((method, args.bits, k, mean, std, res.runs))
        summary[method] = {"k_values": res.k_values, "recall": res.recall,
                           "std_per_k": res.std_per_k, "runs": res.runs}
        curve = " ".join(f"{k}:{r:.4f}" for k, r in zip(res.k_values, res.recall))
        print(f"{method}@{args.bits}: {curve}")
    write_csv(outdir / "results.csv",
              ["method", "bits", "k", "recall_mean", "recall_std", "runs"], rows)
    _write_json(outdir, resolved, summary)
    if args.assert_checks:
        for method, res in results.items():
            deltas = np.diff(res.per_run, axis=1)
            if np.any(deltas < 0):
                raise AssertionFailed(f"{method}: recall not monotone in k")
    return EXIT_OK


def cmd_bench_time(args) -> int:
    outdir = Path(args.out)
    derived = {"rotation_seed": args.seed, "sketch_seed": args.seed + ev.SKETCH_SEED_OFFSET}
    resolved = _persist_config(args, outdir, derived)
    mat = _load_dataset(args)
    cache = args.cache_dir or str(outdir / "codebooks")
    pipe = ev.make_pipeline(args.method, args.bits, mat.shape[1],
                            rotation_kind=args.rotation, rotation_seed=args.seed,
                            strategy=_strategy_from_args(args),
                            sketch_seed=derived["sketch_seed"], cache_dir=cache)
    timing = ev.bench_quantize(mat, pipe, repeats=args.repeats, threads=args.threads)
    rows = [(timing.method, timing.bits, timing.rotation_kind, timing.n, timing.dim,
             timing.repeats, timing.min_seconds, timing.median_seconds,
             timing.threads, timing.hardware)]
    write_csv(outdir / "results.csv",
              ["method", "bits", "rotation", "n", "dim", "repeats", "min_seconds",
               "median_seconds", "threads", "hardware"], rows)
    _write_json(outdir, resolved, {
        "seconds": timing.seconds, "quantize_seconds": timing.quantize_seconds,
        "min_seconds": timing.min_seconds, "median_seconds": timing.median_seconds,
        "threads": timing.threads, "hardware": timing.hardware})
    print(f"{timing.method}@{timing.bits} rotation={timing.rotation_kind} "
          f"n={timing.n} dim={timing.dim}: median {timing.median_seconds:.4f}s "
          f"(rotation included), min {timing.min_seconds:.4f}s")
    return EXIT_OK


def cmd_mixed(args) -> int:
    outdir = Path(args.out)
    derived = {"data_seed": args.data_seed, "codec_seed": args.seed}
    resolved = _persist_config(args, outdir, derived)
    keys = generate_synthetic(args.n, args.head_dim, "gaussian", args.data_seed)
    split = mp.select_outlier_channels(keys, args.outlier_count)
    cache = args.cache_dir or str(outdir / "codebooks")
    kind = {"rabitq": "rabitq", "tq-mse": "tq-mse"}[args.codec]
    codec = mp.MixedPrecisionCodec(split, args.hi_bits, args.lo_bits, kind,
                                   seed=args.seed, cache_dir=cache)
    codes = codec.quantize_rows(keys)
    recon = codec.reconstruct_rows(codes)
    mse = float(np.mean((keys - recon) ** 2))
    eff = mp.effective_bitwidth(split, args.hi_bits, args.lo_bits)
    blob = mp.serialize_mixed(codes[0])
    rows = [(args.codec, args.hi_bits, args.lo_bits, args.outlier_count,
             args.head_dim, eff, len(blob), mse)]
    write_csv(outdir / "results.csv",
              ["codec", "hi_bits", "lo_bits", "outliers", "head_dim",
               "effective_bitwidth", "bytes_per_vector", "mse"], rows)
    _write_json(outdir, resolved, {"effective_bitwidth": eff,
                                   "bytes_per_vector": len(blob), "mse": mse})
    print(f"mixed {args.codec} hi={args.hi_bits} lo={args.lo_bits}: "
          f"effective {eff} bits/dim, {len(blob)} bytes/vector, mse {mse:.3e}")
    if args.assert_checks:
        numerator = (len(split.outlier_idx) * args.hi_bits
                     + len(split.regular_idx) * args.lo_bits + mp.SCALE_BITS_TOTAL)
        n_hi, n_lo = len(split.outlier_idx), len(split.regular_idx)
        expect = ((n_hi * args.hi_bits + 7) // 8 + (n_lo * args.lo_bits + 7) // 8 + 4)
        if len(blob) != expect or len(blob) * 8 < numerator:
            raise AssertionFailed("serialized size does not match the bit accounting")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(p, with_threads=True):
    p.add_argument("--out", default="vqbench-out", help="output directory")
    p.add_argument("--config", default=None,
                   help="JSON config file; explicit flags override its values")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--cache-dir", default=None, help="Lloyd-Max codebook cache dir")
    if with_threads:
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)


def _add_strategy(p):
    p.add_argument("--strategy", choices=["exhaustive", "candidates", "expected"],
                   default="exhaustive", help="rescale-factor strategy (rabitq only)")
    p.add_argument("--candidates", default=None,
                   help="comma-separated rescale factors for --strategy candidates")
    p.add_argument("--expected-samples", type=int, default=4096)


def _add_dataset(p):
    p.add_argument("--data", default=None, help=".fvecs or raw-f32 matrix file")
    p.add_argument("--n", type=int, default=10000, help="synthetic row count")
    p.add_argument("--dim", type=int, default=128, help="synthetic dimension")
    p.add_argument("--distribution", choices=["gaussian", "unit-sphere"],
                   default="gaussian")
    p.add_argument("--data-seed", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqbench",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("codebook", help="build and cache a Lloyd-Max codebook")
    _add_common(p, with_threads=False)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--tol", type=float, default=tq.DEFAULT_TOL)
    p.add_argument("--max-iter", type=int, default=tq.DEFAULT_MAX_ITER)
    p.set_defaults(func=cmd_codebook)

    p = sub.add_parser("quantize", help="quantize a dataset to a code file")
    _add_common(p, with_threads=False)
    _add_dataset(p)
    _add_strategy(p)
    p.add_argument("--method", choices=list(ev.METHODS), required=True)
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--rotation", choices=["dense", "fast"], default="dense")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval-ip", help="inner-product error distributions")
    _add_common(p, with_threads=True)
    _add_strategy(p)
    p.add_argument("--methods", default="rabitq-prod,tq-prod")
    p.add_argument("--bits", default="1,2,4,8", help="comma-separated bit widths")
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--n-pairs", type=int, default=2000)
    p.add_argument("--runs", type=int, default=20, help="rotation seeds")
    p.add_argument("--rotation", choices=["dense", "fast"], default="dense")
    p.add_argument("--data", default=None, help="optional base matrix file")
    p.add_argument("--queries", default=None, help="query matrix file (with --data)")
    p.add_argument("--assert", dest="assert_checks", action="store_true",
                   help="exit 4 unless prod estimators are empirically unbiased")
    p.set_defaults(func=cmd_eval_ip)

    p = sub.add_parser("eval-recall", help="Recall@1@k protocol")
    _add_common(p, with_threads=True)
    _add_strategy(p)
    p.add_argument("--methods", default="rabitq-prod,tq-mse,tq-prod")
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--n-base", type=int, default=10000)
    p.add_argument("--n-queries", type=int, default=200)
    p.add_argument("--k", default="1,2,4,8,16,32,64")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--rotation", choices=["dense", "fast"], default="dense")
    p.add_argument("--data", default=None, help="optional base matrix file")
    p.add_argument("--queries", default=None, help="optional query matrix file")
    p.add_argument("--assert", dest="assert_checks", action="store_true",
                   help="exit 4 unless recall is monotone in k for every run")
    p.set_defaults(func=cmd_eval_recall)

    p = sub.add_parser("bench-time", help="rotation-inclusive quantization timing")
    _add_common(p, with_threads=True)
    _add_dataset(p)
    _add_strategy(p)
    p.add_argument("--method", choices=list(ev.METHODS), default="rabitq-prod")
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--rotation", choices=["dense", "fast"], default="dense")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench_time)

    p = sub.add_parser("mixed", help="outlier-aware mixed-bitwidth round trip")
    _add_common(p, with_threads=False)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--head-dim", type=int, default=128)
    p.add_argument("--outlier-count", type=int, default=32)
    p.add_argument("--hi-bits", type=int, default=3)
    p.add_argument("--lo-bits", type=int, default=2)
    p.add_argument("--codec", choices=["rabitq", "tq-mse"], default="rabitq")
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--assert", dest="assert_checks", action="store_true",
                   help="exit 4 unless serialized bytes match the bit accounting")
    p.set_defaults(func=cmd_mixed)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, args: argparse.Namespace,
                       argv: list[str]) -> argparse.Namespace:
    """Overlay values from --config for every option the user left at its
    parser default (flags given explicitly win)."""
    if not getattr(args, "config", None):
        return args
    doc = json.loads(Path(args.config).read_text())
    stored = doc.get("config", doc)
    base = argparse.Namespace(**vars(args))
    flag_for = {"assert_checks": "--assert"}
    for key, value in stored.items():
        if key in ("command", "config", "derived_seeds", "func"):
            continue
        if not hasattr(base, key):
            continue
        flag = flag_for.get(key, "--" + key.replace("_", "-"))
        explicitly_set = any(a == flag or a.startswith(flag + "=") for a in argv)
        if not explicitly_set:
            setattr(base, key, value)
    return base


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(parser, args, argv)
        return args.func(args)
    except AssertionFailed as exc:
        print(f"assert failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ValueError, FileNotFoundError) as exc:
        print(f"invalid arguments: {exc}", file=sys.stderr)
        return EXIT_INVALID


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
