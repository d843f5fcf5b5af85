"""Measurement protocols: inner-product error statistics, exact-vs-quantized
top-k recall, variance-based tail diagnostics, the constant-free optimal
bit-width reference curve, and wall-clock quantization timing.

Experiments fan per-query work out across a thread pool but always gather and
reduce results in fixed query order, so every statistic is independent of the
worker count.  All derived seeds (per-run rotation and sketch seeds) are
simple documented offsets from the base seed and are recorded alongside the
results.
"""

from __future__ import annotations

import math
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rabitq as rq
from . import turboquant as tq
from .data import generate_synthetic
from .rotation import (FastRotationSpec, GaussianSketch, RotationSpec,
                       rotate_rows, sample_dense_rotation, sample_fast_rotation,
                       sample_gaussian_sketch, working_dim)

METHODS = ("rabitq-prod", "rabitq-mse", "tq-prod", "tq-mse")

# Derived-seed offsets (added to the base seed); recorded in experiment output.
ROTATION_SEED_OFFSET = 1000
SKETCH_SEED_OFFSET = 2000
PAIR_SEED_OFFSET = 3000

_QUERY_CHUNK = 32  # fixed chunk size so results never depend on thread count


# ---------------------------------------------------------------------------
# Statistics primitives
# ---------------------------------------------------------------------------


@dataclass
class ErrorStats:
    count: int
    mean: float
    std: float  # population convention
    max_abs: float
    quantiles: list[tuple[float, float]]


def ip_error_stats(estimates, truths,
                   quantile_levels=(0.5, 0.9, 0.99)) -> ErrorStats:
    """Summarize estimate - truth errors (population std, error quantiles)."""
    est = np.asarray(estimates, dtype=np.float64).ravel()
    tru = np.asarray(truths, dtype=np.float64).ravel()
    if est.shape != tru.shape:
        raise ValueError(f"length mismatch: {est.shape[0]} vs {tru.shape[0]}")
    if est.size == 0:
        raise ValueError("cannot summarize an empty sample")
    errors = est - tru
    qs = np.quantile(errors, quantile_levels)
    return ErrorStats(count=int(errors.size),
                      mean=float(np.mean(errors)),
                      std=float(np.std(errors)),
                      max_abs=float(np.max(np.abs(errors))),
                      quantiles=[(float(p), float(v)) for p, v in zip(quantile_levels, qs)])


def brute_force_topk(base, query, k: int) -> np.ndarray:
    """Exact top-k ids by descending inner product; ties go to the lower id."""
    mat = np.asarray(base, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if mat.ndim != 2 or q.ndim != 1 or mat.shape[1] != q.shape[0]:
        raise ValueError("base must be (n, d) and query length d")
    n = mat.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    scores = mat @ q
    order = np.lexsort((np.arange(n), -scores))
    return order[:k]


def recall_at_1_at_k(exact_top1, approx_topk, k: int) -> float:
    """Fraction of queries whose exact top-1 id shows up in the first k
    entries of the approximate list."""
    exact = np.asarray(exact_top1).ravel()
    if exact.size == 0:
        raise ValueError("empty query set")
    lists = [np.asarray(lst).ravel() for lst in approx_topk]
    if len(lists) != exact.size:
        raise ValueError("one approximate list per query is required")
    hits = 0
    for gid, lst in zip(exact, lists):
        if lst.size < k:
            raise ValueError(f"approximate list shorter than k={k}")
        hits += int(gid in lst[:k])
    return hits / exact.size


def chebyshev_tail_check(errors, thresholds) -> list[tuple[float, float, float]]:
    """Per threshold t: empirical P(|e - mean| >= t) next to the variance bound
    var/t^2.

    Errors are centered by their sample mean first (the bound assumes a
    mean-zero variable), which makes the in-sample inequality deterministic.
    Non-finite values are dropped; having none left is an error.
    """
    errs = np.asarray(errors, dtype=np.float64).ravel()
    errs = errs[np.isfinite(errs)]
    if errs.size == 0:
        raise ValueError("no finite errors to check")
    ts = np.asarray(thresholds, dtype=np.float64).ravel()
    if np.any(ts <= 0.0):
        raise ValueError("thresholds must be positive")
    centered = errs - errs.mean()
    var = float(np.mean(centered ** 2))
    out = []
    for t in ts:
        tail = float(np.mean(np.abs(centered) >= t))
        out.append((float(t), tail, var / float(t) ** 2))
    return out


@dataclass
class TheoryParams:
    eps: float
    delta: float
    dim: int


def optimal_bitwidth_reference(p: TheoryParams) -> float:
    """Constant-free reference curve log2(ln(1/delta) / (dim * eps^2)).

    Valid when (1/eps^2) ln(1/delta) >= dim >= ln(1/delta); the violated
    inequality is named in the error.
    """
    if not 0.0 < p.eps < 1.0 + 1e-12:
        raise ValueError("eps must lie in (0, 1]")
    if not 0.0 < p.delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    log_inv_delta = math.log(1.0 / p.delta)
    if p.dim > log_inv_delta / p.eps ** 2 + 1e-12:
        raise ValueError("violated: (1/eps^2) ln(1/delta) >= dim")
    if p.dim < log_inv_delta - 1e-12:
        raise ValueError("violated: dim >= ln(1/delta)")
    return math.log2(log_inv_delta / (p.dim * p.eps ** 2))


# ---------------------------------------------------------------------------
# Method pipelines
# ---------------------------------------------------------------------------


@dataclass
class QuantizePipeline:
    """One method at one bitwidth, bound to a concrete rotation (and, for the
    sketch-corrected codec, a concrete Gaussian sketch)."""

    method: str
    bits: int
    rotation: RotationSpec | FastRotationSpec
    strategy: rq.RescaleStrategy | None = None
    codebook: tq.ScalarCodebook | None = None
    sketch: GaussianSketch | None = None

    @property
    def work_dim(self) -> int:
        return working_dim(self.rotation)

    def rotate(self, rows) -> np.ndarray:
        return rotate_rows(self.rotation, rows)

    def quantize(self, rotated_rows):
        if self.method in ("rabitq-prod", "rabitq-mse"):
            return rq.rabitq_quantize_batch(rotated_rows, self.bits, self.strategy)
        if self.method == "tq-mse":
            return tq.tq_quantize_mse_batch(rotated_rows, self.codebook)
        if self.method == "tq-prod":
            return tq.tq_quantize_prod_batch(rotated_rows, self.bits, self.codebook,
                                             self.sketch)
        raise ValueError(f"unknown method {self.method!r}")

    def estimate_rows(self, batch, rotated_query_rows) -> np.ndarray:
        """Pairwise estimates: code i against rotated query row i."""
        if self.method == "rabitq-prod":
            return rq.rabitq_estimate_ip_rows(batch, rotated_query_rows, factor="prod")
        if self.method == "rabitq-mse":
            return rq.rabitq_estimate_ip_rows(batch, rotated_query_rows, factor="mse")
        if self.method == "tq-mse":
            return tq.tq_estimate_ip_mse_rows(batch, self.codebook, rotated_query_rows)
        if self.method == "tq-prod":
            return tq.tq_estimate_ip_prod_rows(batch, self.codebook, self.sketch,
                                               rotated_query_rows)
        raise ValueError(f"unknown method {self.method!r}")

    def scorer(self, batch):
        """Closure mapping a chunk of rotated queries (q, d) to an (n, q)
        matrix of estimates, with per-batch matrices precomputed once."""
        c = rq.grid_offset(self.bits)
        if self.method in ("rabitq-prod", "rabitq-mse"):
            u = batch.u.astype(np.float64)
            f = batch.factor_prod if self.method == "rabitq-prod" else batch.factor_mse

            def score(y_rows):
                dots = u @ y_rows.T
                return f[:, None] * (dots - c * y_rows.sum(axis=1)[None, :])

            return score
        if self.method == "tq-mse":
            decoded = self.codebook.centroids[batch.indices]
            norms = batch.norms

            def score(y_rows):
                return norms[:, None] * (decoded @ y_rows.T)

            return score
        if self.method == "tq-prod":
            first = None
            if batch.base is not None:
                first_decoded = self.codebook.centroids[batch.base.indices]
                first = first_decoded
            signs = batch.sign_bits.astype(np.float64)
            coeff = (math.sqrt(math.pi / 2.0) / batch.dim) * batch.norms * batch.residual_norms
            entries_t = self.sketch.entries.T

            def score(y_rows):
                corr = coeff[:, None] * (signs @ (y_rows @ entries_t.T).T)
                if first is None:
                    return corr
                return batch.norms[:, None] * (first @ y_rows.T) + corr

            return score
        raise ValueError(f"unknown method {self.method!r}")


def make_pipeline(method: str, bits: int, dim: int, *, rotation_kind: str = "dense",
                  rotation_seed: int = 0, strategy: rq.RescaleStrategy | None = None,
                  sketch_seed: int = 0, cache_dir=None,
                  fwht_rounds: int = 3) -> QuantizePipeline:
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if rotation_kind == "dense":
        rotation = sample_dense_rotation(dim, rotation_seed)
    elif rotation_kind == "fast":
        rotation = sample_fast_rotation(dim, rotation_seed, fwht_rounds)
    else:
        raise ValueError(f"rotation kind must be dense or fast, got {rotation_kind!r}")
    wdim = working_dim(rotation)
    pipe = QuantizePipeline(method=method, bits=int(bits), rotation=rotation)
    if method.startswith("rabitq"):
        pipe.strategy = strategy if strategy is not None else rq.ExhaustiveCritical()
    elif method == "tq-mse":
        pipe.codebook = tq.load_or_build_codebook(wdim, bits, cache_dir)
    elif method == "tq-prod":
        if bits > 1:
            pipe.codebook = tq.load_or_build_codebook(wdim, bits - 1, cache_dir)
        pipe.sketch = sample_gaussian_sketch(wdim, sketch_seed)
    return pipe


# ---------------------------------------------------------------------------
# Inner-product error experiment
# ---------------------------------------------------------------------------


@dataclass
class IpErrorCell:
    method: str
    bits: int
    per_seed: list[ErrorStats]
    pooled: ErrorStats
    errors: np.ndarray | None = None


def _normalized_rows(mat) -> np.ndarray:
    rows = np.ascontiguousarray(mat, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("user-supplied data contains zero rows")
    return rows / norms


def run_ip_error_trial(method: str, bits: int, *, dim: int, n_pairs: int,
                       rotation_seed: int, pair_seed: int, sketch_seed: int = 0,
                       rotation_kind: str = "dense",
                       strategy: rq.RescaleStrategy | None = None,
                       cache_dir=None, pairs=None) -> np.ndarray:
    """Errors of one method on unit-vector pairs under one rotation.

    Pairs are fresh unit-sphere samples, or caller-supplied (xs, ys) matrices
    (already normalized) when ``pairs`` is given.
    """
    if pairs is None:
        xs = generate_synthetic(n_pairs, dim, "unit-sphere", seed=pair_seed)
        ys = generate_synthetic(n_pairs, dim, "unit-sphere", seed=pair_seed + 1)
    else:
        xs, ys = pairs
    truths = np.einsum("nd,nd->n", xs, ys)
    pipe = make_pipeline(method, bits, xs.shape[1], rotation_kind=rotation_kind,
                         rotation_seed=rotation_seed, strategy=strategy,
                         sketch_seed=sketch_seed, cache_dir=cache_dir)
    batch = pipe.quantize(pipe.rotate(xs))
    estimates = pipe.estimate_rows(batch, pipe.rotate(ys))
    return estimates - truths


def build_pairs_from_data(data, queries, n_pairs: int) -> tuple[np.ndarray, np.ndarray]:
    """Pair row i of a user dataset with query row i (cycled), both normalized."""
    xs = _normalized_rows(data)[:n_pairs]
    qs = _normalized_rows(queries)
    if qs.shape[1] != xs.shape[1]:
        raise ValueError("data and query dimensions differ")
    ys = qs[np.arange(xs.shape[0]) % qs.shape[0]]
    return xs, ys


def run_ip_error_experiment(methods, bits_list, *, dim: int, n_pairs: int,
                            n_seeds: int, base_seed: int = 0,
                            rotation_kind: str = "dense",
                            strategy: rq.RescaleStrategy | None = None,
                            cache_dir=None, pairs=None,
                            keep_errors: bool = False) -> dict[tuple[str, int], IpErrorCell]:
    """Per (method, bits): per-seed error stats plus the pooled sample.

    With user-supplied ``pairs`` the same vectors are reused for every seed
    and only the rotation (and sketch) randomness varies; synthetic pairs are
    redrawn per seed.
    """
    if n_seeds < 1:
        raise ValueError("need at least one rotation seed")
    if pairs is None and n_pairs < 1:
        raise ValueError("need at least one pair")
    results: dict[tuple[str, int], IpErrorCell] = {}
    for method in methods:
        for bits in bits_list:
            per_seed = []
            pools = []
            for s in range(n_seeds):
                errors = run_ip_error_trial(
                    method, bits, dim=dim, n_pairs=n_pairs,
                    rotation_seed=base_seed + ROTATION_SEED_OFFSET + s,
                    pair_seed=base_seed + PAIR_SEED_OFFSET + 2 * s,
                    sketch_seed=base_seed + SKETCH_SEED_OFFSET + s,
                    rotation_kind=rotation_kind, strategy=strategy,
                    cache_dir=cache_dir, pairs=pairs)
                per_seed.append(ip_error_stats(errors, np.zeros_like(errors)))
                pools.append(errors)
            pooled_errors = np.concatenate(pools)
            cell = IpErrorCell(method=method, bits=bits, per_seed=per_seed,
                               pooled=ip_error_stats(pooled_errors,
                                                     np.zeros_like(pooled_errors)),
                               errors=pooled_errors if keep_errors else None)
            results[(method, bits)] = cell
    return results


# ---------------------------------------------------------------------------
# Recall experiment
# ---------------------------------------------------------------------------


@dataclass
class RecallResult:
    k_values: list[int]
    recall: list[float]  # mean over runs, one entry per k
    runs: int
    std_per_k: list[float]
    per_run: np.ndarray = field(repr=False, default=None)  # (runs, len(k_values))


def _topk_ids_in_order(score_fn, rotated_queries: np.ndarray, n_base: int,
                       maxk: int, threads: int) -> np.ndarray:
    """Approximate top-maxk ids per query, gathered in query order.

    Queries are processed in fixed-size chunks so the arithmetic (and thus the
    output) is identical for every thread count; ties break to the lower id.
    """
    n_q = rotated_queries.shape[0]
    ids = np.arange(n_base)
    starts = list(range(0, n_q, _QUERY_CHUNK))

    def task(start):
        chunk = rotated_queries[start:start + _QUERY_CHUNK]
        est = score_fn(chunk)  # (n_base, q)
        out = np.empty((chunk.shape[0], maxk), dtype=np.int64)
        for col in range(chunk.shape[0]):
            order = np.lexsort((ids, -est[:, col]))
            out[col] = order[:maxk]
        return out

    if threads <= 1:
        parts = [task(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(task, starts))
    return np.concatenate(parts, axis=0)


def run_recall_experiment(methods, *, bits: int, dim: int, n_base: int,
                          n_queries: int, k_values, runs: int, base_seed: int = 0,
                          rotation_kind: str = "dense",
                          strategy: rq.RescaleStrategy | None = None,
                          cache_dir=None, threads: int = 1,
                          base=None, queries=None) -> dict[str, RecallResult]:
    """Exact-vs-quantized nearest-neighbor protocol.

    Base and query sets are unit-sphere samples unless supplied by the
    caller, in which case their rows are normalized first (inner product of
    normalized vectors is the metric).  Each run redraws the rotation (and
    sketch) seed.  The special method name ``exact`` scores with the true
    inner products.
    """
    if runs < 1:
        raise ValueError("need at least one run")
    k_values = sorted(int(k) for k in k_values)
    maxk = max(k_values)
    if base is None:
        base = generate_synthetic(n_base, dim, "unit-sphere", seed=base_seed)
    else:
        base = _normalized_rows(base)
        n_base, dim = base.shape
    if queries is None:
        queries = generate_synthetic(n_queries, dim, "unit-sphere", seed=base_seed + 1)
    else:
        queries = _normalized_rows(queries)
        if queries.shape[1] != dim:
            raise ValueError("base and query dimensions differ")
    exact_top1 = np.array([brute_force_topk(base, q, 1)[0] for q in queries])

    per_run = {m: np.zeros((runs, len(k_values))) for m in methods}
    for r in range(runs):
        rot_seed = base_seed + ROTATION_SEED_OFFSET + r
        sk_seed = base_seed + SKETCH_SEED_OFFSET + r
        for method in methods:
            if method == "exact":
                score_fn = lambda y_rows: base @ y_rows.T  # noqa: E731
                rotated_queries = queries
            else:
                pipe = make_pipeline(method, bits, dim, rotation_kind=rotation_kind,
                                     rotation_seed=rot_seed, strategy=strategy,
                                     sketch_seed=sk_seed, cache_dir=cache_dir)
                batch = pipe.quantize(pipe.rotate(base))
                score_fn = pipe.scorer(batch)
                rotated_queries = pipe.rotate(queries)
            topk = _topk_ids_in_order(score_fn, rotated_queries, n_base, maxk, threads)
            for ki, k in enumerate(k_values):
                hits = (topk[:, :k] == exact_top1[:, None]).any(axis=1)
                per_run[method][r, ki] = hits.mean()

    results = {}
    for method in methods:
        curves = per_run[method]
        results[method] = RecallResult(
            k_values=list(k_values),
            recall=[float(v) for v in curves.mean(axis=0)],
            runs=runs,
            std_per_k=[float(v) for v in curves.std(axis=0)],
            per_run=curves)
    return results


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------


@dataclass
class TimingResult:
    method: str
    bits: int
    rotation_kind: str
    n: int
    dim: int
    repeats: int
    seconds: list[float]  # rotation + quantization per repeat
    quantize_seconds: list[float]  # quantization only (debug breakdown)
    min_seconds: float
    median_seconds: float
    threads: int
    hardware: str


def _hardware_note() -> str:
    return f"{platform.system()} {platform.machine()}, {os.cpu_count()} logical cpus"


def bench_quantize(dataset, pipeline: QuantizePipeline, repeats: int = 3,
                   threads: int | None = None) -> TimingResult:
    """Wall-clock seconds for one full-dataset quantization, rotation included.

    Transform objects, strategies, codebooks, and sketches are prepared before
    timing starts; repeats run sequentially.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    mat = np.ascontiguousarray(dataset, dtype=np.float64)
    if pipeline.method.startswith("rabitq") and isinstance(pipeline.strategy, rq.ExpectedFactor):
        # warm the per-(dim, bits) factor table outside the timed region
        rq._expected_optimal_t(pipeline.work_dim, pipeline.bits, pipeline.strategy.samples)
    totals, quant_only = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        rotated = pipeline.rotate(mat)
        t1 = time.perf_counter()
        pipeline.quantize(rotated)
        t2 = time.perf_counter()
        totals.append(t2 - t0)
        quant_only.append(t2 - t1)
    return TimingResult(method=pipeline.method, bits=pipeline.bits,
                        rotation_kind=("fast" if isinstance(pipeline.rotation, FastRotationSpec)
                                       else "dense"),
                        n=mat.shape[0], dim=mat.shape[1], repeats=repeats,
                        seconds=totals, quantize_seconds=quant_only,
                        min_seconds=float(min(totals)),
                        median_seconds=float(np.median(totals)),
                        threads=threads if threads is not None else (os.cpu_count() or 1),
                        hardware=_hardware_note())
