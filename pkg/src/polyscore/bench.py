"""Latency harness: per-query scoring time by architecture and candidate count.

Bi/Poly are timed against a prebuilt cache (cache build reported separately);
Cross timing includes the full per-candidate forwards. Cross runs at large
candidate counts can be measured at a sub-count and linearly extrapolated;
extrapolated cells are always flagged, never silently mixed with measured
ones. The timed region runs single-threaded Python with a monotonic clock.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import ModelConfig
from .errors import ConfigError, ContractError
from .model import Model, Scorer
from .retrieval import build_cache, rank_bi, rank_cross, rank_poly
from .text import Vocabulary

DEFAULT_COUNTS = [1000, 10000]
DEFAULT_QUERIES = 100
DEFAULT_WARMUP = 10
DEFAULT_CONTEXT_TOKENS = 64
DEFAULT_CANDIDATE_TOKENS = 16


def parse_arch(arch: str) -> tuple[str, int | None]:
    """'bi' | 'cross' | 'poly:<m>' -> (kind, m)."""
    if arch in ("bi", "cross"):
        return arch, None
    if arch.startswith("poly:"):
        m = int(arch.split(":", 1)[1])
        if m < 1:
            raise ConfigError(f"poly arch needs m >= 1, got {m}")
        return "poly", m
    raise ConfigError(f"unknown architecture {arch!r} (use bi, cross or poly:<m>)")


@dataclass
class BenchSpec:
    architectures: list[str] = field(default_factory=lambda: ["bi", "poly:16", "cross"])
    candidate_counts: list[int] = field(default_factory=lambda: list(DEFAULT_COUNTS))
    n_queries: int = DEFAULT_QUERIES
    warmup_queries: int = DEFAULT_WARMUP
    context_tokens: int = DEFAULT_CONTEXT_TOKENS
    candidate_tokens: int = DEFAULT_CANDIDATE_TOKENS
    extrapolate_cross_from: int | None = None
    top_k: int = 5
    seed: int = 0

    def __post_init__(self):
        for arch in self.architectures:
            parse_arch(arch)
        if any(c < 1 for c in self.candidate_counts):
            raise ConfigError("candidate counts must be positive")
        if self.n_queries < 1 or self.warmup_queries < 0:
            raise ConfigError("need n_queries >= 1 and warmup_queries >= 0")


@dataclass
class BenchCell:
    arch: str
    candidates: int
    n_queries: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    min_ms: float
    max_ms: float
    extrapolated: bool
    cache_build_s: float | None


@dataclass
class BenchReport:
    cells: list[BenchCell]
    threads: int
    precision: str


def _check_timer():
    resolution = time.get_clock_info("perf_counter").resolution
    if resolution > 1e-6:
        raise ContractError(
            f"perf_counter resolution {resolution}s is too coarse for ms-scale timing"
        )


def _thread_count() -> int:
    env = os.environ.get("POLYSCORE_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _stats(times_s: list[float], arch, count, extrapolated, cache_s) -> BenchCell:
    ms = np.asarray(times_s) * 1e3
    return BenchCell(
        arch=arch,
        candidates=count,
        n_queries=len(times_s),
        mean_ms=float(ms.mean()),
        median_ms=float(np.median(ms)),
        p95_ms=float(np.percentile(ms, 95)),
        min_ms=float(ms.min()),
        max_ms=float(ms.max()),
        extrapolated=extrapolated,
        cache_build_s=cache_s,
    )


def _timed(fn, queries, n_queries: int, warmup: int) -> list[float]:
    times = []
    total = warmup + n_queries
    for i in range(total):
        q = queries[i % len(queries)]
        t0 = time.perf_counter()
        fn(q)
        times.append(time.perf_counter() - t0)
    return times[warmup:]


def run_bench(spec: BenchSpec, models: dict[str, Model], vocab: Vocabulary,
              candidate_pool: list[str], queries: list[list[str]]) -> BenchReport:
    """Time every (architecture, candidate count) pair in the spec."""
    _check_timer()
    if len(candidate_pool) < max(spec.candidate_counts, default=0):
        raise ContractError(
            f"candidate pool has {len(candidate_pool)} entries, "
            f"need {max(spec.candidate_counts)}"
        )
    cells = []
    for arch in spec.architectures:
        kind, _ = parse_arch(arch)
        scorer = Scorer(models[arch], vocab)
        for count in spec.candidate_counts:
            cands = candidate_pool[:count]
            k = min(spec.top_k, count)
            if kind == "cross":
                sub = count
                extrapolated = False
                if spec.extrapolate_cross_from and count > spec.extrapolate_cross_from:
                    sub = spec.extrapolate_cross_from
                    extrapolated = True
                sub_cands = cands[:sub]
                times = _timed(
                    lambda q: rank_cross(scorer, q, sub_cands, min(k, sub)),
                    queries, spec.n_queries, spec.warmup_queries,
                )
                if extrapolated:
                    times = [t * count / sub for t in times]
                cells.append(_stats(times, arch, count, extrapolated, None))
            else:
                t0 = time.perf_counter()
                cache = build_cache(cands, scorer)
                cache_s = time.perf_counter() - t0
                rank = rank_bi if kind == "bi" else rank_poly
                times = _timed(
                    lambda q: rank(scorer, q, cache, k),
                    queries, spec.n_queries, spec.warmup_queries,
                )
                cells.append(_stats(times, arch, count, False, cache_s))
    return BenchReport(cells=cells, threads=_thread_count(), precision="float32")


def make_bench_models(cfg: ModelConfig, architectures: list[str], seed: int,
                      dtype=np.float32) -> dict[str, Model]:
    """Random-init models per architecture; weights are shared-origin like a
    fine-tune start so towers are comparable across architectures."""
    rng = np.random.Generator(np.random.PCG64(seed))
    base = Model.init_pretrain(cfg, rng, dtype=dtype)
    models = {}
    for arch in architectures:
        kind, m = parse_arch(arch)
        if kind == "poly":
            models[arch] = base.derive("poly", rng, poly_variant="learnt", poly_m=m)
        else:
            models[arch] = base.derive(kind, rng)
    return models


def synthetic_queries(spec: BenchSpec, vocab: Vocabulary, n: int,
                      rng: np.random.Generator) -> list[list[str]]:
    words = [vocab.token_of(i) for i in range(4, len(vocab))]
    out = []
    for _ in range(n):
        toks = rng.choice(len(words), size=spec.context_tokens)
        out.append([" ".join(words[int(t)] for t in toks)])
    return out


def synthetic_candidates(spec: BenchSpec, vocab: Vocabulary, n: int,
                         rng: np.random.Generator) -> list[str]:
    words = [vocab.token_of(i) for i in range(4, len(vocab))]
    out = []
    for _ in range(n):
        toks = rng.choice(len(words), size=spec.candidate_tokens)
        out.append(" ".join(words[int(t)] for t in toks))
    return out


# ---- rendering ----

_COLUMNS = ["arch", "candidates", "n_queries", "mean_ms", "median_ms", "p95_ms",
            "min_ms", "max_ms", "extrapolated", "cache_build_s"]


def report_to_jsonl(report: BenchReport) -> str:
    lines = []
    for cell in report.cells:
        row = {c: getattr(cell, c) for c in _COLUMNS}
        row["threads"] = report.threads
        row["precision"] = report.precision
        lines.append(json.dumps(row, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def report_from_jsonl(text: str) -> BenchReport:
    cells = []
    threads, precision = 1, "float32"
    for line in text.splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        threads = row.pop("threads")
        precision = row.pop("precision")
        cells.append(BenchCell(**row))
    return BenchReport(cells=cells, threads=threads, precision=precision)


def report_table(report: BenchReport) -> str:
    header = f"{'arch':<12} {'C':>8} {'mean ms':>12} {'median ms':>12} {'p95 ms':>12} {'flags':>14}"
    lines = [header, "-" * len(header)]
    for cell in report.cells:
        flags = []
        if cell.extrapolated:
            flags.append("extrapolated")
        if cell.cache_build_s is not None:
            flags.append(f"cache {cell.cache_build_s:.2f}s")
        lines.append(
            f"{cell.arch:<12} {cell.candidates:>8} {cell.mean_ms:>12.3f} "
            f"{cell.median_ms:>12.3f} {cell.p95_ms:>12.3f} {' '.join(flags):>14}"
        )
    lines.append(f"threads={report.threads} precision={report.precision}")
    return "\n".join(lines)
