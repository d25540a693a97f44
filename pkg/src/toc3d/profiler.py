"""Analytic MAC accounting, wall-clock benchmarking, sweeps and report IO."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .encoder import GLOBAL, EncoderConfig, EncoderWeights, forward_backbone, forward_baseline
from .mqts import (
    CompressionSchedule,
    ImportanceScore,
    ScorerParams,
    TokenGrid,
    foreground_recall,
    plan_updates,
    score_tokens,
    split_tokens,
)

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "toc3d-report"
REPORT_VERSION = 1
COUNTING_NOTE = (
    "MACs = multiply-accumulates of QKV/output projections, attention scores and values, MLP and "
    "token scoring; patch embedding and normalization excluded; FLOPs = 2 x MACs"
)


# ---------------------------------------------------------------------------
# analytic cost model


@dataclass
class LayerCost:
    layer: int
    tokens: int
    attn_macs: int
    mlp_macs: int
    mqts_macs: int

    @property
    def total(self) -> int:
        return self.attn_macs + self.mlp_macs + self.mqts_macs


@dataclass
class FlopReport:
    layers: list[LayerCost]
    baseline_macs: int
    compressed_macs: int
    memory_bytes: int
    baseline_memory_bytes: int

    @property
    def reduction(self) -> float:
        return 1.0 - self.compressed_macs / self.baseline_macs

    @property
    def compressed_flops(self) -> int:
        return 2 * self.compressed_macs

    @property
    def baseline_flops(self) -> int:
        return 2 * self.baseline_macs

    def summary(self) -> dict:
        return {
            "baseline_gmacs": self.baseline_macs / 1e9,
            "compressed_gmacs": self.compressed_macs / 1e9,
            "baseline_gflops": self.baseline_flops / 1e9,
            "compressed_gflops": self.compressed_flops / 1e9,
            "reduction": self.reduction,
            "reduction_pct": format_delta(self.reduction),
            "memory_mb": self.memory_bytes / 2**20,
            "baseline_memory_mb": self.baseline_memory_bytes / 2**20,
        }


def window_populations(lattice: tuple[int, int, int], window_size: int) -> np.ndarray:
    """Token count of every window on a full ``(views, rows, cols)`` lattice."""
    v, gh, gw = lattice
    rows = [min(window_size, gh - r) for r in range(0, gh, window_size)]
    cols = [min(window_size, gw - c) for c in range(0, gw, window_size)]
    per_view = np.outer(rows, cols).ravel()
    return np.tile(per_view, v)


def mlp_macs(m: int, dim: int, mlp_ratio: float) -> int:
    hidden = int(round(mlp_ratio * dim))
    return 2 * m * dim * hidden


def count_macs(enc: EncoderConfig, schedule: CompressionSchedule, n_tokens: int, n_q: int = 64,
               query_dim: int = 256, lattice: tuple[int, int, int] | None = None,
               bytes_per_value: int = 4) -> FlopReport:
    """Closed-form per-layer MACs for the compressed forward and its baseline.

    ``lattice`` gives ``(views, rows, cols)`` of the token grid for the
    window-attention terms; without it tokens are assumed to form full
    windows of ``window_size**2``.
    """
    n = int(n_tokens)
    c = enc.dim
    if lattice is not None:
        pops = window_populations(lattice, enc.window_size)
        if pops.sum() != n:
            raise ValueError(f"lattice {lattice} holds {pops.sum()} tokens, not {n}")
        full_pairs = int((pops.astype(np.int64) ** 2).sum())
    else:
        w = min(n, enc.window_size**2)
        full_pairs = n * w

    def layer_costs(segments) -> list[LayerCost]:
        out = []
        for seg in segments:
            n_s = n if seg.rho >= 1.0 else min(n, max(1, math.floor(seg.rho * n + 0.5)))
            bridge = int(n_s < n)
            m = n_s + bridge
            for layer in seg.layers:
                proj = 4 * m * c * c
                if enc.kind(layer) == GLOBAL:
                    pairs = m * m
                else:
                    frac = n_s / n
                    pairs = int(round(full_pairs * frac * frac))
                    if bridge:
                        # every token also sees the bridge; the bridge sees all
                        pairs += n_s + m
                attn = proj + 2 * pairs * c
                mq = 0
                if seg.update and layer == seg.start:
                    mq = n * c * query_dim + n * n_q * query_dim + n * n_q
                out.append(LayerCost(layer, m, attn, mlp_macs(m, c, enc.mlp_ratio), mq))
        return out

    comp = layer_costs(plan_updates(schedule, enc.layers))
    base = layer_costs(plan_updates(CompressionSchedule(), enc.layers))

    def memory(costs) -> int:
        weights = enc.layers * (4 * c * c + 2 * c * enc.hidden)
        peak = max(
            lc.tokens * (4 * c + enc.hidden) + enc.heads * (lc.tokens**2 if enc.kind(lc.layer) == GLOBAL else lc.tokens * enc.window_size**2)
            for lc in costs
        )
        return int((weights + peak + n * c) * bytes_per_value)

    return FlopReport(comp, sum(lc.total for lc in base), sum(lc.total for lc in comp), memory(comp), memory(base))


def format_delta(reduction: float) -> str:
    """``0.28`` -> ``'-28.0%'``: a reduction is shown as a negative change."""
    return f"{-100.0 * reduction:+.1f}%"


# ---------------------------------------------------------------------------
# wall clock


@dataclass
class BenchResult:
    mean_ms: float
    std_ms: float
    iterations: int
    warmup: int
    digest: str
    cores: int = field(default_factory=lambda: os.cpu_count() or 1)
    parallelism: int = 1
    samples_ms: list[float] = field(default_factory=list, repr=False)

    def sem_ms(self) -> float:
        return self.std_ms / math.sqrt(self.iterations)


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def faster_by(baseline: BenchResult, compressed: BenchResult, sigmas: float = 3.0) -> bool:
    """One-sided test that ``compressed`` is faster than ``baseline`` by ``sigmas`` standard errors."""
    se = math.sqrt(baseline.sem_ms() ** 2 + compressed.sem_ms() ** 2)
    return baseline.mean_ms - compressed.mean_ms > sigmas * se


def time_interleaved(runs: Sequence[Callable[[], object]], iterations: int = 30, warmup: int = 10,
                     digests: Sequence[str] | None = None, min_ms: float = 1.0) -> list[BenchResult]:
    """Round-robin timing of several callables on a monotonic clock.

    Each iteration times every callable once, rotating the start position so
    no callable always runs first; slow drift in machine load then shifts all
    of them alike. If the fastest call is too short for the clock, each
    sample times a burst of calls instead.
    """
    if iterations < 10:
        raise ValueError("need at least 10 timed iterations")
    if not runs:
        return []
    for _ in range(warmup):
        for fn in runs:
            fn()
    res_ns = time.get_clock_info("perf_counter").resolution * 1e9
    one = []
    for fn in runs:
        t0 = time.perf_counter_ns()
        fn()
        one.append(max(time.perf_counter_ns() - t0, 1))
    burst = max(1, math.ceil(max(min_ms * 1e6, 1000 * res_ns) / min(one)))
    samples: list[list[float]] = [[] for _ in runs]
    k = len(runs)
    for i in range(iterations):
        for j in range(k):
            idx = (i + j) % k
            t0 = time.perf_counter_ns()
            for _ in range(burst):
                runs[idx]()
            samples[idx].append((time.perf_counter_ns() - t0) / 1e6 / burst)
    digests = list(digests) if digests is not None else [""] * k
    return [BenchResult(statistics.fmean(x), statistics.stdev(x), len(x), warmup, d, samples_ms=x)
            for x, d in zip(samples, digests)]


def time_pair(run_a: Callable[[], object], run_b: Callable[[], object], iterations: int = 30, warmup: int = 10,
              digest: str = "", min_ms: float = 1.0) -> tuple[BenchResult, BenchResult]:
    """Interleaved timing of two callables; see ``time_interleaved``."""
    a, b = time_interleaved([run_a, run_b], iterations, warmup, [digest, digest], min_ms)
    return a, b


# ---------------------------------------------------------------------------
# reports


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def emit_report(results, fmt: str, path) -> Path:
    """Write rows (a list of flat dicts, or a dict with ``rows``) as JSON or CSV."""
    path = Path(path)
    if fmt not in ("json", "csv"):
        raise ValueError(f"unknown report format {fmt!r}; expected 'json' or 'csv'")
    if isinstance(results, dict):
        doc = dict(results)
    else:
        doc = {"rows": list(results)}
    doc = {"schema": REPORT_SCHEMA, "version": REPORT_VERSION, "counting": COUNTING_NOTE, **_clean(doc)}
    try:
        if fmt == "json":
            path.write_text(json.dumps(doc, indent=2) + "\n")
        else:
            rows = doc.get("rows", [])
            fields = []
            for r in rows:
                fields.extend(k for k in r if k not in fields)
            with open(path, "w", newline="") as fh:
                fh.write(f"# {REPORT_SCHEMA} v{REPORT_VERSION}\n# {COUNTING_NOTE}\n")
                w = csv.DictWriter(fh, fieldnames=fields)
                w.writeheader()
                for r in rows:
                    w.writerow({k: json.dumps(v) if isinstance(v, (list, dict, bool)) or v is None else v
                                for k, v in r.items()})
    except OSError as exc:
        raise OSError(f"failed to write report {path}: {exc}") from exc
    return path


def _parse_cell(text: str):
    if text == "":
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    try:
        return json.loads(text)
    except ValueError:
        return text


def load_report(path):
    path = Path(path)
    text = path.read_text()
    if text.startswith("#"):
        header, _, body = text.partition("\n")
        if header.strip() != f"# {REPORT_SCHEMA} v{REPORT_VERSION}":
            raise ValueError(f"{path}: unsupported report header {header!r}")
        lines = body.splitlines()
        note = lines.pop(0)[2:] if lines and lines[0].startswith("# ") else None
        rows = [{k: _parse_cell(v) for k, v in r.items()} for r in csv.DictReader(lines)]
        return {"schema": REPORT_SCHEMA, "version": REPORT_VERSION, "counting": note, "rows": rows}
    doc = json.loads(text)
    if doc.get("schema") != REPORT_SCHEMA or doc.get("version") != REPORT_VERSION:
        raise ValueError(f"{path}: not a {REPORT_SCHEMA} v{REPORT_VERSION} document")
    return doc


# ---------------------------------------------------------------------------
# heatmaps


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode())
            fh.write(img.tobytes())
    except OSError as exc:
        raise OSError(f"failed to write heatmap {path}: {exc}") from exc


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def score_lattice(scores, provenance) -> np.ndarray:
    """Scatter per-token values to a ``(views, rows, cols)`` array."""
    scores = np.asarray(getattr(scores, "scores", scores), dtype=float)
    prov = np.asarray(provenance, dtype=int)
    if len(prov) != len(scores):
        raise ValueError(f"provenance covers {len(prov)} tokens, scores have {len(scores)}")
    shape = prov.max(axis=0) + 1
    out = np.zeros(shape)
    out[prov[:, 0], prov[:, 1], prov[:, 2]] = scores
    return out


def dump_heatmap(score: ImportanceScore | np.ndarray, provenance, path, salient_mask=None) -> list[Path]:
    """One 8-bit graymap per view (``<stem>_view<k>.pgm``); optional salient mask files."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    grid = score_lattice(score, provenance)
    written = []
    for v, img in enumerate(grid):
        p = base.with_name(f"{base.stem}_view{v}.pgm")
        write_pgm(p, np.clip(np.rint(img * 255), 0, 255))
        written.append(p)
    if salient_mask is not None:
        mask = score_lattice(np.asarray(salient_mask, dtype=float), provenance)
        for v, img in enumerate(mask):
            p = base.with_name(f"{base.stem}_view{v}_salient.pgm")
            write_pgm(p, img * 255)
            written.append(p)
    return written


# ---------------------------------------------------------------------------
# benchmark + sweep over a prepared workload


@dataclass
class Workload:
    grid: TokenGrid
    queries: object
    enc: EncoderConfig
    weights: EncoderWeights
    scorer: ScorerParams
    seed: int = 0
    bridge_update: str = "full"

    def baseline(self) -> TokenGrid:
        return forward_baseline(self.grid, self.enc, self.weights)

    def compressed(self, schedule: CompressionSchedule) -> TokenGrid:
        return forward_backbone(self.grid, self.queries, schedule, self.scorer, self.enc, self.weights,
                                bridge_update=self.bridge_update)


def benchmark(work: Workload, schedule: CompressionSchedule, iterations: int = 30, warmup: int = 10):
    """Time baseline vs compressed forwards on identical inputs and weights.

    Returns ``(baseline, compressed, max_abs_diff)``; the difference is only
    meaningful for a degenerate (all ``rho == 1``) schedule and is ``None``
    otherwise.
    """
    digest = config_digest({"enc": asdict(work.enc), "schedule": asdict(schedule), "seed": work.seed,
                            "tokens": list(work.grid.tokens.shape), "dtype": str(work.grid.tokens.dtype)})
    base, comp = time_pair(work.baseline, lambda: work.compressed(schedule), iterations, warmup, digest)
    diff = None
    if all(r == 1.0 for r in schedule.ratios):
        diff = float(np.abs(work.baseline().tokens - work.compressed(schedule).tokens).max())
    return base, comp, diff


def schedule_recall(scorer: ScorerParams, examples, ratios: Sequence[float], threshold: float = 0.8) -> float:
    """Mean held-out foreground recall over records and schedule stages."""
    vals = []
    for tokens, queries, target in examples:
        s = score_tokens(tokens, queries, scorer)
        for rho in ratios:
            vals.append(foreground_recall(s.scores, target, rho, threshold))
    return float(np.mean(vals)) if vals else float("nan")


def sweep(work: Workload, update_layers: Sequence[int], ratio_sets, n_q_sets=(None,), recall_examples=None,
          scorer_factory: Callable[[int], ScorerParams] | None = None, time_it: bool = True,
          iterations: int = 10, warmup: int = 3) -> list[dict]:
    """One row per (ratios, n_q) cell; failing cells carry an ``error`` field.

    Within one ``n_q`` group the baseline and every cell's compressed forward
    are timed in a single interleaved run, so cells are compared under the
    same machine conditions.
    """
    rows = []
    n = len(work.grid)
    lattice = tuple(int(x) for x in work.grid.provenance.max(axis=0) + 1)
    for n_q in n_q_sets:
        scorer = work.scorer
        if n_q is not None and n_q != scorer.n_queries:
            scorer = scorer_factory(n_q) if scorer_factory else None
        cell = Workload(work.grid, work.queries, work.enc, work.weights, scorer, work.seed, work.bridge_update)
        timed: list[tuple[dict, CompressionSchedule]] = []
        for ratios in ratio_sets:
            row = {"ratios": list(ratios), "n_q": n_q if n_q is not None else work.scorer.n_queries}
            try:
                if scorer is None:
                    raise ValueError(f"no scorer available for n_q={n_q}")
                sched = CompressionSchedule(tuple(update_layers), tuple(ratios))
                rep = count_macs(work.enc, sched, n, row["n_q"], scorer.query_dim, lattice)
                row.update(rep.summary())
                if time_it:
                    cell.compressed(sched)  # surface forward errors before timing
                    timed.append((row, sched))
                if recall_examples is not None:
                    row["recall"] = schedule_recall(scorer, recall_examples, ratios)
            except Exception as exc:  # a failed cell must not stop the sweep
                logger.warning("sweep cell %s failed: %s", row, exc)
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
        if timed:
            runs = [cell.baseline] + [lambda s=sched: cell.compressed(s) for _, sched in timed]
            digests = [config_digest({"enc": asdict(work.enc), "schedule": asdict(sc), "seed": work.seed,
                                      "tokens": list(work.grid.tokens.shape), "dtype": str(work.grid.tokens.dtype)})
                       for sc in [CompressionSchedule()] + [sc for _, sc in timed]]
            base, *comps = time_interleaved(runs, iterations, warmup, digests)
            for (row, _), comp in zip(timed, comps):
                row.update(baseline_ms=base.mean_ms, baseline_std_ms=base.std_ms, compressed_ms=comp.mean_ms,
                           compressed_std_ms=comp.std_ms, time_delta=format_delta(1 - comp.mean_ms / base.mean_ms),
                           iterations=comp.iterations, digest=comp.digest)
    return rows
