"""Command-line entry point: ``toc3d <verb> [options]``.

Every verb runs its own invariant self-checks and exits 0 only when all of
them pass (1 otherwise; argparse usage errors exit 2).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .encoder import EncoderConfig, EncoderWeights, ForwardTrace, forward_backbone, forward_baseline
from .mqts import (
    CompressionSchedule,
    ScorerParams,
    TokenGrid,
    foreground_recall,
    load_scorer,
    prepare_examples,
    save_scorer,
    score_tokens,
    split_tokens,
    train_scorer,
)
from .motion import PEConfig
from .profiler import (
    Workload,
    benchmark,
    count_macs,
    dump_heatmap,
    emit_report,
    faster_by,
    format_delta,
    read_pgm,
    sweep,
)
from .scene import CameraRig, build_dataset, dump_dataset, is_rigid, lattice_provenance, load_dataset, load_record

logger = logging.getLogger("toc3d")

DEFAULT_SWEEP_RATIOS = "0.7,0.5,0.5; 0.5,0.4,0.3; 0.3,0.2,0.1"
PRESETS = {"desk": EncoderConfig.desk, "vit-b": EncoderConfig.vit_b, "vit-l": EncoderConfig.vit_l}


class Checks:
    """Collects named pass/fail self-checks and prints them."""

    def __init__(self):
        self.results: list[tuple[str, bool, str]] = []

    def add(self, name: str, ok: bool, detail: str = "") -> bool:
        self.results.append((name, bool(ok), detail))
        print(f"[{'ok' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
        return bool(ok)

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.results)

    def as_dict(self) -> dict:
        return {name: {"ok": ok, "detail": detail} for name, ok, detail in self.results}


# ---------------------------------------------------------------------------
# shared helpers


def _overrides(pairs: list[str]) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise SystemExit(f"--set expects section.key=value, got {item!r}")
        out.setdefault(section.strip(), {})[name.strip()] = value.strip()
    return out


def _config(args) -> RunConfig:
    over = _overrides(args.set)
    if getattr(args, "schedule", None):
        over.setdefault("schedule", {})["preset"] = args.schedule
    if getattr(args, "output", None):
        over.setdefault("run", {})["output"] = args.output
    return load_config(args.config, over, args.seed)


def _rig(cfg: RunConfig, bench: bool = False) -> CameraRig:
    size = (cfg.bench.height, cfg.bench.width) if bench else (cfg.scene.height, cfg.scene.width)
    return CameraRig.surround(cfg.scene.views, size)


def _records(cfg: RunConfig, n: int, seed: int, rig: CameraRig):
    s = cfg.scene
    return build_dataset(seed, n, rig, s.patch, s.objects, s.queries, s.noise, cfg.train.query_dim, s.dt, s.v_max)


def _scorer(cfg: RunConfig, path, n_q: int | None = None) -> ScorerParams:
    if path:
        p = load_scorer(path)
        if p.token_dim != cfg.encoder.dim:
            raise SystemExit(f"scorer {path} expects {p.token_dim}-d tokens, encoder is {cfg.encoder.dim}-d")
        return p
    logger.warning("no scorer checkpoint given; using untrained scorer weights")
    return ScorerParams.init(cfg.seed, cfg.encoder.dim, cfg.train.query_dim, n_q or cfg.train.n_q,
                             PEConfig(cfg.train.pe_bands))


def _grid(cfg: RunConfig, rig: CameraRig, dtype=np.float64):
    rec = _records(cfg, 1, cfg.seed, rig)[0]
    gh, gw = rig.lattice_shape(cfg.scene.patch)
    tokens = rec.tokens(cfg.encoder.dim, cfg.seed).astype(dtype)
    return rec, TokenGrid(tokens, lattice_provenance(rig.n_views, gh, gw))


def _ratio_sets(text: str) -> list[tuple[float, ...]]:
    return [tuple(float(x) for x in cell.replace(",", " ").split()) for cell in text.split(";") if cell.strip()]


def _emit(payload, args, default_name: str, cfg: RunConfig):
    path = args.report or Path(cfg.output) / f"{default_name}.{args.format}"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    out = emit_report(payload, args.format, path)
    print(f"report written to {out}")


# ---------------------------------------------------------------------------
# verbs


def cmd_generate(args) -> int:
    cfg = _config(args)
    rig = _rig(cfg)
    n = args.frames or cfg.scene.frames
    records = _records(cfg, n, cfg.seed, rig)
    out = Path(args.out or Path(cfg.output) / "scenes")
    paths = dump_dataset(records, out)
    checks = Checks()
    n_tok = rig.n_tokens(cfg.scene.patch)
    checks.add("target covers every token", all(r.target.flat.size == n_tok for r in records))
    checks.add("ego transforms are rigid", all(is_rigid(r.queries.ego_transform, 1e-10) for r in records))
    reread = load_dataset(out, rig)
    same = len(reread) == n and all(
        np.array_equal(a.features, b.features) and np.array_equal(a.target.flat, b.target.flat)
        for a, b in zip(records, reread)
    )
    checks.add("scene files round-trip", same, f"{len(paths)} files in {out}")
    return 0 if checks.passed else 1


def cmd_train_scorer(args) -> int:
    cfg = _config(args)
    rig = _rig(cfg)
    t = cfg.train
    records = load_dataset(args.data, rig) if args.data else _records(cfg, cfg.scene.frames, cfg.seed, rig)
    heldout = _records(cfg, args.holdout, cfg.seed + 1, rig)
    examples = prepare_examples(records, cfg.encoder.dim, t.n_q, cfg.seed)
    params = ScorerParams.init(cfg.seed, cfg.encoder.dim, t.query_dim, t.n_q, PEConfig(t.pe_bands))
    res = train_scorer(examples, epochs=args.epochs or t.epochs, lr=t.lr, seed=cfg.seed, momentum=t.momentum,
                       loss_weight=t.loss_weight, clip_norm=t.clip_norm, params=params)
    out = Path(args.out or Path(cfg.output) / "scorer.toc3d")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scorer(res.params, out)
    recalls = [
        foreground_recall(score_tokens(tok, q, res.params).scores, y, args.rho)
        for tok, q, y in prepare_examples(heldout, cfg.encoder.dim, t.n_q, cfg.seed)
    ]
    print(f"epoch losses: {' '.join(f'{x:.4f}' for x in res.losses)}")
    print(f"held-out foreground recall at rho={args.rho}: {np.mean(recalls):.4f} over {len(recalls)} frames")
    checks = Checks()
    checks.add("losses finite", np.all(np.isfinite(res.losses)))
    checks.add("loss decreased", len(res.losses) < 2 or res.losses[-1] < res.losses[0],
               f"{res.losses[0]:.4f} -> {res.losses[-1]:.4f}")
    checks.add("checkpoint round-trips", all(
        np.array_equal(a, b) for a, b in zip(res.params.arrays().values(), load_scorer(out).arrays().values())
    ), str(out))
    return 0 if checks.passed else 1


def _self_check_forward(cfg: RunConfig, scorer: ScorerParams, bridge_update: str, checks: Checks) -> dict:
    enc = cfg.encoder
    rig = _rig(cfg)
    rec, grid = _grid(cfg, rig)
    weights = EncoderWeights.init(enc, cfg.seed)
    checks.add("ego transform rigid", is_rigid(rec.queries.ego_transform, 1e-10))

    ones = CompressionSchedule(cfg.schedule.update_layers, tuple(1.0 for _ in cfg.schedule.ratios))
    base = forward_baseline(grid, enc, weights)
    same = forward_backbone(grid, rec.queries, ones, scorer, enc, weights, bridge_update=bridge_update)
    diff = float(np.abs(base.tokens - same.tokens).max())
    checks.add("rho=1 matches plain encoder", diff <= 1e-10, f"max abs diff {diff:.3e}")

    trace = ForwardTrace()
    out = forward_backbone(grid, rec.queries, cfg.schedule, scorer, enc, weights, trace, bridge_update)
    n = len(grid)
    conserved = out.tokens.shape == grid.tokens.shape and np.array_equal(out.provenance, grid.provenance) and all(
        np.array_equal(np.sort(np.concatenate([p.salient_idx, p.redundant_idx])), np.arange(n))
        for p in trace.partitions
    )
    checks.add("token indices conserved", conserved)
    checks.add("one score update per update layer", trace.n_score_updates == len(cfg.schedule),
               f"{trace.n_score_updates} updates at layers {trace.score_layers}")
    checks.add("outputs finite", bool(np.all(np.isfinite(out.tokens))))
    return {"rho1_max_abs_diff": diff, "layer_widths": trace.layer_widths, "score_layers": trace.score_layers}


def cmd_run(args) -> int:
    cfg = _config(args)
    scorer = _scorer(cfg, args.scorer)
    checks = Checks()
    payload = {"config": _cfg_dict(cfg), "forward": _self_check_forward(cfg, scorer, args.bridge_update, checks)}

    rig = _rig(cfg, bench=True)
    gh, gw = rig.lattice_shape(cfg.scene.patch)
    rep = count_macs(cfg.encoder, cfg.schedule, rig.n_tokens(cfg.scene.patch), scorer.n_queries, scorer.query_dim,
                     (rig.n_views, gh, gw))
    checks.add("MAC totals additive", rep.compressed_macs == sum(c.total for c in rep.layers))
    payload["flops"] = rep.summary()
    if not args.no_bench:
        dtype = np.dtype(cfg.bench.precision)
        rec, grid = _grid(cfg, rig, dtype)
        work = Workload(grid, rec.queries, cfg.encoder, EncoderWeights.init(cfg.encoder, cfg.seed).astype(dtype),
                        scorer, cfg.seed, args.bridge_update)
        base, comp, _ = benchmark(work, cfg.schedule, cfg.bench.iterations, cfg.bench.warmup)
        ratio = comp.mean_ms / base.mean_ms
        print(f"baseline {base.mean_ms:.1f}±{base.std_ms:.1f} ms, compressed {comp.mean_ms:.1f}±{comp.std_ms:.1f} ms "
              f"({format_delta(1 - ratio)})")
        if max(cfg.schedule.ratios, default=1.0) <= 0.7:
            checks.add("compressed not slower than baseline", not faster_by(comp, base))
        payload["bench"] = {"baseline": asdict(base), "compressed": asdict(comp), "time_ratio": ratio,
                            "time_delta": format_delta(1 - ratio)}
    payload["checks"] = checks.as_dict()
    row = {"update_layers": list(cfg.schedule.update_layers), "ratios": list(cfg.schedule.ratios), **payload["flops"]}
    if "bench" in payload:
        row.update(baseline_ms=base.mean_ms, compressed_ms=comp.mean_ms, time_delta=payload["bench"]["time_delta"])
    payload["rows"] = [dict(row, checks_passed=checks.passed)]
    if args.report or args.format:
        args.format = args.format or "json"
        _emit(payload, args, "run", cfg)
    return 0 if checks.passed else 1


def _cfg_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["encoder"]["global_attn_layers"] = list(cfg.encoder.global_attn_layers)
    return d


def cmd_flops(args) -> int:
    cfg = _config(args)
    enc = PRESETS[args.preset]() if args.preset else cfg.encoder
    views = args.views or cfg.scene.views
    h = args.height or cfg.bench.height
    w = args.width or cfg.bench.width
    if h % enc.patch or w % enc.patch:
        raise SystemExit(f"image {h}x{w} is not divisible by patch {enc.patch}")
    lattice = (views, h // enc.patch, w // enc.patch)
    n = int(np.prod(lattice))
    schedule = CompressionSchedule.preset(args.schedule, enc.layers) if args.schedule else cfg.schedule
    rep = count_macs(enc, schedule, n, cfg.train.n_q, cfg.train.query_dim, lattice)
    empty = count_macs(enc, CompressionSchedule(), n, cfg.train.n_q, cfg.train.query_dim, lattice)
    s = rep.summary()
    print(f"{n} tokens, {enc.layers} layers, C={enc.dim}, schedule {schedule.ratios}@{schedule.update_layers}")
    print(f"baseline {s['baseline_gmacs']:.2f} GMACs, compressed {s['compressed_gmacs']:.2f} GMACs "
          f"({format_delta(s['reduction'])})")
    checks = Checks()
    checks.add("per-layer totals add up", rep.compressed_macs == sum(c.total for c in rep.layers))
    checks.add("reduction in [0, 1)", 0 <= s["reduction"] < 1, f"{s['reduction']:.4f}")
    checks.add("empty schedule equals baseline", empty.compressed_macs == rep.baseline_macs)
    if args.format:
        _emit({"summary": s, "rows": [asdict(c) for c in rep.layers], "checks": checks.as_dict()}, args, "flops", cfg)
    return 0 if checks.passed else 1


def cmd_sweep(args) -> int:
    cfg = _config(args)
    ratio_sets = _ratio_sets(args.ratios)
    n_q_sets = [int(x) for x in args.n_q.replace(",", " ").split()] or [cfg.train.n_q]
    checks = Checks()
    if not ratio_sets:
        print("empty ratio grid; nothing to sweep")
        if args.format:
            _emit([], args, "sweep", cfg)
        return 0
    rig = _rig(cfg, bench=True)
    dtype = np.dtype(cfg.bench.precision)
    rec, grid = _grid(cfg, rig, dtype)
    scorer = _scorer(cfg, args.scorer, n_q_sets[0])
    work = Workload(grid, rec.queries, cfg.encoder, EncoderWeights.init(cfg.encoder, cfg.seed).astype(dtype),
                    scorer, cfg.seed)
    recall_examples = None
    if args.recall_frames:
        recs = _records(cfg, args.recall_frames, cfg.seed + 1, _rig(cfg))
        recall_examples = [(r.tokens(cfg.encoder.dim, cfg.seed), r.queries, r.target.flat) for r in recs]

    def factory(n_q):
        return ScorerParams.init(cfg.seed, cfg.encoder.dim, cfg.train.query_dim, n_q, PEConfig(cfg.train.pe_bands))

    rows = sweep(work, cfg.schedule.update_layers, ratio_sets, n_q_sets, recall_examples, factory, not args.no_time, cfg.bench.iterations, cfg.bench.warmup)
    for row in rows:
        print(json.dumps({k: row.get(k) for k in ("ratios", "n_q", "reduction", "compressed_ms", "recall", "error")
                          if k in row}))
    checks.add("every cell evaluated", not any("error" in r for r in rows))
    checks.add("reductions in [0, 1)", all(0 <= r["reduction"] < 1 for r in rows if "reduction" in r))
    if args.format:
        _emit(rows, args, "sweep", cfg)
    return 0 if checks.passed else 1


def cmd_dump_heatmap(args) -> int:
    cfg = _config(args)
    rig = _rig(cfg)
    scorer = _scorer(cfg, args.scorer)
    rec = load_record(args.record, rig) if args.record else _records(cfg, 1, cfg.seed, rig)[0]
    score = score_tokens(rec.tokens(cfg.encoder.dim, cfg.seed), rec.queries, scorer)
    gh, gw = rig.lattice_shape(cfg.scene.patch)
    prov = lattice_provenance(rig.n_views, gh, gw)
    mask = None
    if args.mask:
        mask = np.zeros(len(prov), dtype=bool)
        mask[split_tokens(None, score, args.rho).salient_idx] = True
    out = Path(args.out or Path(cfg.output) / "heatmap")
    files = dump_heatmap(score, prov, out, mask)
    checks = Checks()
    checks.add("one graymap per view", len(files) == rig.n_views * (2 if args.mask else 1), f"{len(files)} files")
    checks.add("graymap matches lattice", all(read_pgm(f).shape == (gh, gw) for f in files), f"{gh}x{gw}")
    return 0 if checks.passed else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="overrides TOC3D_SEED and the config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--output", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    report = argparse.ArgumentParser(add_help=False)
    report.add_argument("--format", choices=("json", "csv"), help="write a report in this format")
    report.add_argument("--report", help="report path")

    p = argparse.ArgumentParser(prog="toc3d", description="Query-guided token compression for ViT encoders.")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", parents=[common], help="write synthetic scene files")
    g.add_argument("--frames", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train-scorer", parents=[common], help="train the importance scorer")
    t.add_argument("--data", help="directory of scene files (generated in memory if omitted)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--holdout", type=int, default=50)
    t.add_argument("--rho", type=float, default=0.5)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train_scorer)

    r = sub.add_parser("run", parents=[common, report], help="self-check and benchmark a compressed forward")
    r.add_argument("--scorer")
    r.add_argument("--schedule", choices=("fast", "faster", "none"))
    r.add_argument("--bridge-update", choices=("full", "delta"), default="full")
    r.add_argument("--no-bench", action="store_true")
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("flops", parents=[common, report], help="analytic MAC/FLOP report")
    f.add_argument("--preset", choices=sorted(PRESETS))
    f.add_argument("--schedule", choices=("fast", "faster", "none"))
    f.add_argument("--views", type=int)
    f.add_argument("--height", type=int)
    f.add_argument("--width", type=int)
    f.set_defaults(func=cmd_flops)

    s = sub.add_parser("sweep", parents=[common, report], help="sweep keeping ratios and query counts")
    s.add_argument("--ratios", default=DEFAULT_SWEEP_RATIOS, help="';'-separated ratio triples")
    s.add_argument("--n-q", default="", help="query counts, e.g. '16 32 64'")
    s.add_argument("--scorer")
    s.add_argument("--recall-frames", type=int, default=0)
    s.add_argument("--no-time", action="store_true")
    s.add_argument("--schedule", choices=("fast", "faster", "none"))
    s.set_defaults(func=cmd_sweep)

    h = sub.add_parser("dump-heatmap", parents=[common], help="write per-view score graymaps")
    h.add_argument("--scorer")
    h.add_argument("--record", help="scene file (generated if omitted)")
    h.add_argument("--mask", action="store_true", help="also write the salient mask")
    h.add_argument("--rho", type=float, default=0.5)
    h.add_argument("--out", help="output stem")
    h.set_defaults(func=cmd_dump_heatmap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"toc3d {args.verb}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
