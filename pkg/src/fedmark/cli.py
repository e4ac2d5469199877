"""Command-line entry point.

Subcommands:
  simulate  run the three-stage FL experiment, write metrics + plot CSVs
  analyze   biomarker statistics from detection CSVs + a groups file
  netsim    bandwidth trace, failure schedule, and round-time CSVs
  pipeline  inference throughput table for both scheduling modes
  selftest  run the built-in oracle checks

Output directory resolution: --out flag, then the config's out_dir, then
the FEDMARK_OUT environment variable, then ./fedmark_out.
"""

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import selftest
from .biomarkers import (
    BiomarkerFeatureRow,
    analyze_features,
    diagnose_cv,
    extract_features,
    feature_matrix,
    read_detections_csv,
    read_groups_csv,
    DIAGNOSIS_TASKS,
)
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DataError, FoldError
from .experiment import run_three_stage
from .netsim import (
    BandwidthTrace,
    PipelineSpec,
    SensorFailureProcess,
    failure_schedule,
    failures_to_csv,
    pipeline_throughput,
    simulate_round,
)
from .protocol import build_model_bundle, serialize_bundle
from .report import atomic_write_text, dumps_canonical, write_csv
from .seeds import rng_for, FAILURES, MODEL_INIT, TRACE
from .losses import MODALITIES


def _resolve_out(args, cfg=None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg is not None and cfg.out_dir:
        return Path(cfg.out_dir)
    env = os.environ.get("FEDMARK_OUT")
    if env:
        return Path(env)
    return Path("fedmark_out")


def _load_experiment_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    return cfg


def cmd_simulate(args) -> int:
    cfg = _load_experiment_config(args)
    if args.stage == "pretrain-only":
        cfg.unsup.rounds = 0
        cfg.weak.rounds = 0
    out = _resolve_out(args, cfg)
    report, result = run_three_stage(cfg)
    atomic_write_text(out / "metrics.jsonl", report.to_jsonl())
    rows = []
    for stage, times in result.round_times.items():
        rows.extend((stage, i, t) for i, t in enumerate(times))
    write_csv(out / "round_times.csv", ["stage", "round", "round_time_s"], rows)
    acc_rows = [
        (stage, node_id, rep.overall, rep.head_acc, rep.tail_acc)
        for stage, evals in result.stage_evals.items()
        for node_id, rep in sorted(evals.items())
    ]
    write_csv(out / "stage_accuracy.csv",
              ["stage", "node_id", "accuracy", "head_acc", "tail_acc"], acc_rows)
    for stage, mean in result.stage_means.items():
        print(f"{stage}: mean accuracy {mean:.4f}")
    print(f"wrote {out / 'metrics.jsonl'}")
    return 0


def cmd_analyze(args) -> int:
    out = _resolve_out(args)
    groups = read_groups_csv(args.groups)
    det_dir = Path(args.detections)
    files = sorted(det_dir.glob("*.csv"))
    if not files:
        raise DataError(f"no detection CSVs found in {det_dir}")
    rows = []
    for f in files:
        sid = f.stem
        if sid not in groups:
            raise DataError(f"subject {sid!r} missing from groups file")
        timeline = read_detections_csv(f)
        duration, freq = extract_features(timeline, args.classes)
        period = timeline[-1][0] - timeline[0][0] + 2.0
        rows.append(BiomarkerFeatureRow(sid, groups[sid], duration, freq, period))
    if len({r.group for r in rows}) < 2:
        raise DataError("need at least 2 diagnosis groups")

    x, names = feature_matrix(rows)
    write_csv(out / "features.csv", ["subject_id", "group"] + names,
              [(r.subject_id, r.group, *x[i]) for i, r in enumerate(rows)])

    analysis = analyze_features(rows, alpha=args.alpha)
    write_csv(out / "anova.csv", ["feature", "F", "p", "critical"], [
        (t.name,
         None if t.anova is None else t.anova.f,
         None if t.anova is None else t.anova.p_value,
         t.name in analysis.critical)
        for t in analysis.tests
    ])
    write_csv(out / "levene.csv", ["feature", "p"],
              [(t.name, t.levene_p) for t in analysis.tests])

    accuracies = {}
    for task in DIAGNOSIS_TASKS:
        try:
            confusion, acc = diagnose_cv(rows, task, k=args.folds, seed=args.seed or 0)
        except (FoldError, DataError) as exc:
            accuracies[task] = {"skipped": str(exc)}
            continue
        atomic_write_text(out / f"confusion_{task}.json", dumps_canonical({
            "task": task, "labels": list(DIAGNOSIS_TASKS[task]),
            "confusion": confusion, "accuracy": acc,
        }) + "\n")
        accuracies[task] = {"accuracy": acc}
    atomic_write_text(out / "summary.json", dumps_canonical({
        "levene_mean_p": analysis.levene_mean_p,
        "equality_warning": analysis.equality_warning,
        "critical": sorted(analysis.critical),
        "tasks": accuracies,
    }) + "\n")
    if analysis.equality_warning:
        print("warning: mean Levene p <= 0.05; variance equality is doubtful", file=sys.stderr)
    print(f"critical biomarkers: {sorted(analysis.critical)}")
    print(f"wrote {out / 'anova.csv'}")
    return 0


def cmd_netsim(args) -> int:
    out = _resolve_out(args)
    seed = args.seed if args.seed is not None else 0
    horizon = args.hours * 3600.0
    trace = BandwidthTrace(horizon_s=horizon, seed=int(rng_for(seed, TRACE).integers(2**31)))
    trace.to_csv(out / "trace.csv")
    proc = SensorFailureProcess.draw(MODALITIES, rng_for(seed, FAILURES))
    days = max(1, int(math.ceil(args.hours / 24.0)))
    events = failure_schedule(proc, days, rng_for(seed, FAILURES, 1))
    failures_to_csv(events, out / "failures.csv")

    bundle = build_model_bundle(8, {"depth": 64, "radar": 32, "audio": 16}, 16, 32,
                                rng_for(seed, MODEL_INIT))
    payload = len(serialize_bundle(bundle))
    compute = {f"node{i:02d}": args.compute_s for i in range(args.nodes)}
    rows, clock = [], 0.0
    while clock < horizon:
        rr = simulate_round(compute, trace, payload, clock)
        rows.append((clock, rr.round_s, len(rr.dropped)))
        clock += max(rr.round_s, 1.0)
    write_csv(out / "round_times.csv", ["t_start_s", "round_time_s", "dropped"], rows)

    day = [r for t, r, _ in rows if 7 * 3600 <= t % 86400 < 19 * 3600]
    night = [r for t, r, _ in rows if not 7 * 3600 <= t % 86400 < 19 * 3600]
    if day and night:
        ratio = float(np.mean(night)) / float(np.mean(day))
        print(f"night/day mean round time ratio: {ratio:.3f}")
    print(f"wrote {out / 'trace.csv'} ({len(trace._factors)} rows)")
    return 0


def cmd_pipeline(args) -> int:
    pre = args.pre if len(args.pre) > 1 else args.pre * len(MODALITIES)
    if len(pre) != len(MODALITIES):
        raise ConfigError(f"--pre takes 1 or {len(MODALITIES)} values")
    preprocess = dict(zip(MODALITIES, pre))
    fps = {}
    for mode in ("sequential", "pipelined"):
        spec = PipelineSpec(args.collect, preprocess, args.infer, mode)
        fps[mode] = pipeline_throughput(spec)
    print(f"{'mode':<12} {'frames_per_second':>18}")
    for mode, v in fps.items():
        print(f"{mode:<12} {v:>18.4f}")
    print(f"{'speedup':<12} {fps['pipelined'] / fps['sequential']:>18.4f}")
    if args.out or os.environ.get("FEDMARK_OUT"):
        out = _resolve_out(args)
        write_csv(out / "pipeline.csv", ["mode", "frames_per_second"],
                  list(fps.items()) + [("speedup", fps["pipelined"] / fps["sequential"])])
    return 0


def cmd_selftest(args) -> int:
    failures = selftest.run()
    print(f"{'OK' if failures == 0 else f'{failures} FAILURES'}")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmark", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the three-stage FL experiment")
    sim.add_argument("--config", help="TOML experiment config")
    sim.add_argument("--seed", type=int, help="override the config seed")
    sim.add_argument("--workers", type=int, help="parallel node workers (does not affect results)")
    sim.add_argument("--out", help="output directory")
    sim.add_argument("--stage", choices=["full", "pretrain-only"], default="full")
    sim.set_defaults(fn=cmd_simulate)

    an = sub.add_parser("analyze", help="biomarker statistics pipeline")
    an.add_argument("--detections", required=True, help="directory of per-subject t_s,class_idx CSVs")
    an.add_argument("--groups", required=True, help="subject_id,group CSV")
    an.add_argument("--classes", type=int, default=8, help="number of activity classes")
    an.add_argument("--alpha", type=float, default=0.05)
    an.add_argument("--folds", type=int, default=3)
    an.add_argument("--seed", type=int, default=0)
    an.add_argument("--out", help="output directory")
    an.set_defaults(fn=cmd_analyze)

    net = sub.add_parser("netsim", help="bandwidth/failure/round-time simulation")
    net.add_argument("--hours", type=float, default=24.0)
    net.add_argument("--nodes", type=int, default=20)
    net.add_argument("--compute-s", type=float, default=60.0, dest="compute_s")
    net.add_argument("--seed", type=int, default=0)
    net.add_argument("--out", help="output directory")
    net.set_defaults(fn=cmd_netsim)

    pl = sub.add_parser("pipeline", help="inference pipeline throughput")
    pl.add_argument("--collect", type=float, required=True)
    pl.add_argument("--pre", type=float, nargs="+", required=True,
                    help="preprocess seconds: one value for all modalities or one per modality")
    pl.add_argument("--infer", type=float, required=True)
    pl.add_argument("--out", help="optional output directory for pipeline.csv")
    pl.set_defaults(fn=cmd_pipeline)

    st = sub.add_parser("selftest", help="run the built-in oracle checks")
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FoldError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
