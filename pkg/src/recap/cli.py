"""Command-line interface: preprocess, train, evaluate, analyze-hops, synth, report.

Every subcommand takes ``--config`` plus repeatable ``--set key=value``
overrides with flat dotted keys, persists the resolved config into the run
directory, and is deterministic under a fixed seed. Exit codes: 0 success,
2 invalid config or input schema, 3 training diverged, 4 checkpoint
fingerprint mismatch, 5 infeasible synthetic world spec.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from . import dataset as ds
from .config import ConfigError, RunConfig, model_fingerprint
from .evaluation import build_report
from .model import (CheckpointError, build_model, load_checkpoint,
                    save_checkpoint)
from .reporting import (eval_report_tables, hop_analysis_table, load_history,
                        plot_frequency_bins, plot_training_curves,
                        write_eval_report, write_hop_analysis)
from .revisit import build_candidate_blocks
from .synth import SynthSpecError, SyntheticWorldSpec, write_world
from .training import (CurriculumState, TrainingDiverged, fit, predict_ranks)
from .transition_graph import count_transitions, coverage_snr, unseen_test_pairs

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_FINGERPRINT = 4
EXIT_SYNTH = 5


def _load_config(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        key, value = config_mod.parse_override(item)
        overrides[key] = value
    return config_mod.load_config(args.config, overrides)


def _prepare_run_dir(cfg: RunConfig) -> Path:
    run_dir = cfg.resolved_output_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    config_mod.save_resolved_config(cfg, run_dir)
    return run_dir


def _store_path(cfg: RunConfig, run_dir: Path) -> Path:
    p = Path(cfg.data.store_file)
    return p if p.is_absolute() else run_dir / p


def _fingerprint_for(cfg: RunConfig, store: ds.InstanceStore) -> str:
    return model_fingerprint(cfg, store.vocab.num_pois, store.vocab.num_users,
                             store.vocab.num_categories)


def cmd_preprocess(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    run_dir = _prepare_run_dir(cfg)
    records = ds.load_checkins(cfg.data.path, cfg.data.delimiter,
                               cfg.data.timestamp_format)
    store = ds.build_store(
        records,
        (cfg.data.train_ratio, cfg.data.val_ratio, cfg.data.test_ratio),
        cfg.data.gap_threshold_hours,
        cfg.data.suffix_len,
    )
    ds.save_store(store, _store_path(cfg, run_dir))

    transition_store = count_transitions(
        store.sequences, store.vocab.num_pois,
        across_trajectories=cfg.graph.count_across_trajectories)
    from .evaluation import unique_pair_shares
    shares = unique_pair_shares(store.test.source, store.test.target,
                                transition_store, cfg.eval.tail_threshold)
    counts = np.asarray([transition_store.count(int(s), int(d))
                         for s, d in zip(store.test.source, store.test.target)])
    instance_tail = float((counts <= cfg.eval.tail_threshold).mean()) if len(counts) else None

    summary = {
        "users": store.vocab.num_users,
        "pois": store.vocab.num_pois,
        "categories": store.vocab.num_categories,
        "checkins": store.meta["num_checkins"],
        "train_instances": len(store.train),
        "val_instances": len(store.val),
        "test_instances": len(store.test),
        "dropped": store.meta["dropped"],
        "tail_share_unique_pairs": shares["tail_share"],
        "tail_share_instances": instance_tail,
        "store_file": str(_store_path(cfg, run_dir)),
    }
    with open(run_dir / "preprocess_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    for key, value in summary.items():
        print(f"{key}: {value}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    run_dir = _prepare_run_dir(cfg)
    store = ds.load_store(_store_path(cfg, run_dir))

    torch.manual_seed(cfg.seed)
    model = build_model(store, cfg.model, cfg.revisit)
    log_path = run_dir / cfg.training.log_file
    log_path.unlink(missing_ok=True)
    result = fit(store, model, cfg, log_path=log_path)

    model.load_state_dict(result.best_state)
    fingerprint = _fingerprint_for(cfg, store)
    ckpt_path = run_dir / cfg.training.checkpoint_file
    save_checkpoint(ckpt_path, model, fingerprint, extra={
        "best_epoch": result.best_epoch,
        "best_val_mrr": result.best_val_mrr,
        "stage": dataclasses.asdict(result.best_stage),
        "seed": cfg.seed,
    })
    plot_training_curves(result.history, run_dir / "training_curves.png")
    print(f"best epoch: {result.best_epoch}  val MRR: {result.best_val_mrr:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    run_dir = _prepare_run_dir(cfg)
    store = ds.load_store(_store_path(cfg, run_dir))

    ckpt_path = Path(args.checkpoint) if args.checkpoint else run_dir / cfg.training.checkpoint_file
    payload = load_checkpoint(ckpt_path, expected_fingerprint=_fingerprint_for(cfg, store))

    torch.manual_seed(cfg.seed)
    model = build_model(store, cfg.model, cfg.revisit)
    model.load_state_dict(payload["state_dict"])
    transition_store = count_transitions(
        store.sequences, store.vocab.num_pois,
        across_trajectories=cfg.graph.count_across_trajectories)
    from .transition_graph import normalize
    model.attach_graph(normalize(transition_store))

    stage = CurriculumState(**payload["stage"])
    blocks = build_candidate_blocks(store.sequences, store.test,
                                    cfg.revisit.window_len, cfg.revisit.candidate_cap)
    ranks = predict_ranks(model, store.test, blocks, store.vocab.pad_poi, stage)
    report = build_report(ranks, store.test.source, store.test.target,
                          transition_store, cfg.eval.tail_threshold,
                          cutoffs=tuple(cfg.eval.cutoffs))
    stem = Path(cfg.eval.report_file).stem
    written = write_eval_report(report, run_dir, stem=stem)
    print(eval_report_tables(report))
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_analyze_hops(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    run_dir = _prepare_run_dir(cfg)
    store = ds.load_store(_store_path(cfg, run_dir))
    transition_store = count_transitions(
        store.sequences, store.vocab.num_pois,
        across_trajectories=cfg.graph.count_across_trajectories)
    unseen = unseen_test_pairs(store.test.source, store.test.target, transition_store)
    analysis = coverage_snr(unseen, transition_store, list(cfg.eval.hop_values))
    written = write_hop_analysis(analysis, run_dir)
    print(hop_analysis_table(analysis))
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    run_dir = _prepare_run_dir(cfg)
    s = cfg.synth
    spec = SyntheticWorldSpec(
        num_users=s.num_users, num_pois=s.num_pois, num_checkins=s.num_checkins,
        num_withheld_pairs=s.num_withheld_pairs, num_clusters=s.num_clusters,
        revisit_prob=s.revisit_prob, away_favorite_prob=s.away_favorite_prob,
        traversals_per_triple=s.traversals_per_triple,
        burst_len_min=s.burst_len_min, burst_len_max=s.burst_len_max,
        seed=cfg.seed,
    )
    out_file = Path(s.output_file)
    if not out_file.is_absolute():
        out_file = run_dir / out_file
    sidecar = Path(s.sidecar_file)
    if not sidecar.is_absolute():
        sidecar = run_dir / sidecar
    truth = write_world(spec, out_file, sidecar)
    print(f"wrote {truth['num_checkins']} check-ins to {out_file}")
    print(f"wrote ground truth to {sidecar}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.exists():
        raise ConfigError(f"run directory not found: {run_dir}")
    produced = []
    log_path = run_dir / "training_log.jsonl"
    if log_path.exists():
        history = load_history(log_path)
        if history:
            produced.append(plot_training_curves(history, run_dir / "training_curves.png"))
    report_path = run_dir / "eval_report.json"
    if report_path.exists():
        with open(report_path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        from .evaluation import EvalReport
        report = EvalReport(
            overall=payload["overall"], head=payload["head"], tail=payload["tail"],
            pair_shares=payload["unique_pair_view"], bins=payload["frequency_bins"],
            tail_threshold=payload["tail_threshold"],
        )
        produced.append(plot_frequency_bins(report, run_dir / "eval_report_bins.png"))
        (run_dir / "eval_report.txt").write_text(eval_report_tables(report),
                                                 encoding="utf-8")
        produced.append(run_dir / "eval_report.txt")
    if not produced:
        print("nothing to report: no training log or eval report found")
        return EXIT_CONFIG
    for path in produced:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recap",
        description="Transition-level long-tail next-POI prediction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (dotted path)")

    p = sub.add_parser("preprocess", help="build the instance store from raw check-ins")
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="run the staged training curriculum")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint path override")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-hops", help="hop coverage / SNR diagnostics")
    common(p)
    p.set_defaults(func=cmd_analyze_hops)

    p = sub.add_parser("synth", help="generate a synthetic check-in world")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="re-render figures and tables for a run")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ds.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: {exc} (last good epoch: {exc.last_good_epoch})", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except SynthSpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SYNTH


if __name__ == "__main__":
    sys.exit(main())
