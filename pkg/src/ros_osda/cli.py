"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 training failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, parse_overrides
from .dataset import export_image_folder
from .errors import TrainingError, ValidationError
from .harness import (OpennessSweepSpec, RunPaths, ablate, evaluate_stage1_only, experiment_dir,
                      load_data, normality_auc, run_openness_sweep, run_pipeline, run_separation,
                      run_stage2, score_files)
from .metrics import evaluate, format_table
from .network import load_checkpoint
from .stage1 import SeparationResult

EXIT_OK, EXIT_VALIDATION, EXIT_TRAINING, EXIT_IO = 0, 2, 3, 4


def load_config(args) -> ExperimentConfig:
    overrides = parse_overrides(args.set)
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    if args.config:
        return ExperimentConfig.from_file(args.config, overrides)
    return ExperimentConfig.from_mapping(overrides)


def _seed(args, config) -> int:
    return config.seeds[0] if args.seed is None else args.seed


def cmd_synth(args):
    config = load_config(args)
    source, target, split = load_data(config)
    root = Path(args.dest)
    export_image_folder(source, root, "source")
    export_image_folder(target, root, "target")
    (root / "classes.txt").write_text("\n".join(split.ordered_classes) + "\n")
    print(f"wrote {len(source)} source and {len(target)} target images to {root}")
    print(f"known: {split.n_known}, total: {split.n_total}, openness: {split.openness:.3f}")


def cmd_stage1(args):
    config = load_config(args)
    if args.seed is not None:
        config = config.replace(seeds=(args.seed,))
    report = evaluate_stage1_only(config)
    for seed, auc in report.auc_per_seed.items():
        print(f"seed {seed}: AUC-ROC {auc:.4f}" if auc is not None else f"seed {seed}: AUC-ROC undefined")
    print(f"{report.label}: mean {report.mean:.4f} std {report.std:.4f}")


def cmd_separate(args):
    config = load_config(args)
    seed = _seed(args, config)
    paths = RunPaths.for_seed(config.output_dir, config, seed).ensure()
    bundle1, _ = load_checkpoint(args.checkpoint or paths.stage1_checkpoint)
    _, target, split = load_data(config)
    separation = run_separation(config, bundle1, target, paths)
    auc = normality_auc(separation, target, split.n_known)
    print(f"threshold {separation.threshold:.6f}: {len(separation.knw_ids)} known, "
          f"{len(separation.unk_ids)} unknown" + (f", AUC-ROC {auc:.4f}" if auc is not None else ""))
    print(f"wrote {paths.scores} and {paths.separation}")


def cmd_stage2(args):
    config = load_config(args)
    seed = _seed(args, config)
    experiment_dir(config.output_dir, config)
    paths = RunPaths.for_seed(config.output_dir, config, seed).ensure()
    bundle1, _ = load_checkpoint(args.checkpoint or paths.stage1_checkpoint)
    separation = SeparationResult.load(args.separation or paths.separation)
    source, target, split = load_data(config)
    _, records = run_stage2(config, bundle1, source, target, separation, seed, paths)
    normality = {r.sample_id: r.normality for r in separation.records}
    scores = [normality.get(r.sample_id) for r in records]
    report = evaluate([r.predicted_label for r in records], [r.ground_truth for r in records],
                      split.n_known, normality=None if None in scores else scores,
                      label=config.ablation_label, config_hash=config.config_hash)
    report.save(paths.metrics)
    print(report.summary_row())


def cmd_run(args):
    config = load_config(args)
    aggregate, reports = run_pipeline(config)
    for seed, r in zip(config.seeds, reports):
        print(f"seed {seed}: {r.summary_row()}")
    print(f"{aggregate.label} [{aggregate.config_hash}]: {aggregate.summary_row()}")


def cmd_sweep(args):
    config = load_config(args)
    rows = run_openness_sweep(config, OpennessSweepSpec.parse(args.windows))
    for r in rows:
        print(f"n_known={r['n_known']:>3} openness={r['openness']:.3f} "
              f"OS*={r['os_star']:.1f} UNK={r['unk']:.1f} HOS={r['hos']:.1f}")


def cmd_score(args):
    report = score_files(args.predictions, args.scores, args.n_known)
    if args.json:
        sys.stdout.write(report.to_json())
    else:
        print(report.summary_row())


def cmd_ablate(args):
    config = load_config(args)
    results = ablate(config)
    print(format_table(results))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ros-osda", description="Two-stage open-set domain adaptation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, out=True):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
        if out:
            p.add_argument("--out", help="output directory (overrides output_dir)")
        return p

    p = with_config(sub.add_parser("synth", help="export the configured dataset as image folders"), out=False)
    p.add_argument("dest", help="destination directory")
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("stage1", help="train Stage I and report normality AUC-ROC"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_stage1)

    p = with_config(sub.add_parser("separate", help="score the target and split it into known/unknown"))
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="Stage I checkpoint (default: the run directory's)")
    p.set_defaults(func=cmd_separate)

    p = with_config(sub.add_parser("stage2", help="train Stage II from a Stage I checkpoint and separation"))
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="Stage I checkpoint (default: the run directory's)")
    p.add_argument("--separation", help="separation.json (default: the run directory's)")
    p.set_defaults(func=cmd_stage2)

    p = with_config(sub.add_parser("run", help="full pipeline over all configured seeds"))
    p.set_defaults(func=cmd_run)

    p = with_config(sub.add_parser("sweep", help="openness sweep over known-class windows"))
    p.add_argument("--windows", required=True, help='e.g. "25:0,25,40;10:0,10,20;5:0,5,10"')
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("score", help="recompute metrics from exported files")
    p.add_argument("predictions")
    p.add_argument("--scores", help="scores.csv, enables AUC-ROC")
    p.add_argument("--n-known", type=int, required=True)
    p.add_argument("--json", action="store_true", help="print the full report as JSON")
    p.set_defaults(func=cmd_score)

    p = with_config(sub.add_parser("ablate", help="run the ablation matrix"))
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
