"""Experiment orchestration: full pipeline runs, Stage I evaluation, openness sweeps and ablations.

Every run writes to ``<out>/<config-hash>/<seed>/``::

    checkpoints/stage1.pt, checkpoints/stage2.pt
    scores.csv, separation.json, predictions.csv, metrics.json, log.txt

and ``<out>/<config-hash>/`` holds the effective ``config.txt`` and the
multi-seed ``aggregate.json``.
"""
from __future__ import annotations

import csv
import functools
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .dataset import (ClassSplit, DomainSet, SyntheticSpec, apply_split, discover_classes,
                      generate_synthetic_pool, load_image_folder, read_class_list)
from .errors import ParseError, TrainingError, ValidationError
from .metrics import MetricsReport, aggregate_runs, auc_roc, evaluate, format_table
from .network import NetworkBundle, build_encoder, save_checkpoint, transfer_stage1_to_stage2
from .stage1 import (SeparationResult, compute_normality_scores, read_scores, separate_target,
                     train_stage1, write_scores)
from .stage2 import predict, read_predictions, train_stage2, write_predictions
from .training import seed_everything

log = logging.getLogger(__name__)
PACKAGE_LOGGER = "ros_osda"


# ---------------------------------------------------------------------------
# data


@functools.lru_cache(maxsize=4)
def _synthetic_pool(spec: SyntheticSpec):
    return generate_synthetic_pool(spec)


def class_names_for(config: ExperimentConfig) -> list:
    if config.dataset == "synthetic":
        return list(_synthetic_pool(config.synthetic_spec())[0].class_names)
    if config.class_list_file:
        return read_class_list(config.class_list_file)
    return discover_classes(config.data_root, config.target_domain)


def load_data(config: ExperimentConfig) -> tuple[DomainSet, DomainSet, ClassSplit]:
    """Source set, target set and class split described by ``config``.

    The known classes are the window ``[known_start, known_start + n_known)``
    of the ordered class list; all remaining classes are target-private.
    """
    names = class_names_for(config)
    split = ClassSplit.window(names, config.known_start, config.n_known)
    if config.dataset == "synthetic":
        source, target = apply_split(*_synthetic_pool(config.synthetic_spec()), split)
    else:
        source, target = load_image_folder(config.data_root, split, config.source_domain,
                                           config.target_domain, image_size=config.image_size)
    return source, target, split


# ---------------------------------------------------------------------------
# run layout


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @classmethod
    def for_seed(cls, out_dir, config: ExperimentConfig, seed: int) -> "RunPaths":
        return cls(Path(out_dir) / config.config_hash / str(seed))

    def ensure(self) -> "RunPaths":
        self.checkpoints.mkdir(parents=True, exist_ok=True)
        return self

    @property
    def checkpoints(self):
        return self.root / "checkpoints"

    @property
    def stage1_checkpoint(self):
        return self.checkpoints / "stage1.pt"

    @property
    def stage2_checkpoint(self):
        return self.checkpoints / "stage2.pt"

    @property
    def scores(self):
        return self.root / "scores.csv"

    @property
    def separation(self):
        return self.root / "separation.json"

    @property
    def predictions(self):
        return self.root / "predictions.csv"

    @property
    def metrics(self):
        return self.root / "metrics.json"

    @property
    def log(self):
        return self.root / "log.txt"


def experiment_dir(out_dir, config: ExperimentConfig) -> Path:
    d = Path(out_dir) / config.config_hash
    d.mkdir(parents=True, exist_ok=True)
    config.save(d / "config.txt")
    return d


class _RunLog:
    """Attach a ``log.txt`` handler to the package logger for the duration of one run."""

    def __init__(self, path):
        self.handler = logging.FileHandler(path, mode="w")
        self.handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        self.logger = logging.getLogger(PACKAGE_LOGGER)

    def __enter__(self):
        self.logger.addHandler(self.handler)
        self._level = self.logger.level
        if self.logger.level == logging.NOTSET or self.logger.level > logging.INFO:
            self.logger.setLevel(logging.INFO)
        return self

    def __exit__(self, *exc):
        self.logger.removeHandler(self.handler)
        self.logger.setLevel(self._level)
        self.handler.close()
        return False


def _stage(name):
    """Re-raise unexpected failures inside a pipeline step as TrainingError tagged with the step."""
    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except (TrainingError, ValidationError, OSError):
                raise
            except Exception as exc:
                raise TrainingError(f"{type(exc).__name__}: {exc}", stage=name) from exc
        return inner
    return wrap


# ---------------------------------------------------------------------------
# pipeline steps


def new_stage1_bundle(config: ExperimentConfig, n_known: int) -> NetworkBundle:
    spec = {"name": config.backbone}
    if config.backbone == "resnet50" and config.backbone_weights:
        spec["weights_path"] = config.backbone_weights
    return NetworkBundle(build_encoder(spec), n_known, stage=1,
                         head_lr_multiplier=config.head_lr_mult,
                         unknown_lr_multiplier=config.unknown_lr_mult)


@_stage("stage1")
def run_stage1(config, source, seed, paths: RunPaths | None = None, cache: dict | None = None):
    """Train (or fetch from ``cache``) the Stage I bundle for ``seed``.

    The cache key ignores Stage II and scoring-only settings, so ablation rows
    that differ only there share one training.
    """
    key = (config.stage1_hash(), seed)
    if cache is not None and key in cache:
        log.info("stage1: reusing training %s seed %d", key[0], seed)
        bundle = cache[key]
    else:
        seed_everything(seed)
        bundle = new_stage1_bundle(config, len(source.class_names))
        t0 = time.perf_counter()
        train_stage1(bundle, source, config, seed=seed)
        log.info("stage1: trained in %.1fs", time.perf_counter() - t0)
        if cache is not None:
            cache[key] = bundle
    if paths is not None:
        save_checkpoint(bundle, paths.stage1_checkpoint, config.stage1_hash())
    return bundle


def normality_auc(separation: SeparationResult, target: DomainSet, n_known: int):
    """AUC-ROC of the normality scores against the true known/unknown membership."""
    labels = dict(zip(target.sample_ids.tolist(), target.labels.tolist()))
    scores = [r.normality for r in separation.records]
    is_known = [labels[r.sample_id] < n_known for r in separation.records]
    if all(is_known) or not any(is_known):
        return None
    return auc_roc(scores, is_known)


@_stage("separation")
def run_separation(config, bundle1, target, paths: RunPaths | None = None) -> SeparationResult:
    records = compute_normality_scores(bundle1, target, mode=config.score_mode,
                                       use_anchor=not config.no_anchor_s1)
    separation = separate_target(records)
    log.info("separation: threshold %.6f, %d known / %d unknown", separation.threshold,
             len(separation.knw_ids), len(separation.unk_ids))
    if paths is not None:
        write_scores(paths.scores, separation)
        separation.save(paths.separation)
    return separation


@_stage("stage2")
def run_stage2(config, bundle1, source, target, separation, seed, paths: RunPaths | None = None):
    """Transfer, train Stage II and predict; returns ``(bundle2, predictions)``."""
    seed_everything(seed)
    bundle2 = transfer_stage1_to_stage2(bundle1, transfer=config.stage2_transfer,
                                        unknown_lr_multiplier=config.unknown_lr_mult)
    t0 = time.perf_counter()
    train_stage2(bundle2, source, target, None if config.source_only else separation, config, seed=seed)
    log.info("stage2: trained in %.1fs", time.perf_counter() - t0)
    records = predict(bundle2, target)
    if paths is not None:
        save_checkpoint(bundle2, paths.stage2_checkpoint, config.config_hash)
        write_predictions(paths.predictions, records)
    return bundle2, records


def run_seed(config: ExperimentConfig, seed: int, data=None, out_dir=None,
             stage1_cache: dict | None = None) -> MetricsReport:
    """One complete Stage I -> separation -> Stage II -> metrics run."""
    source, target, split = data if data is not None else load_data(config)
    out_dir = out_dir or config.output_dir
    paths = RunPaths.for_seed(out_dir, config, seed).ensure()
    with _RunLog(paths.log):
        log.info("run %s seed %d (%s)", config.config_hash, seed, config.ablation_label)
        bundle1 = run_stage1(config, source, seed, paths, stage1_cache)
        separation = run_separation(config, bundle1, target, paths)
        _, records = run_stage2(config, bundle1, source, target, separation, seed, paths)
        normality = {r.sample_id: r.normality for r in separation.records}
        report = evaluate([r.predicted_label for r in records], [r.ground_truth for r in records],
                          split.n_known, normality=[normality[r.sample_id] for r in records],
                          label=config.ablation_label, config_hash=config.config_hash)
        report.save(paths.metrics)
        log.info("metrics: %s", report.summary_row())
    return report


def run_pipeline(config: ExperimentConfig, out_dir=None, stage1_cache: dict | None = None):
    """Run every seed of ``config`` and aggregate.

    Returns ``(aggregate, per_seed_reports)``; the aggregate is also written to
    ``<out>/<config-hash>/aggregate.json``.
    """
    out_dir = out_dir or config.output_dir
    data = load_data(config)
    exp = experiment_dir(out_dir, config)
    reports = [run_seed(config, seed, data, out_dir, stage1_cache) for seed in config.seeds]
    aggregate = aggregate_runs(reports)
    aggregate.save(exp / "aggregate.json")
    return aggregate, reports


# ---------------------------------------------------------------------------
# Stage I only


@dataclass
class Stage1Report:
    label: str
    config_hash: str
    auc_per_seed: dict
    mean: float
    std: float

    def to_dict(self):
        return {"label": self.label, "config_hash": self.config_hash,
                "auc_per_seed": {str(k): v for k, v in self.auc_per_seed.items()},
                "mean": self.mean, "std": self.std}


def evaluate_stage1_only(config: ExperimentConfig, out_dir=None,
                         stage1_cache: dict | None = None) -> Stage1Report:
    """Train Stage I for every seed and report the AUC-ROC of the normality score."""
    out_dir = out_dir or config.output_dir
    source, target, split = load_data(config)
    exp = experiment_dir(out_dir, config)
    aucs = {}
    for seed in config.seeds:
        paths = RunPaths.for_seed(out_dir, config, seed).ensure()
        with _RunLog(paths.log):
            bundle1 = run_stage1(config, source, seed, paths, stage1_cache)
            separation = run_separation(config, bundle1, target, paths)
            aucs[seed] = normality_auc(separation, target, split.n_known)
            log.info("stage1 AUC-ROC %s", aucs[seed])
    values = np.array([v for v in aucs.values() if v is not None], dtype=np.float64)
    mean = float(values.mean()) if len(values) else float("nan")
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    report = Stage1Report(config.ablation_label, config.config_hash, aucs, mean, std)
    with open(exp / "stage1_auc.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


# ---------------------------------------------------------------------------
# re-scoring exported files


def score_files(predictions_path, scores_path=None, n_known: int | None = None) -> MetricsReport:
    """Recompute the metrics of a run from ``predictions.csv`` (and ``scores.csv`` for AUC)."""
    if n_known is None or n_known < 1:
        raise ValidationError("n_known must be a positive integer")
    preds = read_predictions(predictions_path)
    if not preds:
        raise ParseError("no prediction rows", predictions_path)
    normality = None
    if scores_path is not None:
        by_id = {r["sample_id"]: r["normality"] for r in read_scores(scores_path)}
        missing = [p["sample_id"] for p in preds if p["sample_id"] not in by_id]
        if missing:
            raise ParseError(f"sample ids without a normality score: {missing[:5]}", scores_path)
        normality = [by_id[p["sample_id"]] for p in preds]
    return evaluate([p["predicted_label"] for p in preds], [p["ground_truth"] for p in preds],
                    n_known, normality=normality)


# ---------------------------------------------------------------------------
# openness sweep


@dataclass(frozen=True)
class OpennessSweepSpec:
    """Known-class windows: ``settings`` is a tuple of ``(n_known, (start, ...))``."""

    settings: tuple

    @classmethod
    def parse(cls, text: str) -> "OpennessSweepSpec":
        """``"25:0,25,40;10:0,10,20"`` -> 25 known classes at starts 0, 25 and 40, ..."""
        settings = []
        for part in text.split(";"):
            part = part.strip()
            if not part:
                continue
            try:
                n, starts = part.split(":")
                settings.append((int(n), tuple(int(s) for s in starts.split(",") if s.strip())))
            except ValueError:
                raise ValidationError(f"bad sweep setting {part!r}, expected n_known:start,start") from None
        if not settings:
            raise ValidationError("empty sweep specification")
        return cls(tuple(settings))

    def validate(self, n_classes: int):
        for n, starts in self.settings:
            if not starts:
                raise ValidationError(f"setting with {n} known classes has no window")
            for s in starts:
                if n < 1 or s < 0 or s + n > n_classes:
                    raise ValidationError(f"window [{s}, {s + n}) out of range for {n_classes} classes")
                if n == n_classes:
                    raise ValidationError("a window must leave at least one unknown class")


SWEEP_COLUMNS = ("n_known", "openness", "os_star", "unk", "hos", "os", "n_windows")


def run_openness_sweep(config: ExperimentConfig, sweep: OpennessSweepSpec, out_dir=None,
                       stage1_cache: dict | None = None) -> list[dict]:
    """Run every window, average per setting, and write ``sweep.csv`` and ``sweep.png``."""
    out_dir = Path(out_dir or config.output_dir)
    n_classes = len(class_names_for(config))
    sweep.validate(n_classes)
    rows = []
    for n, starts in sweep.settings:
        reports = []
        for s in starts:
            agg, _ = run_pipeline(config.replace(n_known=n, known_start=s), out_dir, stage1_cache)
            reports.append(agg)
        row = {"n_known": n, "openness": 1.0 - n / n_classes, "n_windows": len(starts)}
        for key in ("os_star", "unk", "hos", "os"):
            row[key] = float(np.mean([getattr(r, key) for r in reports]))
        rows.append(row)
        log.info("sweep n_known=%d openness=%.3f %s", n, row["openness"], row)
    sweep_dir = out_dir / f"sweep_{config.config_hash}"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(sweep_dir / "sweep.csv", rows)
    plot_sweep(sweep_dir / "sweep.png", rows)
    return rows


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r["n_known"]] + [f"{r[k]:.6f}" for k in SWEEP_COLUMNS[1:-1]] + [r["n_windows"]])


def plot_sweep(path, rows):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = sorted(rows, key=lambda r: r["openness"])
    x = [r["openness"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key, name in (("os_star", "OS*"), ("unk", "UNK"), ("hos", "HOS")):
        ax.plot(x, [r[key] for r in rows], marker="o", label=name)
    ax.set_xlabel("openness")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# ablation matrix

ABLATION_ROWS = (
    (),
    ("no_center_loss",),
    ("no_anchor_s1",),
    ("no_anchor_s1", "no_center_loss"),
    ("no_rot_score",),
    ("no_ent_score",),
    ("no_anchor_s2",),
    ("no_anchor_s2", "no_entropy_s2"),
    ("no_entropy_s2",),
)


def ablation_configs(config: ExperimentConfig) -> list[ExperimentConfig]:
    base = config.replace(**{s: False for rows in ABLATION_ROWS for s in rows})
    return [base.replace(**{s: True for s in switches}) for switches in ABLATION_ROWS]


def ablate(config: ExperimentConfig, out_dir=None) -> list[tuple[str, MetricsReport]]:
    """Run the ablation matrix; Stage I is trained once per distinct Stage I setting."""
    out_dir = Path(out_dir or config.output_dir)
    cache = {}
    results = []
    for cfg in ablation_configs(config):
        agg, _ = run_pipeline(cfg, out_dir, cache)
        results.append((cfg.ablation_label, agg))
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("label", "config_hash", "auc_roc", "os_star", "unk", "hos", "os"))
        for label, r in results:
            auc = "" if r.auc_roc is None else f"{r.auc_roc:.6f}"
            w.writerow([label, r.config_hash, auc] + [f"{getattr(r, k):.6f}" for k in ("os_star", "unk", "hos", "os")])
    (out_dir / "ablation.txt").write_text(format_table(results) + "\n")
    return results

