"""Stage I: multi-rotation training, normality scores and known/unknown separation."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import DomainSet, N_ROTATIONS
from .errors import DomainError, ParseError, ShapeError, ValidationError
from .losses import CentroidTable, stage1_objective
from .network import HIDDEN, NetworkBundle
from .training import (STAGE1_STREAM, EpochMeter, all_rotations, batch_rng, build_optimizer,
                       check_finite, minibatches, to_tensor)

log = logging.getLogger(__name__)

SCORE_MODES = ("max", "rotation", "entropy")


@dataclass
class NormalityRecord:
    sample_id: int
    rotation_score: float
    entropy_score: float
    normality: float
    rotation_probs: np.ndarray | None = field(default=None, repr=False)


@dataclass
class SeparationResult:
    threshold: float
    knw_ids: list
    unk_ids: list
    records: list

    def partition_of(self, sample_id) -> str:
        return "known" if sample_id in set(self.knw_ids) else "unknown"

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "knw_ids": [int(i) for i in self.knw_ids],
            "unk_ids": [int(i) for i in self.unk_ids],
            "records": [
                {"sample_id": int(r.sample_id), "rotation_score": r.rotation_score,
                 "entropy_score": r.entropy_score, "normality": r.normality}
                for r in self.records
            ],
        }

    @classmethod
    def from_dict(cls, d):
        records = [NormalityRecord(int(r["sample_id"]), float(r["rotation_score"]),
                                   float(r["entropy_score"]), float(r["normality"]))
                   for r in d["records"]]
        return cls(float(d["threshold"]), [int(i) for i in d["knw_ids"]],
                   [int(i) for i in d["unk_ids"]], records)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# training


def train_stage1(bundle: NetworkBundle, source: DomainSet, config, seed: int = 0):
    """Train E, C1 and R1 on all relative-rotation quadruples of the source.

    Returns the per-epoch log: a list of dicts with mean loss terms.
    """
    if len(source) == 0:
        raise ValidationError("stage 1 needs a nonempty source set")
    if bundle.stage != 1:
        raise ValidationError("train_stage1 expects a stage-1 bundle")
    n = len(source)
    images = to_tensor(source.images)
    rotated = all_rotations(images)
    labels = torch.from_numpy(source.labels.copy())
    # quadruple q -> (sample q // 4, rotation q % 4)
    n_quads = N_ROTATIONS * n
    steps_per_epoch = sum(1 for _ in range(0, n_quads, config.batch_size))
    opt, sched = build_optimizer(bundle, config, steps_per_epoch * config.epochs_stage1)
    table = CentroidTable(N_ROTATIONS * bundle.n_known, HIDDEN, alpha=config.center_alpha)
    weights = config.weights
    use_anchor = not config.no_anchor_s1

    history = []
    bundle.train()
    for epoch in range(config.epochs_stage1):
        meter = EpochMeter()
        rng = batch_rng(seed, STAGE1_STREAM, epoch)
        for step, qidx in enumerate(minibatches(n_quads, config.batch_size, rng)):
            qidx = torch.from_numpy(qidx)
            sidx, rot = qidx // N_ROTATIONS, qidx % N_ROTATIONS
            x, xr = images[sidx], rotated[rot, sidx]
            y = labels[sidx]
            z = N_ROTATIONS * y + rot

            feats = bundle.encode(torch.cat([x, xr]))
            f_a, f_r = feats.split(len(sidx))
            sem_logits = bundle.semantic_from_features(f_a, "C1")
            rot_logits, v = bundle.rotation_from_features(f_a, f_r, "R1", use_anchor)
            total, terms = stage1_objective(
                sem_logits.softmax(1), y, rot_logits.softmax(1), z, v, weights, table,
                reduction=config.reduction,
            )
            check_finite(total, terms, "stage1", epoch, step)
            opt.zero_grad()
            total.backward()
            opt.step()
            sched.step()
            meter.add(total, terms)
        entry = {"epoch": epoch, **meter.means()}
        history.append(entry)
        log.info("stage1 epoch %d %s", epoch, {k: round(v, 5) for k, v in entry.items() if k != "epoch"})
    bundle.eval()
    return history


# ---------------------------------------------------------------------------
# normality score


def _check_rotation_rows(z_rows):
    z = np.asarray(z_rows, dtype=np.float64)
    if z.ndim == 2:
        z = z[None]
    if z.ndim != 3 or z.shape[1] != N_ROTATIONS or z.shape[2] % N_ROTATIONS:
        raise ShapeError(f"expected (4, 4*n_known) rotation rows, got {np.shape(z_rows)}")
    return z


def rotation_scores(z_rows) -> np.ndarray:
    """Vectorised rotation score for an (N, 4, 4K) stack of prediction rows."""
    z = _check_rotation_rows(z_rows)
    n, _, width = z.shape
    k = width // N_ROTATIONS
    # entry [k*4 + i] of the i-th row: class k seen at the true rotation i
    per_class = z.reshape(n, N_ROTATIONS, k, N_ROTATIONS)
    consistent = np.einsum("nikj,ij->nk", per_class, np.eye(N_ROTATIONS))
    return consistent.max(axis=1) / N_ROTATIONS


def entropy_scores(z_rows) -> np.ndarray:
    """Vectorised entropy score, one minus the mean normalized entropy of the four rows."""
    z = _check_rotation_rows(z_rows)
    width = z.shape[2]
    h = -(z * np.log(np.clip(z, 1e-12, None))).sum(axis=2) / np.log(width)
    return 1.0 - h.mean(axis=1)


def rotation_score(z_rows) -> float:
    """Rotation score of one target sample from its four prediction rows (row i = rotation i)."""
    return float(rotation_scores(np.asarray(z_rows)[None])[0])


def entropy_score(z_rows) -> float:
    return float(entropy_scores(np.asarray(z_rows)[None])[0])


def combine_scores(rot, ent, mode="max"):
    if mode == "max":
        return np.maximum(rot, ent)
    if mode == "rotation":
        return np.asarray(rot)
    if mode == "entropy":
        return np.asarray(ent)
    raise ValidationError(f"unknown score mode {mode!r}")


@torch.no_grad()
def rotation_predictions(bundle: NetworkBundle, target: DomainSet, use_anchor=True, batch_size=256):
    """Softmax of R1 for every sample and every rotation: array (N, 4, 4K)."""
    bundle.eval()
    out = []
    for start in range(0, len(target), batch_size):
        x = to_tensor(target.images[start : start + batch_size])
        rotated = all_rotations(x)
        feats = bundle.encode(torch.cat([x, *rotated]))
        f_a, *f_rs = feats.split(len(x))
        rows = [bundle.rotation_from_features(f_a, f_r, "R1", use_anchor)[0].softmax(1) for f_r in f_rs]
        out.append(torch.stack(rows, dim=1).double().numpy())
    if not out:
        return np.zeros((0, N_ROTATIONS, N_ROTATIONS * bundle.n_known))
    return np.concatenate(out)


def records_from_predictions(sample_ids, z, mode="max", keep_rows=True) -> list[NormalityRecord]:
    rot = rotation_scores(z) if len(z) else np.zeros(0)
    ent = entropy_scores(z) if len(z) else np.zeros(0)
    norm = combine_scores(rot, ent, mode)
    return [
        NormalityRecord(int(sid), float(r), float(e), float(nv), z[j] if keep_rows else None)
        for j, (sid, r, e, nv) in enumerate(zip(sample_ids, rot, ent, norm))
    ]


def compute_normality_scores(bundle: NetworkBundle, target: DomainSet, mode="max",
                             use_anchor=True) -> list[NormalityRecord]:
    """Normality score of every target sample; ``mode`` selects the score ablations."""
    if mode not in SCORE_MODES:
        raise ValidationError(f"unknown score mode {mode!r}")
    z = rotation_predictions(bundle, target, use_anchor=use_anchor)
    return records_from_predictions(target.sample_ids, z, mode)


def separate_target(records) -> SeparationResult:
    """Threshold at the mean normality; a score equal to the mean counts as known."""
    if not records:
        raise DomainError("cannot separate an empty set of records")
    scores = np.array([r.normality for r in records])
    threshold = float(scores.mean())
    knw = [r.sample_id for r in records if r.normality >= threshold]
    unk = [r.sample_id for r in records if r.normality < threshold]
    return SeparationResult(threshold, knw, unk, list(records))


# ---------------------------------------------------------------------------
# score table

SCORE_COLUMNS = ("sample_id", "rotation_score", "entropy_score", "normality", "assigned_partition")


def write_scores(path, separation: SeparationResult):
    knw = set(separation.knw_ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for r in separation.records:
            w.writerow([r.sample_id, f"{r.rotation_score:.6f}", f"{r.entropy_score:.6f}",
                        f"{r.normality:.6f}", "known" if r.sample_id in knw else "unknown"])


def read_scores(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(SCORE_COLUMNS):
            raise ParseError(f"expected header {','.join(SCORE_COLUMNS)}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(SCORE_COLUMNS):
                raise ParseError(f"expected {len(SCORE_COLUMNS)} fields, got {len(row)}", path, lineno)
            try:
                rows.append({
                    "sample_id": int(row[0]),
                    "rotation_score": float(row[1]),
                    "entropy_score": float(row[2]),
                    "normality": float(row[3]),
                    "assigned_partition": row[4].strip(),
                })
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            if rows[-1]["assigned_partition"] not in ("known", "unknown"):
                raise ParseError(f"bad partition {row[4]!r}", path, lineno)
    return rows
