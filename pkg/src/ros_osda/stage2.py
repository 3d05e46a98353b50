"""Stage II: open-set classifier training on source + separated target, and prediction."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import DomainSet, N_ROTATIONS
from .errors import ParseError, ValidationError
from .losses import stage2_objective
from .network import NetworkBundle
from .stage1 import SeparationResult
from .training import (STAGE2_STREAM, EpochMeter, all_rotations, batch_rng, build_optimizer,
                       check_finite, to_tensor)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StreamBatchPlan:
    """Per-iteration batch sizes of the (source, unknown, known) streams."""

    sizes: tuple
    batch_sizes: tuple

    @classmethod
    def build(cls, n_source, n_unk, n_knw, batch_size):
        sizes = (n_source, n_unk, n_knw)
        # at least two rows per batch: the heads use batch normalization
        batch_sizes = tuple(max(min(batch_size, s), 2) if s else 0 for s in sizes)
        return cls(sizes, batch_sizes)

    @property
    def iterations(self) -> int:
        return max((math.ceil(s / b) for s, b in zip(self.sizes, self.batch_sizes) if s), default=0)


class _CyclingStream:
    """Reshuffles and restarts when exhausted, so small streams repeat within an epoch."""

    def __init__(self, n, batch_size, rng):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.order, self.pos = rng.permutation(n), 0

    def next(self):
        if self.n == 0:
            return np.zeros(0, dtype=np.int64)
        idx = []
        while len(idx) < self.batch_size:
            if self.pos >= self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            take = min(self.batch_size - len(idx), self.n - self.pos)
            idx.extend(self.order[self.pos : self.pos + take])
            self.pos += take
        return np.asarray(idx, dtype=np.int64)


@dataclass
class PredictionRecord:
    sample_id: int
    predicted_label: int
    ground_truth: int
    confidence: np.ndarray = field(repr=False)

    @property
    def max_confidence(self) -> float:
        return float(np.max(self.confidence))


def train_stage2(bundle: NetworkBundle, source: DomainSet, target: DomainSet,
                 separation: SeparationResult | None, config, seed: int = 0):
    """Train E, C2 and R2.

    Target labels are never read: only the images and the ids named by
    ``separation`` are used. ``separation=None`` (or ``config.source_only``)
    trains on the source stream alone.
    """
    if bundle.stage != 2:
        raise ValidationError("train_stage2 expects a stage-2 bundle")
    target = target.without_labels()
    if separation is None or config.source_only:
        unk_set = target.subset([])
        knw_set = target.subset([])
    else:
        unk_set = target.select_ids(separation.unk_ids)
        knw_set = target.select_ids(separation.knw_ids)
    if len(unk_set) == 0 and len(knw_set) == 0 and not config.source_only:
        log.warning("stage2: both target streams are empty, training on the source only")

    n_known = bundle.n_known
    src_x = to_tensor(source.images)
    src_y = torch.from_numpy(source.labels.copy())
    unk_x = to_tensor(unk_set.images)
    knw_x = to_tensor(knw_set.images)
    knw_rot = all_rotations(knw_x) if len(knw_set) else None

    plan = StreamBatchPlan.build(len(source), len(unk_set), len(knw_set), config.batch_size)
    opt, sched = build_optimizer(bundle, config, plan.iterations * config.epochs_stage2)
    weights = config.weights
    use_anchor = not config.no_anchor_s2
    use_knw = len(knw_set) > 0 and (weights.lambda_2_1 > 0 or weights.lambda_2_2 > 0)

    history = []
    bundle.train()
    for epoch in range(config.epochs_stage2):
        rng = batch_rng(seed, STAGE2_STREAM, epoch)
        streams = [_CyclingStream(n, b, rng) for n, b in zip(plan.sizes, plan.batch_sizes)]
        meter = EpochMeter()
        for step in range(plan.iterations):
            s_idx, u_idx, k_idx = (torch.from_numpy(s.next()) for s in streams)
            if not use_knw:
                k_idx = k_idx[:0]
            rot_i = torch.from_numpy(rng.integers(0, N_ROTATIONS, size=len(k_idx)))

            parts = [src_x[s_idx], unk_x[u_idx]]
            if len(k_idx):
                parts += [knw_x[k_idx], knw_rot[rot_i, k_idx]]
            feats = bundle.encode(torch.cat(parts))
            f_s, f_u, f_k, f_kr = feats.split([len(s_idx), len(u_idx), len(k_idx), len(k_idx)])

            sup_logits = bundle.semantic_from_features(torch.cat([f_s, f_u]), "C2")
            sup_targets = torch.cat([src_y[s_idx], torch.full((len(u_idx),), n_known, dtype=torch.long)])
            if len(k_idx):
                knw_probs = bundle.semantic_from_features(f_k, "C2").softmax(1)
                rot_probs = bundle.rotation_from_features(f_k, f_kr, "R2", use_anchor)[0].softmax(1)
            else:
                knw_probs = sup_logits.new_zeros((0, n_known + 1))
                rot_probs = sup_logits.new_zeros((0, N_ROTATIONS))
            total, terms = stage2_objective(sup_logits.softmax(1), sup_targets, knw_probs, rot_probs,
                                            rot_i, weights, reduction=config.reduction)
            check_finite(total, terms, "stage2", epoch, step)
            opt.zero_grad()
            total.backward()
            opt.step()
            sched.step()
            meter.add(total, terms)
        entry = {"epoch": epoch, **meter.means()}
        history.append(entry)
        log.info("stage2 epoch %d %s", epoch, {k: round(v, 5) for k, v in entry.items() if k != "epoch"})
    bundle.eval()
    return history


@torch.no_grad()
def predict(bundle: NetworkBundle, target: DomainSet, batch_size=256) -> list[PredictionRecord]:
    """Argmax over the ``n_known + 1`` outputs of C2; index ``n_known`` is unknown."""
    bundle.eval()
    records = []
    for start in range(0, len(target), batch_size):
        x = to_tensor(target.images[start : start + batch_size])
        probs = bundle.semantic_from_features(bundle.encode(x), "C2").softmax(1).double().numpy()
        for j, p in enumerate(probs):
            k = start + j
            records.append(PredictionRecord(int(target.sample_ids[k]), int(np.argmax(p)),
                                            int(target.labels[k]), p))
    return records


PREDICTION_COLUMNS = ("sample_id", "predicted_label", "ground_truth", "max_confidence")


def write_predictions(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_COLUMNS)
        for r in records:
            w.writerow([r.sample_id, r.predicted_label, r.ground_truth, f"{r.max_confidence:.6f}"])


def read_predictions(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(PREDICTION_COLUMNS):
            raise ParseError(f"expected header {','.join(PREDICTION_COLUMNS)}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PREDICTION_COLUMNS):
                raise ParseError(f"expected {len(PREDICTION_COLUMNS)} fields, got {len(row)}", path, lineno)
            try:
                rows.append({"sample_id": int(row[0]), "predicted_label": int(row[1]),
                             "ground_truth": int(row[2]), "max_confidence": float(row[3])})
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
    return rows
