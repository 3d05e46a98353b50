import numpy as np
import pytest
import torch

from ros_osda import stage1
from ros_osda.config import ExperimentConfig
from ros_osda.dataset import SyntheticSpec, generate_synthetic
from ros_osda.errors import DomainError, ParseError, ShapeError, ValidationError
from ros_osda.network import NetworkBundle, build_encoder
from ros_osda.stage1 import (NormalityRecord, SeparationResult, combine_scores, compute_normality_scores,
                             entropy_score, entropy_scores, read_scores, records_from_predictions,
                             rotation_score, rotation_scores, separate_target, train_stage1, write_scores)

import oracles

UNIFORM = np.full((4, 8), 1 / 8)


def one_hot(width, k):
    row = np.zeros(width)
    row[k] = 1.0
    return row


def example_065():
    z = np.zeros((4, 8))
    for i, (a, b) in enumerate([(0.7, 0.3), (0.6, 0.4), (0.8, 0.2), (0.5, 0.5)]):
        z[i, i] = a
        z[i, 4 + i] = b
    return z


def test_rotation_score_example():
    assert rotation_score(example_065()) == pytest.approx(0.65)


def test_uniform_rows():
    assert rotation_score(UNIFORM) == pytest.approx(0.125)
    assert entropy_score(UNIFORM) == pytest.approx(0.0, abs=1e-12)
    assert combine_scores(rotation_score(UNIFORM), entropy_score(UNIFORM)) == pytest.approx(0.125)


def test_entropy_score_half():
    z = np.stack([one_hot(8, 0), one_hot(8, 5), UNIFORM[0], UNIFORM[0]])
    assert entropy_score(z) == pytest.approx(0.5)


def test_score_modes():
    assert combine_scores(0.2, 0.7, "rotation") == 0.2
    assert combine_scores(0.2, 0.7, "entropy") == 0.7
    with pytest.raises(ValidationError):
        combine_scores(0.2, 0.7, "min")


def test_scores_match_loop_oracle_and_stay_in_unit_interval():
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.integers(1, 6))
        logits = rng.normal(scale=rng.uniform(0.1, 8), size=(4, 4 * k))
        z = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        r, e = rotation_score(z), entropy_score(z)
        assert r == pytest.approx(oracles.rotation_score(z, k), abs=1e-12)
        assert e == pytest.approx(oracles.entropy_score(z), abs=1e-9)
        assert 0 <= max(r, e) <= 1


def test_batched_scores_equal_single():
    rng = np.random.default_rng(1)
    z = rng.dirichlet(np.ones(12), size=(7, 4))
    np.testing.assert_allclose(rotation_scores(z), [rotation_score(x) for x in z])
    np.testing.assert_allclose(entropy_scores(z), [entropy_score(x) for x in z])


def test_score_shape_checks():
    with pytest.raises(ShapeError):
        rotation_score(np.ones((3, 8)))
    with pytest.raises(ShapeError):
        entropy_score(np.ones((4, 6)))


def test_separation_example_and_ties():
    recs = [NormalityRecord(i, 0, 0, n) for i, n in enumerate([0.9, 0.5, 0.1])]
    sep = separate_target(recs)
    assert sep.threshold == pytest.approx(0.5)
    assert sep.knw_ids == [0, 1] and sep.unk_ids == [2]
    same = separate_target([NormalityRecord(i, 0, 0, 0.3) for i in range(4)])
    assert same.knw_ids == [0, 1, 2, 3] and same.unk_ids == []
    with pytest.raises(DomainError):
        separate_target([])


def test_separation_is_disjoint_cover():
    rng = np.random.default_rng(2)
    for _ in range(50):
        scores = rng.random(int(rng.integers(1, 40))).round(2)
        sep = separate_target([NormalityRecord(i, 0, 0, s) for i, s in enumerate(scores)])
        mean, known = oracles.separation(list(scores))
        assert set(sep.knw_ids) == known
        assert set(sep.knw_ids).isdisjoint(sep.unk_ids)
        assert set(sep.knw_ids) | set(sep.unk_ids) == set(range(len(scores)))


def hand_tuples():
    z3 = np.stack([one_hot(8, 4 + i) for i in range(4)])
    z4 = np.stack([one_hot(8, 0), one_hot(8, 1), UNIFORM[0], UNIFORM[0]])
    z5 = np.stack([one_hot(8, 0)] * 4)
    return np.stack([example_065(), UNIFORM, z3, z4, z5])


# rotation score, entropy score, normality for each tuple, traced by hand
HAND_TRACE = [
    (0.65, 0.7021525342856063, 0.7021525342856063),
    (0.125, 0.0, 0.125),
    (1.0, 1.0, 1.0),
    (0.5625, 0.5, 0.5625),
    (0.25, 1.0, 1.0),
]


def test_normality_pipeline_matches_hand_trace(monkeypatch):
    z = hand_tuples()
    monkeypatch.setattr(stage1, "rotation_predictions", lambda *a, **k: z)

    class Target:
        sample_ids = np.arange(10, 15)

    records = compute_normality_scores(None, Target())
    for rec, (r, e, n) in zip(records, HAND_TRACE):
        assert rec.rotation_score == pytest.approx(r, abs=1e-9)
        assert rec.entropy_score == pytest.approx(e, abs=1e-9)
        assert rec.normality == pytest.approx(n, abs=1e-9)
    sep = separate_target(records)
    assert sep.threshold == pytest.approx(0.6779305068571213)
    assert sep.knw_ids == [10, 12, 14]
    assert sep.unk_ids == [11, 13]


def test_scores_file_round_trip(tmp_path):
    z = hand_tuples()
    sep = separate_target(records_from_predictions(np.arange(5), z))
    write_scores(tmp_path / "s.csv", sep)
    rows = read_scores(tmp_path / "s.csv")
    assert [r["assigned_partition"] for r in rows] == ["known", "unknown", "known", "unknown", "known"]
    assert rows[0]["rotation_score"] == pytest.approx(0.65)
    sep.save(tmp_path / "sep.json")
    back = SeparationResult.load(tmp_path / "sep.json")
    assert back.knw_ids == sep.knw_ids and back.threshold == sep.threshold


def test_scores_file_errors(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("sample_id,rotation_score,entropy_score,normality,assigned_partition\n1,0.1,0.2,0.2,known\n2,x,0,0,known\n")
    with pytest.raises(ParseError, match=":3:"):
        read_scores(p)
    p.write_text("sample_id,rotation_score,normality\n")
    with pytest.raises(ParseError, match=":1:"):
        read_scores(p)


def tiny_data():
    return generate_synthetic(SyntheticSpec(2, 1, 16, 6))


def test_train_stage1_is_deterministic_and_learns():
    source, target, _ = tiny_data()
    cfg = ExperimentConfig(epochs_stage1=3, lr=0.003, batch_size=8)
    runs = []
    for _ in range(2):
        torch.manual_seed(0)
        b = NetworkBundle(build_encoder("small"), 2, 1)
        hist = train_stage1(b, source, cfg, seed=0)
        runs.append((hist, b.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k, v in runs[0][1].items():
        assert torch.equal(v, runs[1][1][k])
    assert runs[0][0][-1]["total"] < runs[0][0][0]["total"]
    recs = compute_normality_scores(b, target)
    assert len(recs) == len(target)
    assert all(0 <= r.normality <= 1 for r in recs)


def test_train_stage1_rejects_wrong_bundle():
    source, _, _ = tiny_data()
    b = NetworkBundle(build_encoder("small"), 2, 2)
    with pytest.raises(ValidationError):
        train_stage1(b, source, ExperimentConfig(epochs_stage1=1))
