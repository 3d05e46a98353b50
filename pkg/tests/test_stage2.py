import numpy as np
import pytest
import torch

from ros_osda.config import ExperimentConfig
from ros_osda.dataset import DomainSet, SyntheticSpec, generate_synthetic
from ros_osda.errors import ParseError, ValidationError
from ros_osda.network import NetworkBundle, build_encoder, transfer_stage1_to_stage2
from ros_osda.stage1 import compute_normality_scores, separate_target
from ros_osda.stage2 import (PredictionRecord, StreamBatchPlan, predict, read_predictions, train_stage2,
                             write_predictions)

CFG = ExperimentConfig(epochs_stage2=2, lr=0.003, batch_size=8)


@pytest.fixture(scope="module")
def setup():
    source, target, split = generate_synthetic(SyntheticSpec(2, 1, 16, 6))
    torch.manual_seed(0)
    b1 = NetworkBundle(build_encoder("small"), 2, 1)
    sep = separate_target(compute_normality_scores(b1, target))
    return source, target, b1, sep


def fresh(b1):
    torch.manual_seed(1)
    return transfer_stage1_to_stage2(b1)


def test_batch_plan():
    plan = StreamBatchPlan.build(100, 7, 1, 32)
    assert plan.batch_sizes == (32, 7, 2)
    assert plan.iterations == 4
    assert StreamBatchPlan.build(10, 0, 0, 4).batch_sizes == (4, 0, 0)


def test_target_labels_are_never_read(setup):
    source, target, b1, sep = setup
    rng = np.random.default_rng(0)
    shuffled = DomainSet(target.images, rng.permutation(target.labels), target.sample_ids, "target",
                         target.class_names)
    states = []
    for tgt in (target, shuffled):
        b2 = fresh(b1)
        train_stage2(b2, source, tgt, sep, CFG, seed=0)
        states.append(b2.state_dict())
    for k, v in states[0].items():
        assert torch.equal(v, states[1][k]), k


def test_source_only_ignores_separation(setup):
    source, target, b1, sep = setup
    cfg = CFG.replace(source_only=True)
    a, b = fresh(b1), fresh(b1)
    train_stage2(a, source, target, sep, cfg, seed=0)
    train_stage2(b, source, target, None, cfg, seed=0)
    for k, v in a.state_dict().items():
        assert torch.equal(v, b.state_dict()[k])


def test_predictions(setup):
    source, target, b1, sep = setup
    b2 = fresh(b1)
    train_stage2(b2, source, target, sep, CFG, seed=0)
    preds = predict(b2, target)
    assert len(preds) == len(target)
    for p, sid, y in zip(preds, target.sample_ids, target.labels):
        assert p.sample_id == sid and p.ground_truth == y
        assert p.confidence.shape == (3,)
        assert p.predicted_label == int(np.argmax(p.confidence))
        assert p.confidence.sum() == pytest.approx(1.0, abs=1e-6)


def test_rejects_stage1_bundle(setup):
    source, target, b1, sep = setup
    with pytest.raises(ValidationError):
        train_stage2(b1, source, target, sep, CFG)


def test_prediction_file_round_trip(tmp_path):
    recs = [PredictionRecord(3, 1, 1, np.array([0.2, 0.7, 0.1])), PredictionRecord(4, 2, 0, np.array([0.3, 0.3, 0.4]))]
    write_predictions(tmp_path / "p.csv", recs)
    rows = read_predictions(tmp_path / "p.csv")
    assert rows == [
        {"sample_id": 3, "predicted_label": 1, "ground_truth": 1, "max_confidence": 0.7},
        {"sample_id": 4, "predicted_label": 2, "ground_truth": 0, "max_confidence": 0.4},
    ]


def test_prediction_file_errors(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("sample_id,predicted_label,max_confidence\n1,0,0.5\n")
    with pytest.raises(ParseError, match=":1:"):
        read_predictions(p)
    p.write_text("sample_id,predicted_label,ground_truth,max_confidence\n1,0,0,0.5\n2,0\n")
    with pytest.raises(ParseError, match=":3:"):
        read_predictions(p)
