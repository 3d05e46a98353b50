import pytest

from ros_osda.config import ExperimentConfig, parse_overrides
from ros_osda.errors import ValidationError


def test_defaults_and_weights():
    cfg = ExperimentConfig()
    assert cfg.seeds == (0, 1, 2)
    assert (cfg.epochs_stage1, cfg.epochs_stage2, cfg.lr) == (80, 80, 0.0003)
    w = cfg.weights
    assert (w.lambda_1_1, w.lambda_1_2, w.lambda_2_1, w.lambda_2_2) == (3.0, 0.1, 0.1, 3.0)
    assert cfg.ablation_label == "full"
    assert cfg.score_mode == "max"


def test_ablation_switches():
    cfg = ExperimentConfig(no_center_loss=True, no_entropy_s2=True)
    assert cfg.weights.lambda_1_2 == 0 and cfg.weights.lambda_2_1 == 0
    assert cfg.ablation_label == "no_center_loss+no_entropy_s2"
    base = ExperimentConfig(source_only=True)
    assert base.weights.lambda_2_1 == 0 and base.weights.lambda_2_2 == 0
    assert ExperimentConfig(no_rot_score=True).score_mode == "entropy"
    assert ExperimentConfig(no_ent_score=True).score_mode == "rotation"
    with pytest.raises(ValidationError):
        ExperimentConfig(no_rot_score=True, no_ent_score=True)


@pytest.mark.parametrize("bad", [{"lr": 0}, {"batch_size": 1}, {"epochs_stage1": 0}, {"reduction": "max"},
                                 {"n_known": 13}, {"dataset": "folder"}, {"lambda_2_2": -1}, {"seeds": ()}])
def test_validation(bad):
    with pytest.raises(ValidationError):
        ExperimentConfig(**bad)


def test_hash_is_stable_and_ignores_bookkeeping():
    a = ExperimentConfig()
    assert a.config_hash == ExperimentConfig().config_hash
    assert a.config_hash == a.replace(seeds=(5,), output_dir="x").config_hash
    assert a.config_hash != a.replace(lr=0.001).config_hash
    # scoring and stage II settings leave the stage I identity alone
    assert a.stage1_hash() == a.replace(no_rot_score=True, no_anchor_s2=True, lambda_2_1=0).stage1_hash()
    assert a.stage1_hash() != a.replace(no_center_loss=True).stage1_hash()


def test_file_round_trip(tmp_path):
    cfg = ExperimentConfig(lr=0.01, seeds=(3, 4), no_anchor_s1=True, output_dir="out")
    cfg.save(tmp_path / "c.cfg")
    assert ExperimentConfig.from_file(tmp_path / "c.cfg") == cfg


def test_file_with_comments_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nlr = 0.01  # inline\nseeds = 7, 8\nno_center_loss = yes\n")
    cfg = ExperimentConfig.from_file(p, parse_overrides(["lr=0.02"]))
    assert cfg.lr == 0.02 and cfg.seeds == (7, 8) and cfg.no_center_loss


def test_file_errors(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("learning_rate = 0.1\n")
    with pytest.raises(ValidationError, match="learning_rate"):
        ExperimentConfig.from_file(p)
    p.write_text("lr = fast\n")
    with pytest.raises(ValidationError):
        ExperimentConfig.from_file(p)
    with pytest.raises(FileNotFoundError):
        ExperimentConfig.from_file(tmp_path / "missing.cfg")
    with pytest.raises(ValidationError):
        parse_overrides(["lr"])
