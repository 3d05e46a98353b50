import pytest
import torch

from ros_osda.errors import ShapeError, ValidationError
from ros_osda.network import (NetworkBundle, SmallConvEncoder, build_encoder, forward_rotation,
                              forward_semantic, head_shapes, load_checkpoint, save_checkpoint,
                              transfer_stage1_to_stage2)


def make_bundle(n_known=3, stage=1, seed=0):
    torch.manual_seed(seed)
    return NetworkBundle(build_encoder("small"), n_known, stage)


def test_head_widths():
    b1 = make_bundle(5)
    assert b1.role_table() == {"C1": [128, 5], "R1": [256, 20]}
    b2 = transfer_stage1_to_stage2(b1)
    assert b2.role_table() == {"C2": [128, 6], "R2": [256, 4]}
    assert head_shapes(2, 5, 10) == {"C2": (10, 6), "R2": (20, 4)}


def test_forward_shapes_and_softmax_rows():
    b = make_bundle(4).eval()
    x = torch.rand(6, 3, 32, 32)
    probs, logits = forward_semantic(b, x)
    assert probs.shape == (6, 4)
    assert torch.allclose(probs.sum(1), torch.ones(6), atol=1e-6)
    rprobs, _, v = forward_rotation(b, x, torch.rot90(x, -1, dims=(2, 3)))
    assert rprobs.shape == (6, 16) and v.shape == (6, 256)
    assert torch.allclose(rprobs.sum(1), torch.ones(6), atol=1e-6)


def test_no_anchor_duplicates_rotated_features():
    b = make_bundle(2).eval()
    x, xr = torch.rand(3, 3, 32, 32), torch.rand(3, 3, 32, 32)
    _, logits, _ = forward_rotation(b, x, xr, use_anchor=False)
    _, same, _ = forward_rotation(b, xr, xr, use_anchor=True)
    assert torch.allclose(logits, same, atol=1e-6)


def test_shape_errors():
    b = make_bundle(2).eval()
    with pytest.raises(ShapeError):
        forward_rotation(b, torch.rand(2, 3, 32, 32), torch.rand(3, 3, 32, 32))
    with pytest.raises(ShapeError):
        b.heads["C1"](torch.rand(2, 7))
    with pytest.raises(ValidationError):
        forward_semantic(b, torch.rand(2, 3, 32, 32), role="C2")
    with pytest.raises(ValidationError):
        build_encoder("vgg")


def test_same_seed_same_weights():
    a, b = make_bundle(seed=3), make_bundle(seed=3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_transfer_inherits_known_rows_only():
    b1 = make_bundle(3)
    b2 = transfer_stage1_to_stage2(b1)
    c1, c2 = b1.heads["C1"], b2.heads["C2"]
    assert torch.equal(c2.fc2.known.weight, c1.fc2.weight)
    assert torch.equal(c2.fc1.weight, c1.fc1.weight)
    for p1, p2 in zip(b1.encoder.parameters(), b2.encoder.parameters()):
        assert torch.equal(p1, p2) and p1.data_ptr() != p2.data_ptr()
    fresh = transfer_stage1_to_stage2(b1, transfer=False)
    assert not torch.equal(fresh.heads["C2"].fc2.known.weight, c1.fc2.weight)


def test_unknown_row_learning_rate():
    b2 = transfer_stage1_to_stage2(make_bundle(3))
    groups = {g["name"]: g for g in b2.param_groups(0.001)}
    assert groups["C2"]["lr"] == pytest.approx(0.01)
    assert groups["C2.unknown"]["lr"] == pytest.approx(0.02)
    assert groups["R2"]["lr"] == pytest.approx(0.01)
    unknown = {id(p) for p in b2.heads["C2"].fc2.unknown.parameters()}
    assert {id(p) for p in groups["C2.unknown"]["params"]} == unknown
    assert not unknown & {id(p) for p in groups["C2"]["params"]}


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    b = transfer_stage1_to_stage2(make_bundle(3))
    data = save_checkpoint(b, tmp_path / "c.pt", "abc")
    loaded, meta = load_checkpoint(tmp_path / "c.pt")
    assert meta["config_hash"] == "abc" and meta["stage"] == 2
    for (k, v), (k2, v2) in zip(b.state_dict().items(), loaded.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    assert save_checkpoint(loaded, None, "abc") == data


def test_encoder_lr_multiplier_defaults_to_heads():
    enc = SmallConvEncoder()
    b = NetworkBundle(enc, 2, head_lr_multiplier=10)
    groups = {g["name"]: g for g in b.param_groups(1.0)}
    assert groups["encoder"]["lr"] == pytest.approx(10.0)
