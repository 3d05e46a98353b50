"""Encoder, classification/rotation heads and the stage bundles.

Roles and output widths, for ``n_known`` source classes and encoder width F:

====  =====  =============
role  input  outputs
====  =====  =============
C1    F      n_known
R1    2F     4 * n_known
C2    F      n_known + 1
R2    2F     4
====  =====  =============
"""
from __future__ import annotations

import copy
import io

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError

HIDDEN = 256
ROLES = ("C1", "R1", "C2", "R2")
CHECKPOINT_VERSION = 1


class SmallConvEncoder(nn.Module):
    """Four conv-BN-ReLU-maxpool blocks followed by global average pooling."""

    def __init__(self, in_channels=3, widths=(16, 32, 64, 128)):
        super().__init__()
        blocks = []
        prev = in_channels
        for w in widths:
            blocks.append(nn.Sequential(
                nn.Conv2d(prev, w, 3, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ))
            prev = w
        self.blocks = nn.Sequential(*blocks)
        self.out_dim = prev
        # trained from scratch, so it gets the from-scratch learning-rate multiplier
        self.lr_multiplier = None
        self.spec = {"name": "small", "in_channels": in_channels, "widths": list(widths)}

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.blocks(x), 1).flatten(1)

    def param_groups(self):
        return [("encoder", [p for p in self.parameters() if p.requires_grad], self.lr_multiplier)]


class ResNet50Encoder(nn.Module):
    """ResNet-50 up to average pooling; only the last residual block is trainable."""

    def __init__(self, weights_path=None):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        if weights_path:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state, strict=False)
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool,
            net.layer1, net.layer2, net.layer3, net.layer4,
        )
        for name, p in self.body.named_parameters():
            p.requires_grad = name.startswith("7.")
        self.out_dim = 2048
        self.lr_multiplier = 1.0
        self.spec = {"name": "resnet50", "weights_path": weights_path}

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.body(x), 1).flatten(1)

    def train(self, mode=True):
        super().train(mode)
        # frozen layers keep their pretrained running statistics
        for module in list(self.body.children())[:7]:
            module.eval()
        return self

    def param_groups(self):
        return [("encoder", [p for p in self.parameters() if p.requires_grad], self.lr_multiplier)]


def build_encoder(spec) -> nn.Module:
    if isinstance(spec, str):
        spec = {"name": spec}
    spec = dict(spec)
    name = spec.pop("name")
    if name == "small":
        return SmallConvEncoder(**spec)
    if name == "resnet50":
        return ResNet50Encoder(**spec)
    raise ValidationError(f"unknown backbone {name!r}")


class OpenSetLinear(nn.Module):
    """Final layer of C2: known-class rows and the unknown row as separate parameters.

    Keeping the unknown row in its own module lets it sit in a param group
    with its own learning rate.
    """

    def __init__(self, in_features, n_known):
        super().__init__()
        self.known = nn.Linear(in_features, n_known)
        self.unknown = nn.Linear(in_features, 1)

    @property
    def out_features(self):
        return self.known.out_features + 1

    def forward(self, v):
        return torch.cat([self.known(v), self.unknown(v)], dim=1)


class Head(nn.Module):
    """FC(256) -> BatchNorm -> LeakyReLU(0.2) -> FC(n_out)."""

    def __init__(self, in_features, n_out, role, open_set=False):
        super().__init__()
        if role not in ROLES:
            raise ValidationError(f"unknown head role {role!r}")
        self.role = role
        self.in_features = in_features
        self.fc1 = nn.Linear(in_features, HIDDEN)
        self.bn = nn.BatchNorm1d(HIDDEN)
        self.fc2 = OpenSetLinear(HIDDEN, n_out - 1) if open_set else nn.Linear(HIDDEN, n_out)

    @property
    def n_out(self):
        return self.fc2.out_features

    def forward(self, x):
        if x.shape[1] != self.in_features:
            raise ShapeError(f"{self.role} expects {self.in_features} features, got {x.shape[1]}")
        v = F.leaky_relu(self.bn(self.fc1(x)), negative_slope=0.2)
        return self.fc2(v), v


def head_shapes(stage: int, n_known: int, feat_dim: int) -> dict:
    if stage == 1:
        return {"C1": (feat_dim, n_known), "R1": (2 * feat_dim, 4 * n_known)}
    if stage == 2:
        return {"C2": (feat_dim, n_known + 1), "R2": (2 * feat_dim, 4)}
    raise ValidationError(f"stage must be 1 or 2, got {stage}")


class NetworkBundle(nn.Module):
    """Encoder plus the two heads of one stage."""

    def __init__(self, encoder: nn.Module, n_known: int, stage: int = 1,
                 head_lr_multiplier: float = 10.0, unknown_lr_multiplier: float = 2.0):
        super().__init__()
        if n_known < 1:
            raise ValidationError("n_known must be >= 1")
        self.encoder = encoder
        self.n_known = n_known
        self.stage = stage
        self.head_lr_multiplier = head_lr_multiplier
        self.unknown_lr_multiplier = unknown_lr_multiplier
        self.heads = nn.ModuleDict({
            role: Head(fin, fout, role, open_set=(role == "C2"))
            for role, (fin, fout) in head_shapes(stage, n_known, encoder.out_dim).items()
        })

    @property
    def semantic_role(self):
        return "C1" if self.stage == 1 else "C2"

    @property
    def rotation_role(self):
        return "R1" if self.stage == 1 else "R2"

    def role_table(self) -> dict:
        return {role: [h.in_features, h.n_out] for role, h in self.heads.items()}

    def encode(self, images):
        return self.encoder(images)

    def semantic_from_features(self, feats, role=None):
        return self.heads[role or self.semantic_role](feats)[0]

    def rotation_from_features(self, f_anchor, f_rotated, role=None, use_anchor=True):
        if f_anchor.shape[0] != f_rotated.shape[0]:
            raise ShapeError("anchor and rotated batches differ in size")
        # without the anchor the rotated features are duplicated to keep the 2F input width
        left = f_anchor if use_anchor else f_rotated
        return self.heads[role or self.rotation_role](torch.cat([left, f_rotated], dim=1))

    def param_groups(self, base_lr: float):
        """SGD param groups with per-group learning-rate multipliers."""
        groups = []
        for name, params, mult in self.encoder.param_groups():
            mult = self.head_lr_multiplier if mult is None else mult
            if params:
                groups.append({"name": name, "params": params, "lr": base_lr * mult})
        for role, head in self.heads.items():
            if role == "C2":
                unknown = list(head.fc2.unknown.parameters())
                rest = [p for n, p in head.named_parameters() if not n.startswith("fc2.unknown")]
                groups.append({"name": role, "params": rest, "lr": base_lr * self.head_lr_multiplier})
                groups.append({"name": "C2.unknown", "params": unknown,
                               "lr": base_lr * self.head_lr_multiplier * self.unknown_lr_multiplier})
            else:
                groups.append({"name": role, "params": list(head.parameters()),
                               "lr": base_lr * self.head_lr_multiplier})
        return groups


def forward_semantic(bundle: NetworkBundle, images, role=None):
    """Returns ``(probabilities, logits)`` from a semantic head."""
    role = role or bundle.semantic_role
    if role not in bundle.heads:
        raise ValidationError(f"bundle of stage {bundle.stage} has no head {role}")
    logits = bundle.semantic_from_features(bundle.encode(images), role)
    return F.softmax(logits, dim=1), logits


def forward_rotation(bundle: NetworkBundle, anchors, rotated, use_anchor=True, role=None):
    """Returns ``(probabilities, logits, penultimate activations)`` from a rotation head."""
    role = role or bundle.rotation_role
    if role not in bundle.heads:
        raise ValidationError(f"bundle of stage {bundle.stage} has no head {role}")
    if anchors.shape[0] != rotated.shape[0]:
        raise ShapeError(f"batch sizes differ: {anchors.shape[0]} vs {rotated.shape[0]}")
    feats = bundle.encode(torch.cat([anchors, rotated], dim=0))
    f_a, f_r = feats.split(anchors.shape[0])
    logits, v = bundle.rotation_from_features(f_a, f_r, role, use_anchor)
    return F.softmax(logits, dim=1), logits, v


def transfer_stage1_to_stage2(bundle1: NetworkBundle, transfer: bool = True,
                              unknown_lr_multiplier: float = 2.0) -> NetworkBundle:
    """Build the stage-2 bundle.

    With ``transfer`` the encoder is copied and C2 inherits C1 (hidden layer,
    batch norm and the known-class output rows); the unknown row and R2 are
    fresh. Without it everything restarts from the backbone initialization.
    """
    if bundle1.stage != 1:
        raise ValidationError("expected a stage-1 bundle")
    if transfer:
        encoder = copy.deepcopy(bundle1.encoder)
    else:
        encoder = build_encoder(bundle1.encoder.spec)
    bundle2 = NetworkBundle(encoder, bundle1.n_known, stage=2,
                            head_lr_multiplier=bundle1.head_lr_multiplier,
                            unknown_lr_multiplier=unknown_lr_multiplier)
    if transfer:
        c1, c2 = bundle1.heads["C1"], bundle2.heads["C2"]
        c2.fc1.load_state_dict(c1.fc1.state_dict())
        c2.bn.load_state_dict(c1.bn.state_dict())
        c2.fc2.known.load_state_dict(c1.fc2.state_dict())
    return bundle2


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(bundle: NetworkBundle, path, config_hash: str = "") -> bytes:
    """Serialize ``bundle`` to ``path`` and return the written bytes."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "encoder": bundle.encoder.spec,
        "n_known": bundle.n_known,
        "stage": bundle.stage,
        "roles": bundle.role_table(),
        "head_lr_multiplier": bundle.head_lr_multiplier,
        "unknown_lr_multiplier": bundle.unknown_lr_multiplier,
        "config_hash": config_hash,
        "state_dict": {k: v.detach().clone() for k, v in bundle.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def load_checkpoint(path) -> tuple[NetworkBundle, dict]:
    """Rebuild a bundle; returns ``(bundle, metadata)``."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {payload.get('version')}")
    encoder = build_encoder(payload["encoder"])
    bundle = NetworkBundle(encoder, payload["n_known"], payload["stage"],
                           payload["head_lr_multiplier"], payload["unknown_lr_multiplier"])
    if bundle.role_table() != payload["roles"]:
        raise ValidationError("checkpoint role table does not match the rebuilt bundle")
    bundle.load_state_dict(payload["state_dict"])
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return bundle, meta
