"""Datasets, known/unknown class splits and relative-rotation quadruples.

Images are float32 arrays of shape (H, W, C) with values in [0, 1]. A
:class:`DomainSet` stores a whole domain as one stacked array so training
loops can index batches without per-sample Python overhead; :class:`Sample`
is the per-item view.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import DomainError, ShapeError, ValidationError

N_ROTATIONS = 4
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    class_label: int
    sample_id: int
    domain_tag: str

    def __post_init__(self):
        _check_square(self.image)
        if self.domain_tag not in ("source", "target"):
            raise ValidationError(f"unknown domain tag {self.domain_tag!r}")


@dataclass(frozen=True)
class RotatedQuadruple:
    anchor: np.ndarray
    rotated: np.ndarray
    rotation_index: int
    multi_rotation_label: int


@dataclass(frozen=True)
class ClassSplit:
    known_class_ids: tuple
    unknown_class_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "known_class_ids", tuple(self.known_class_ids))
        object.__setattr__(self, "unknown_class_ids", tuple(self.unknown_class_ids))
        if not self.known_class_ids:
            raise ValidationError("a split needs at least one known class")
        overlap = set(self.known_class_ids) & set(self.unknown_class_ids)
        if overlap:
            raise ValidationError(f"classes both known and unknown: {sorted(overlap)}")
        if len(set(self.known_class_ids)) != len(self.known_class_ids):
            raise ValidationError("duplicate known class")

    @property
    def n_known(self) -> int:
        return len(self.known_class_ids)

    @property
    def n_total(self) -> int:
        return len(self.known_class_ids) + len(self.unknown_class_ids)

    @property
    def openness(self) -> float:
        return 1.0 - self.n_known / self.n_total

    @property
    def ordered_classes(self) -> tuple:
        """Known classes first, then unknown; the position is the label id."""
        return self.known_class_ids + self.unknown_class_ids

    @classmethod
    def first_n(cls, class_names: Sequence[str], n_known: int) -> "ClassSplit":
        return cls.window(class_names, 0, n_known)

    @classmethod
    def window(cls, class_names: Sequence[str], start: int, n_known: int) -> "ClassSplit":
        """Known classes are ``class_names[start:start + n_known]``, the rest unknown."""
        names = list(class_names)
        if n_known < 1 or start < 0 or start + n_known > len(names):
            raise ValidationError(
                f"window [{start}, {start + n_known}) out of range for {len(names)} classes"
            )
        known = names[start : start + n_known]
        unknown = names[:start] + names[start + n_known :]
        return cls(tuple(known), tuple(unknown))


@dataclass(frozen=True)
class SyntheticSpec:
    n_known: int = 6
    n_unknown: int = 6
    image_size: int = 32
    samples_per_class: int = 200
    color_shift: float = 0.35
    noise_level: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_known < 2:
            raise ValidationError("n_known must be >= 2")
        if self.n_unknown < 0:
            raise ValidationError("n_unknown must be >= 0")
        if self.image_size < 16:
            raise ValidationError("image_size must be >= 16")
        if self.samples_per_class < 1:
            raise ValidationError("samples_per_class must be >= 1")
        if self.color_shift < 0 or self.noise_level < 0:
            raise ValidationError("domain shift parameters must be nonnegative")

    @property
    def n_classes(self) -> int:
        return self.n_known + self.n_unknown


@dataclass(frozen=True)
class DomainSet:
    """An immutable, stacked collection of samples from one domain.

    ``labels`` index into ``class_names``. For a split target set the first
    ``n_known`` names are the known classes, so ``label >= n_known`` marks an
    unknown sample.
    """

    images: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    domain_tag: str
    class_names: tuple = field(default=())

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        ids = np.asarray(self.sample_ids, dtype=np.int64)
        if images.ndim != 4:
            raise ShapeError(f"expected (N, H, W, C) images, got {images.shape}")
        if images.shape[1] != images.shape[2]:
            raise ShapeError(f"images must be square, got {images.shape[1:3]}")
        if not (len(images) == len(labels) == len(ids)):
            raise ShapeError("images, labels and sample_ids differ in length")
        if len(np.unique(ids)) != len(ids):
            raise ValidationError("sample ids must be unique")
        for arr in (images, labels, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx: int) -> Sample:
        return Sample(self.images[idx], int(self.labels[idx]), int(self.sample_ids[idx]), self.domain_tag)

    def __iter__(self) -> Iterator[Sample]:
        for idx in range(len(self)):
            yield self[idx]

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def subset(self, indices) -> "DomainSet":
        indices = np.asarray(indices, dtype=np.int64)
        return DomainSet(
            self.images[indices], self.labels[indices], self.sample_ids[indices],
            self.domain_tag, self.class_names,
        )

    def select_ids(self, sample_ids) -> "DomainSet":
        position = {int(s): k for k, s in enumerate(self.sample_ids)}
        try:
            return self.subset([position[int(s)] for s in sample_ids])
        except KeyError as exc:
            raise ValidationError(f"sample id {exc.args[0]} not in {self.domain_tag} set") from None

    def without_labels(self) -> "DomainSet":
        """Same images with every label replaced by -1."""
        return DomainSet(
            self.images, np.full(len(self), -1), self.sample_ids, self.domain_tag, self.class_names
        )


def _check_square(image: np.ndarray):
    if image.ndim != 3 or image.shape[0] != image.shape[1]:
        raise ShapeError(f"expected a square H x W x C image, got shape {image.shape}")


def rot90(image: np.ndarray, i: int) -> np.ndarray:
    """Rotate a square image clockwise by ``i`` quarter turns (exact pixel permutation)."""
    image = np.asarray(image)
    _check_square(image)
    if i not in (0, 1, 2, 3):
        raise DomainError(f"rotation index must be in {{0, 1, 2, 3}}, got {i}")
    return np.rot90(image, k=-i, axes=(0, 1)).copy()


def make_multi_rotation_label(y: int, i: int, n_known: int | None = None) -> int:
    if y < 0 or (n_known is not None and y >= n_known):
        raise DomainError(f"class label {y} out of range")
    if i not in (0, 1, 2, 3):
        raise DomainError(f"rotation index must be in {{0, 1, 2, 3}}, got {i}")
    return N_ROTATIONS * y + i


def split_multi_rotation_label(z: int) -> tuple[int, int]:
    """Inverse of :func:`make_multi_rotation_label`: returns ``(y, i)``."""
    if z < 0:
        raise DomainError(f"multi-rotation label {z} is negative")
    return divmod(z, N_ROTATIONS)


def build_rotation_set(samples: Sequence[Sample]) -> list[RotatedQuadruple]:
    """Expand each labeled sample into its four (anchor, rotated, i, z) quadruples."""
    out = []
    for s in samples:
        for i in range(N_ROTATIONS):
            out.append(RotatedQuadruple(s.image, rot90(s.image, i), i,
                                        make_multi_rotation_label(s.class_label, i)))
    return out


# ---------------------------------------------------------------------------
# image folders


def discover_classes(root, domain: str) -> list[str]:
    """Class folder names of ``root/domain`` in case-sensitive lexicographic order."""
    domain_dir = Path(root) / domain
    if not domain_dir.is_dir():
        raise FileNotFoundError(f"missing domain directory {domain_dir}")
    return sorted(p.name for p in domain_dir.iterdir() if p.is_dir())


def read_class_list(path) -> list[str]:
    """One class name per line; blank lines are ignored."""
    with open(path) as fh:
        names = [line.strip() for line in fh]
    names = [n for n in names if n]
    if len(set(names)) != len(names):
        raise ValidationError(f"duplicate class names in {path}")
    return names


def _read_image(path: Path, image_size: int | None) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if image_size is not None:
            im = im.resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr


def _read_domain(root, domain: str, classes: Sequence[str], image_size: int | None):
    domain_dir = Path(root) / domain
    if not domain_dir.is_dir():
        raise FileNotFoundError(f"missing domain directory {domain_dir}")
    images, labels, ids = [], [], []
    for label, name in enumerate(classes):
        class_dir = domain_dir / name
        if not class_dir.is_dir():
            continue
        for path in sorted(class_dir.iterdir()):
            if path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            img = _read_image(path, image_size)
            if images and img.shape != images[0].shape:
                raise ShapeError(
                    f"{path} has shape {img.shape}, expected {images[0].shape}; pass image_size to resize"
                )
            images.append(img)
            labels.append(label)
            ids.append(len(ids))
    present = set(labels)
    if not images:
        raise ValidationError(f"no images found under {domain_dir}")
    return np.stack(images), np.asarray(labels), np.asarray(ids), present


def load_image_folder(root, split: ClassSplit, source_domain: str, target_domain: str,
                      image_size: int | None = None) -> tuple[DomainSet, DomainSet]:
    """Read ``root/<domain>/<class_name>/<image>`` into a source and a target set.

    Source labels are positions in ``split.known_class_ids``; target labels are
    positions in ``split.ordered_classes`` (known first), so unknown samples keep
    a distinct id for evaluation. Unknown classes are never read from the source.
    """
    ordered = split.ordered_classes
    s_img, s_lab, s_ids, s_present = _read_domain(root, source_domain, split.known_class_ids, image_size)
    missing = [split.known_class_ids[k] for k in range(split.n_known) if k not in s_present]
    if missing:
        raise ValidationError(f"known classes absent from source domain {source_domain!r}: {missing}")
    t_img, t_lab, t_ids, _ = _read_domain(root, target_domain, ordered, image_size)
    source = DomainSet(s_img, s_lab, s_ids, "source", split.known_class_ids)
    target = DomainSet(t_img, t_lab, t_ids, "target", ordered)
    return source, target


def export_image_folder(domain_set: DomainSet, root, domain: str):
    """Write a domain set as ``root/domain/<class_name>/<sample_id>.png``."""
    from PIL import Image

    base = Path(root) / domain
    for name in domain_set.class_names:
        (base / name).mkdir(parents=True, exist_ok=True)
    for img, label, sid in zip(domain_set.images, domain_set.labels, domain_set.sample_ids):
        pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels).save(base / domain_set.class_names[label] / f"{int(sid):06d}.png")


# ---------------------------------------------------------------------------
# synthetic benchmark

_GLYPH_GRID = 5


def _glyph_templates(n_classes: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Binary grid glyphs that are pairwise distinct under every quarter turn.

    Each glyph also differs from its own rotations, so its canonical
    orientation is recoverable from pixels.
    """
    templates: list[np.ndarray] = []
    min_distance = 5
    while len(templates) < n_classes:
        g = rng.random((_GLYPH_GRID, _GLYPH_GRID)) < 0.45
        if not (4 <= g.sum() <= 18):
            continue
        # keep glyph touching all borders of its grid so rotations move mass around
        if not (g[0].any() and g[-1].any() and g[:, 0].any() and g[:, -1].any()):
            continue
        rots = [np.rot90(g, -k) for k in range(1, 4)]
        if min(int((g != r).sum()) for r in rots) < min_distance:
            continue
        clash = False
        for t in templates:
            for k in range(4):
                if int((np.rot90(t, -k) != g).sum()) < min_distance:
                    clash = True
                    break
            if clash:
                break
        if not clash:
            templates.append(g)
    return templates


def _render(template: np.ndarray, size: int, rng: np.random.Generator, fg, bg) -> np.ndarray:
    cell = max(2, int(round(size * 0.65 / _GLYPH_GRID)))
    mask = np.kron(template.astype(np.float32), np.ones((cell, cell), np.float32))
    angle = rng.uniform(-10.0, 10.0)
    mask = ndimage.rotate(mask, angle, reshape=True, order=1, mode="constant")
    mask = np.clip(mask, 0.0, 1.0)
    h, w = mask.shape
    if h > size or w > size:
        mask = mask[:size, :size]
        h, w = mask.shape
    canvas = np.zeros((size, size), np.float32)
    oy = int(rng.integers(0, size - h + 1))
    ox = int(rng.integers(0, size - w + 1))
    canvas[oy : oy + h, ox : ox + w] = mask
    m = canvas[..., None]
    return (1.0 - m) * np.asarray(bg, np.float32) + m * np.asarray(fg, np.float32)


def _render_domain(templates, spec: SyntheticSpec, rng: np.random.Generator, target: bool):
    n = spec.samples_per_class
    images = np.empty((len(templates) * n, spec.image_size, spec.image_size, 3), np.float32)
    labels = np.repeat(np.arange(len(templates)), n)
    # a fixed per-channel colour offset defines the target domain
    shift = np.array([1.0, -0.6, -1.0], np.float32) * spec.color_shift
    k = 0
    for template in templates:
        for _ in range(n):
            fg = rng.uniform(0.55, 1.0, size=3)
            bg = rng.uniform(0.0, 0.3, size=3)
            img = _render(template, spec.image_size, rng, fg, bg)
            if target:
                img = img + shift
                img = img + rng.normal(0.0, spec.noise_level, size=img.shape)
            images[k] = np.clip(img, 0.0, 1.0)
            k += 1
    return images, labels


def synthetic_class_names(n_classes: int) -> tuple[str, ...]:
    return tuple(f"glyph_{c:02d}" for c in range(n_classes))


def generate_synthetic_pool(spec: SyntheticSpec) -> tuple[DomainSet, DomainSet]:
    """All ``spec.n_classes`` classes rendered in both domains.

    Splits are applied afterwards with :func:`apply_split`, which lets the
    openness sweep move the known-class window over one fixed pool.
    """
    root = np.random.SeedSequence(spec.seed)
    t_seq, s_seq, g_seq = root.spawn(3)
    templates = _glyph_templates(spec.n_classes, np.random.default_rng(t_seq))
    names = synthetic_class_names(spec.n_classes)
    s_img, s_lab = _render_domain(templates, spec, np.random.default_rng(s_seq), target=False)
    t_img, t_lab = _render_domain(templates, spec, np.random.default_rng(g_seq), target=True)
    source = DomainSet(s_img, s_lab, np.arange(len(s_lab)), "source", names)
    target = DomainSet(t_img, t_lab, np.arange(len(t_lab)), "target", names)
    return source, target


def apply_split(source_pool: DomainSet, target_pool: DomainSet, split: ClassSplit):
    """Restrict the source to known classes and relabel both domains by ``split``."""
    s_index = {name: k for k, name in enumerate(split.known_class_ids)}
    t_index = {name: k for k, name in enumerate(split.ordered_classes)}
    s_names = np.array(source_pool.class_names, dtype=object)
    t_names = np.array(target_pool.class_names, dtype=object)

    s_keep = [k for k, lab in enumerate(source_pool.labels) if s_names[lab] in s_index]
    missing = set(split.known_class_ids) - {s_names[source_pool.labels[k]] for k in s_keep}
    if missing:
        raise ValidationError(f"known classes absent from source: {sorted(missing)}")
    src = source_pool.subset(s_keep)
    src = DomainSet(src.images, [s_index[s_names[l]] for l in src.labels], src.sample_ids,
                    "source", split.known_class_ids)

    t_keep = [k for k, lab in enumerate(target_pool.labels) if t_names[lab] in t_index]
    tgt = target_pool.subset(t_keep)
    tgt = DomainSet(tgt.images, [t_index[t_names[l]] for l in tgt.labels], tgt.sample_ids,
                    "target", split.ordered_classes)
    return src, tgt


def generate_synthetic(spec: SyntheticSpec) -> tuple[DomainSet, DomainSet, ClassSplit]:
    """Deterministic synthetic open-set benchmark; unknown classes appear only in the target."""
    source_pool, target_pool = generate_synthetic_pool(spec)
    split = ClassSplit.first_n(source_pool.class_names, spec.n_known)
    source, target = apply_split(source_pool, target_pool, split)
    return source, target, split
