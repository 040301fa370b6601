"""Datasets: synthetic domain-shift generation, folder loading, folds.

The synthetic task is binary-or-multiclass blob segmentation: clean
renderings of one random ellipse/convex polygon per image form the
source domain; the target domain draws from the same generative family
and then passes through a fixed photometric shift (blur + additive
brightness + sensor noise). Target ground truth is kept for evaluation
but hidden from the training loop.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, LabelWithheldError

SOURCE = "source"
TARGET = "target"
_DOMAIN_CODE = {SOURCE: 0, TARGET: 1}


# ----------------------------------------------------------------- samples

class Sample:
    """One image with an optional label and a domain tag.

    A hidden sample withholds its label: reading `.label` raises, which
    is how the semi-supervised contract (trainer never sees target
    ground truth) is enforced rather than just promised.
    """

    __slots__ = ("image", "_label", "domain", "id", "_hidden")

    def __init__(self, image, label, domain, sample_id, hidden=False):
        if domain not in (SOURCE, TARGET):
            raise InvalidInputError(f"unknown domain {domain!r}")
        self.image = image
        self._label = label
        self.domain = domain
        self.id = sample_id
        self._hidden = hidden

    @property
    def label(self):
        if self._hidden:
            raise LabelWithheldError(
                f"label of {self.id} is withheld from training")
        return self._label

    @property
    def has_label(self):
        return self._label is not None and not self._hidden

    @property
    def hidden(self):
        return self._hidden

    def hidden_copy(self):
        return Sample(self.image, self._label, self.domain, self.id, hidden=True)

    def _eval_label(self):
        """Label regardless of hiding; evaluation-only accessor."""
        return self._label


class Dataset:
    """Immutable list of samples ordered by id."""

    def __init__(self, samples):
        self.samples = sorted(samples, key=lambda s: s.id)
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("duplicate sample ids")
        self._by_id = {s.id: s for s in self.samples}

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def ids(self):
        return [s.id for s in self.samples]

    def by_id(self, sample_id):
        return self._by_id[sample_id]

    def subset(self, ids):
        return Dataset([self._by_id[i] for i in ids])

    def hidden(self):
        """View with all labels withheld (for the training loop)."""
        return Dataset([s.hidden_copy() for s in self.samples])


# --------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class ShiftParams:
    """Fixed photometric domain-shift operator for target images."""

    brightness: float = 0.25
    noise_sigma: float = 0.08
    blur_sigma: float = 1.0

    @staticmethod
    def none():
        return ShiftParams(0.0, 0.0, 0.0)

    @property
    def is_identity(self):
        return (self.brightness == 0.0 and self.noise_sigma == 0.0
                and self.blur_sigma == 0.0)


@dataclass(frozen=True)
class SynthConfig:
    n_source: int = 40
    n_target: int = 40
    image_size: int = 128
    num_classes: int = 2
    shapes: tuple = ("ellipse", "polygon")
    shift: ShiftParams = field(default_factory=ShiftParams)

    def __post_init__(self):
        if self.n_source <= 0 or self.n_target <= 0:
            raise InvalidConfigError("sample counts must be positive")
        if self.image_size < 16:
            raise InvalidConfigError("image_size must be >= 16")
        if self.num_classes < 2:
            raise InvalidConfigError("need at least background + one class")
        if not self.shapes or any(s not in ("ellipse", "polygon")
                                  for s in self.shapes):
            raise InvalidConfigError(f"unsupported shapes {self.shapes}")


def _render_ellipse(rng, size):
    """Axis-randomized ellipse fully inside the image; exact pixel-center
    mask. Returns (mask, analytic_area)."""
    a = rng.uniform(0.12, 0.28) * size
    b = rng.uniform(0.12, 0.28) * size
    phi = rng.uniform(0.0, math.pi)
    margin = max(a, b) + 2.0
    cy = rng.uniform(margin, size - 1 - margin)
    cx = rng.uniform(margin, size - 1 - margin)
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - cy
    dx = xx - cx
    u = (dx * math.cos(phi) + dy * math.sin(phi)) / a
    v = (-dx * math.sin(phi) + dy * math.cos(phi)) / b
    mask = (u * u + v * v) <= 1.0
    return mask, math.pi * a * b


def _render_polygon(rng, size):
    """Random convex polygon (3-6 vertices); exact pixel-center mask.
    Returns (mask, analytic_area)."""
    k = int(rng.integers(3, 7))
    radius = rng.uniform(0.16, 0.3) * size
    margin = radius + 2.0
    cy = rng.uniform(margin, size - 1 - margin)
    cx = rng.uniform(margin, size - 1 - margin)
    angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=k))
    radii = rng.uniform(0.5, 1.0, size=k) * radius
    vy = cy + radii * np.sin(angles)
    vx = cx + radii * np.cos(angles)
    # shoelace area (vertices are CCW by construction of sorted angles)
    area = 0.5 * abs(float(np.sum(vx * np.roll(vy, -1) - np.roll(vx, -1) * vy)))
    yy, xx = np.mgrid[0:size, 0:size]
    inside = np.ones((size, size), dtype=bool)
    for i in range(k):
        j = (i + 1) % k
        cross = ((vx[j] - vx[i]) * (yy - vy[i])
                 - (vy[j] - vy[i]) * (xx - vx[i]))
        inside &= cross >= 0.0
    return inside, area


def _render_clean(rng, cfg):
    """One clean image + exact mask. Returns (image f32, label i32, area)."""
    size = cfg.image_size
    base = rng.uniform(0.08, 0.28)
    bg = base + rng.uniform(-0.03, 0.03, size=3)
    gy, gx = rng.uniform(-1.0, 1.0, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    gradient = 0.05 * (gy * yy / size + gx * xx / size)
    img = np.clip(bg[None, None, :] + gradient[..., None], 0.0, 1.0)

    shape_kind = cfg.shapes[int(rng.integers(0, len(cfg.shapes)))]
    cls = int(rng.integers(1, cfg.num_classes))
    if shape_kind == "ellipse":
        mask, area = _render_ellipse(rng, size)
    else:
        mask, area = _render_polygon(rng, size)
    fg_base = rng.uniform(0.45, 0.65)
    fg = np.clip(fg_base + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
    img = np.where(mask[..., None], fg[None, None, :], img)

    label = np.zeros((size, size), dtype=np.int32)
    label[mask] = cls
    return img.astype(np.float32), label, area


def apply_domain_shift(image, shift, rng):
    """blur -> additive brightness -> Gaussian noise, clamped to [0, 1]."""
    from . import kernels

    x = image.astype(np.float32)
    if shift.blur_sigma > 0:
        x = kernels.gaussian_blur(x, shift.blur_sigma)
    if shift.brightness != 0.0:
        x = x + np.float32(shift.brightness)
    if shift.noise_sigma > 0:
        x = x + rng.normal(0.0, shift.noise_sigma, size=x.shape).astype(np.float32)
    return np.clip(x, 0.0, 1.0)


def _image_rng(seed, domain, index):
    return np.random.default_rng(
        np.random.SeedSequence((int(seed), _DOMAIN_CODE[domain], int(index))))


def generate_synthetic(config, seed=0):
    """Deterministic synthetic source/target datasets.

    Target samples carry their ground-truth masks (the shift operator is
    photometric, so masks are unchanged); hide them before handing the
    dataset to a trainer.
    """
    source = []
    for i in range(config.n_source):
        rng = _image_rng(seed, SOURCE, i)
        img, lab, _ = _render_clean(rng, config)
        source.append(Sample(img, lab, SOURCE, f"source_{i:04d}"))
    target = []
    for i in range(config.n_target):
        rng = _image_rng(seed, TARGET, i)
        img, lab, _ = _render_clean(rng, config)
        img = apply_domain_shift(img, config.shift, rng)
        target.append(Sample(img, lab, TARGET, f"target_{i:04d}"))
    return Dataset(source), Dataset(target)


def synthetic_sample_with_area(config, seed, domain, index):
    """Single clean rendering plus its analytic shape area (for tests)."""
    rng = _image_rng(seed, domain, index)
    img, lab, area = _render_clean(rng, config)
    return img, lab, area


# ----------------------------------------------------------------- folders

@dataclass(frozen=True)
class FolderLayout:
    images_dir: str = "images"
    masks_dir: str = "masks"
    extension: str = ".png"


def save_folder_dataset(dataset, root, layout=FolderLayout()):
    """Write images/*.png (8-bit RGB) and masks/*.png (8-bit class ids)."""
    from pathlib import Path

    from PIL import Image

    root = Path(root)
    img_dir = root / layout.images_dir
    msk_dir = root / layout.masks_dir
    img_dir.mkdir(parents=True, exist_ok=True)
    for s in dataset:
        arr = np.clip(np.round(np.asarray(s.image, dtype=np.float64) * 255.0),
                      0, 255).astype(np.uint8)
        Image.fromarray(arr).save(img_dir / f"{s.id}{layout.extension}")
        if s._eval_label() is not None:
            msk_dir.mkdir(parents=True, exist_ok=True)
            lab = np.asarray(s._eval_label()).astype(np.uint8)
            Image.fromarray(lab, mode="L").save(
                msk_dir / f"{s.id}{layout.extension}")


def load_folder_dataset(root, layout=FolderLayout(), domain=SOURCE):
    """Load image/mask pairs matched by filename stem.

    Images missing a mask load as unlabeled samples. Unreadable files
    and image/mask size mismatches raise errors naming the offender.
    """
    from pathlib import Path

    from PIL import Image

    root = Path(root)
    img_dir = root / layout.images_dir
    if not img_dir.is_dir():
        raise InvalidInputError(f"no image directory at {img_dir}")
    msk_dir = root / layout.masks_dir
    samples = []
    for img_path in sorted(img_dir.glob(f"*{layout.extension}")):
        stem = img_path.stem
        try:
            with Image.open(img_path) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise InvalidInputError(f"unreadable image {img_path}: {exc}") from exc
        label = None
        msk_path = msk_dir / img_path.name
        if msk_path.exists():
            try:
                with Image.open(msk_path) as im:
                    label = np.asarray(im.convert("L"), dtype=np.int32)
            except OSError as exc:
                raise InvalidInputError(
                    f"unreadable mask {msk_path}: {exc}") from exc
            if label.shape != img.shape[:2]:
                raise InvalidInputError(
                    f"mask/image size mismatch for {stem}: "
                    f"{label.shape} vs {img.shape[:2]}")
        samples.append(Sample(img, label, domain, stem))
    return Dataset(samples)


# ------------------------------------------------------------------- folds

@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_source_ids: tuple
    train_target_ids: tuple
    test_ids: tuple


def make_folds(dataset, k=4, seed=0):
    """Partition the evaluation pool into k near-equal test sets.

    The pool is the dataset's target-domain samples when it has any
    (held-out target evaluation), otherwise every sample. Remaining pool
    members plus all other samples form the training side, separated by
    domain. Deterministic in (dataset ids, k, seed).
    """
    if len(dataset) < k:
        raise InvalidInputError(f"dataset of {len(dataset)} cannot split {k} ways")
    target_ids = [s.id for s in dataset if s.domain == TARGET]
    pool = target_ids if target_ids else list(dataset.ids)
    if len(pool) < k:
        raise InvalidInputError(
            f"evaluation pool of {len(pool)} cannot split {k} ways")
    source_ids = tuple(s.id for s in dataset if s.domain == SOURCE)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), len(pool), k)))
    perm = [pool[i] for i in rng.permutation(len(pool))]
    folds = []
    for fi, chunk in enumerate(np.array_split(np.array(perm, dtype=object), k)):
        test = set(chunk.tolist())
        train_pool = tuple(sorted(i for i in pool if i not in test))
        if target_ids:
            train_target = train_pool
            train_source = source_ids
        else:
            train_target = ()
            train_source = train_pool
        folds.append(FoldSplit(fi, train_source, train_target,
                               tuple(sorted(test))))
    return folds


# ------------------------------------------------------------------ batches

def steps_per_epoch(n_source, n_target, batch_size):
    """ceil(max/batch): both domains are fully visited every epoch."""
    n = max(n_source, n_target)
    return max(1, -(-n // batch_size))


def _epoch_order(ids, seed, epoch, need, stream_tag):
    """First `need` elements of reshuffled cycles of `ids`; pure function
    of (ids, seed, epoch)."""
    out = []
    restart = 0
    while len(out) < need:
        rng = np.random.default_rng(np.random.SeedSequence(
            (int(seed), int(epoch), stream_tag, restart)))
        perm = rng.permutation(len(ids))
        out.extend(ids[i] for i in perm)
        restart += 1
    return out[:need]


def epoch_batches(source_ids, target_ids, batch_size, seed, epoch,
                  n_steps=None):
    """Paired (source_batch_ids, target_batch_ids) for one epoch.

    Streams are independently reshuffled per epoch and cycle (with a
    fresh shuffle) if one domain is smaller; iteration order is a pure
    function of (seed, epoch).
    """
    source_ids = list(source_ids)
    target_ids = list(target_ids)
    if n_steps is None:
        n_steps = steps_per_epoch(len(source_ids), len(target_ids), batch_size)
    need = n_steps * batch_size
    src = _epoch_order(source_ids, seed, epoch, need, 0)
    tgt = _epoch_order(target_ids, seed, epoch, need, 1) if target_ids else []
    batches = []
    for s in range(n_steps):
        lo, hi = s * batch_size, (s + 1) * batch_size
        batches.append((src[lo:hi], tgt[lo:hi] if target_ids else []))
    return batches


def stack_images(samples):
    """NHWC float32 batch from samples."""
    return np.stack([np.asarray(s.image, dtype=np.float32) for s in samples])


def stack_labels(samples):
    """(B, H, W) int32 batch; requires visible labels."""
    return np.stack([np.asarray(s.label, dtype=np.int32) for s in samples])
