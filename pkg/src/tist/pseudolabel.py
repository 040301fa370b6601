"""Confidence masking and pseudo-label construction.

A pixel survives only where the predicted max class probability is
strictly above the threshold; two-view masks are combined with an
elementwise product, and surviving pixels take the argmax class of the
transformed view while everything else becomes the ignore index.
"""

import numpy as np

from .errors import InvalidConfigError, InvalidInputError

IGNORE_INDEX = 255


def check_probability_map(p, tol=1e-5):
    """Validate an HxWxC (or NHWC) probability map."""
    p = np.asarray(p)
    if p.ndim < 3:
        raise InvalidInputError(f"expected ...xHxWxC probabilities, got {p.shape}")
    if np.any(p < 0):
        raise InvalidInputError("probabilities must be nonnegative")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise InvalidInputError("per-pixel probabilities must sum to 1")
    return p


def confidence_mask(p, tau):
    """Binary map of pixels whose max class probability exceeds tau.

    tau must lie in the open interval (0.5, 1); the comparison is strict,
    so a max probability exactly equal to tau is rejected.
    """
    if not (0.5 < tau < 1.0):
        raise InvalidConfigError(f"tau must be in (0.5, 1), got {tau}")
    p = np.asarray(p)
    return (p.max(axis=-1) > tau).astype(np.uint8)


def ensemble_mask(a, b):
    """Elementwise product of two binary masks (logical AND)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return (a * b).astype(np.uint8)


def make_pseudo_labels(p_transformed, mask, ignore_index=IGNORE_INDEX):
    """Argmax labels of the transformed view where mask=1, else ignore.

    Argmax ties resolve to the lowest class index.
    """
    p = np.asarray(p_transformed)
    mask = np.asarray(mask)
    if p.shape[:-1] != mask.shape:
        raise InvalidInputError(
            f"probability map {p.shape} does not match mask {mask.shape}")
    labels = p.argmax(axis=-1).astype(np.int32)
    labels[mask == 0] = ignore_index
    return labels


def retained_fraction(mask):
    mask = np.asarray(mask)
    return float(mask.mean()) if mask.size else 0.0


# ------------------------------------------------------------- debug dumps

TURQUOISE = (64, 224, 208)


def save_mask_png(mask, path):
    """Write a binary mask as a lossless single-channel image."""
    from PIL import Image

    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def save_label_png(labels, path):
    """Write an integer label map (with ignore values) losslessly."""
    from PIL import Image

    Image.fromarray(np.asarray(labels).astype(np.uint8), mode="L").save(path)


def save_composite_preview(image, labels, path, ignore_index=IGNORE_INDEX,
                           num_classes=None):
    """Side-by-side image / label rendering with ignore in turquoise."""
    from PIL import Image

    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    img8 = np.clip(img * 255.0, 0, 255).astype(np.uint8)

    lab = np.asarray(labels)
    if num_classes is None:
        known = lab[lab != ignore_index]
        num_classes = int(known.max()) + 1 if known.size else 1
    shades = np.linspace(0, 255, max(num_classes, 2)).astype(np.uint8)
    rendered = np.zeros((*lab.shape, 3), dtype=np.uint8)
    for cls in range(num_classes):
        rendered[lab == cls] = shades[cls]
    rendered[lab == ignore_index] = TURQUOISE
    Image.fromarray(np.concatenate([img8, rendered], axis=1)).save(path)
