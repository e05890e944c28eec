"""Image mixing, label union and background extraction.

All functions work on numpy arrays and on torch tensors alike (they only use
arithmetic and comparison operators), so the same code runs in the training
loop and in the tests.
"""

from __future__ import annotations


def _check_shapes(*arrays) -> None:
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def mix(a, b):
    """Pixel-wise average of two images."""
    _check_shapes(a, b)
    return (a + b) / 2


def union_label(label_a, label_b):
    """Pixel-wise logical OR of two {0, 1} masks, written arithmetically to keep the dtype."""
    _check_shapes(label_a, label_b)
    return label_a + label_b - label_a * label_b


def background_mask(label_a, label_b):
    """Indicator of pixels outside both vessel labels."""
    return 1 - union_label(label_a, label_b)


def extract_background(img, label_a, label_b):
    """Zero the vessel pixels of either label; everything else is untouched."""
    _check_shapes(img, label_a, label_b)
    return background_mask(label_a, label_b) * img


def masked_region(img, label):
    """Keep only the pixels under ``label``."""
    _check_shapes(img, label)
    return label * img
