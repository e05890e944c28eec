"""Multi-scale Frangi vesselness and its binarisation into rough vessel labels."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d
from skimage.filters import threshold_otsu
from skimage.morphology import remove_small_objects

# wide kernel support keeps the sampled second-derivative kernel's moments exact
_TRUNCATE = 6.0
# Hessian norms below this are rounding residue from flat input
_FLAT_EPS = 1e-10


@dataclass(frozen=True)
class FrangiParams:
    scales: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 6.0, 8.0)
    beta: float = 0.5
    c: float | str = "auto"
    polarity: str = "dark"
    # connected components of the rough label smaller than this are dropped
    min_object_size: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if not self.scales:
            raise ValueError("scales must be nonempty")
        if any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be positive, got {self.scales}")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales must be strictly ascending, got {self.scales}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.c != "auto" and not float(self.c) > 0:
            raise ValueError(f"c must be positive or 'auto', got {self.c!r}")
        if self.polarity not in ("dark", "bright"):
            raise ValueError(f"polarity must be 'dark' or 'bright', got {self.polarity!r}")
        if self.min_object_size < 0:
            raise ValueError(f"min_object_size must be non-negative, got {self.min_object_size}")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


def gaussian_derivative_kernels(sigma: float, truncate: float = _TRUNCATE) -> dict[int, np.ndarray]:
    """Sampled Gaussian (order 0) and its first and second derivatives.

    The smoothing kernel sums to one and both derivative kernels sum to zero,
    so flat regions give exactly zero derivative response.
    """
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=float)
    g = np.exp(-0.5 * x * x / sigma**2)
    g /= g.sum()
    d1 = -x / sigma**2 * g
    d2 = (x * x / sigma**4 - 1.0 / sigma**2) * g
    d2 -= d2.sum() * g
    return {0: g, 1: d1, 2: d2}


def _separable(img: np.ndarray, row_kernel: np.ndarray, col_kernel: np.ndarray) -> np.ndarray:
    # correlate with reversed kernels == convolve
    out = correlate1d(img, row_kernel[::-1], axis=0, mode="reflect")
    return correlate1d(out, col_kernel[::-1], axis=1, mode="reflect")


def hessian_at_scale(img: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scale-normalised Hessian (Hxx, Hxy, Hyy) of ``img`` at Gaussian scale ``sigma``.

    ``x`` is the column axis and ``y`` the row axis. Each entry is multiplied by
    ``sigma**2`` so responses are comparable across scales. Borders reflect.
    """
    if sigma < 0.5:
        raise ValueError(f"sigma must be >= 0.5, got {sigma}")
    img = np.asarray(img, dtype=float)
    k = gaussian_derivative_kernels(sigma)
    s2 = sigma * sigma
    hxx = _separable(img, k[0], k[2])
    hxy = _separable(img, k[1], k[1])
    hyy = _separable(img, k[2], k[0])
    return hxx * s2, hxy * s2, hyy * s2


def hessian_eigenvalues(hxx, hxy, hyy) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form eigenvalues of [[hxx, hxy], [hxy, hyy]] ordered so that |l1| <= |l2|."""
    hxx = np.asarray(hxx, dtype=float)
    hyy = np.asarray(hyy, dtype=float)
    hxy = np.asarray(hxy, dtype=float)
    half_tr = 0.5 * (hxx + hyy)
    disc = np.hypot(0.5 * (hxx - hyy), hxy)
    ea = half_tr + disc
    eb = half_tr - disc
    swap = np.abs(ea) < np.abs(eb)
    l1 = np.where(swap, ea, eb)
    l2 = np.where(swap, eb, ea)
    return l1, l2


def vesselness_at_scale(hxx, hxy, hyy, params: FrangiParams) -> np.ndarray:
    l1, l2 = hessian_eigenvalues(hxx, hxy, hyy)
    s2 = l1 * l1 + l2 * l2
    if params.c == "auto":
        c = 0.5 * float(np.sqrt(s2.max()))
    else:
        c = float(params.c)
    nonzero = (l2 != 0) & (s2 > _FLAT_EPS**2)
    if c <= 0 or not nonzero.any():
        return np.zeros_like(l1)
    rb = np.divide(l1, l2, out=np.zeros_like(l1), where=nonzero)
    v = np.exp(-(rb * rb) / (2.0 * params.beta**2)) * (1.0 - np.exp(-s2 / (2.0 * c * c)))
    # dark tubes curve upward across their axis, so they need l2 > 0
    ok = (l2 > 0) if params.polarity == "dark" else (l2 < 0)
    v[~(ok & nonzero)] = 0.0
    return np.clip(v, 0.0, 1.0)


def frangi_per_scale(img: np.ndarray, params: FrangiParams) -> np.ndarray:
    """Stack of single-scale vesselness maps, shape (n_scales, H, W)."""
    return np.stack(
        [vesselness_at_scale(*hessian_at_scale(img, s), params) for s in params.scales]
    )


def frangi(img: np.ndarray, params: FrangiParams | None = None) -> np.ndarray:
    """Pixel-wise maximum of the single-scale vesselness over ``params.scales``."""
    params = params or FrangiParams()
    out = None
    for s in params.scales:
        v = vesselness_at_scale(*hessian_at_scale(img, s), params)
        out = v if out is None else np.maximum(out, v)
    return out


def threshold_vesselness(resp: np.ndarray, method: str | float = "otsu") -> np.ndarray:
    """Binarise a vesselness map.

    ``method`` is ``"otsu"`` (threshold from the histogram of responses above
    1e-6) or a number ``t`` for a fixed threshold; the mask is ``resp > t``.
    """
    resp = np.asarray(resp, dtype=float)
    if isinstance(method, str):
        if method != "otsu":
            raise ValueError(f"unknown threshold method {method!r}")
        vals = resp[resp > 1e-6]
        if vals.size == 0:
            return np.zeros(resp.shape, dtype=np.uint8)
        if np.ptp(vals) == 0:
            t = 0.0
        else:
            t = float(threshold_otsu(vals, nbins=256))
    else:
        t = float(method)
    return (resp > t).astype(np.uint8)


def rough_label(img: np.ndarray, params: FrangiParams | None = None, method: str | float = "otsu"):
    """Frangi pseudo-label of one image.

    Components (8-connected) with fewer than ``params.min_object_size`` pixels
    are removed after thresholding.
    """
    params = params or FrangiParams()
    mask = threshold_vesselness(frangi(img, params), method)
    if params.min_object_size > 0:
        mask = remove_small_objects(mask.astype(bool), params.min_object_size, connectivity=2).astype(np.uint8)
    return mask
