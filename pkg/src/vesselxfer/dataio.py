"""Image I/O, fundus preprocessing and paired patch sampling.

Images are float arrays in [0, 1]; masks are uint8 arrays over {0, 1}.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy.ndimage import median_filter

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".gif", ".jpg", ".jpeg", ".bmp")
DRIVE_SUBDIRS = ("images", "1st_manual", "mask")


class DataError(Exception):
    """Missing, unreadable or inconsistent input data."""


@dataclass(frozen=True)
class PreprocessConfig:
    median_kernel: int = 3
    clahe_tiles: int = 8
    clahe_clip: float = 2.0
    fill_outside_fov: bool = True


@dataclass
class FundusItem:
    id: str
    image: np.ndarray
    label: np.ndarray
    fov: np.ndarray | None = None


@dataclass
class DsaItem:
    """A target-domain frame with its rough label and optional extras.

    ``bstar`` is a vessel-free frame from the same sequence, ``truth`` a
    reference annotation used only for evaluation.
    """

    id: str
    image: np.ndarray
    label: np.ndarray | None = None
    bstar: np.ndarray | None = None
    truth: np.ndarray | None = None


@dataclass
class FusionSample:
    a: np.ndarray
    b: np.ndarray
    b_star: np.ndarray
    label_a: np.ndarray
    label_b: np.ndarray
    fundus_index: int = -1
    dsa_index: int = -1


def to_gray(arr: np.ndarray) -> np.ndarray:
    """Float [0, 1] grey image from an 8/16-bit or float, grey/RGB(A) array."""
    a = np.asarray(arr)
    if a.dtype == np.uint8:
        a = a / 255.0
    elif a.dtype == np.uint16:
        a = a / 65535.0
    elif a.dtype == bool:
        a = a.astype(float)
    else:
        a = a.astype(float)
        if a.max(initial=0.0) > 1.0:
            a = a / 255.0
    if a.ndim == 3:
        if a.shape[2] == 4:
            a = a[..., :3]
        if a.shape[2] == 1:
            a = a[..., 0]
        else:
            a = a @ np.array([0.299, 0.587, 0.114])
    return np.clip(a, 0.0, 1.0)


def read_image(path: Path | str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode in ("P", "PA"):
                im = im.convert("RGBA" if im.mode == "PA" else "RGB")
            if im.mode == "I;16" or im.mode == "I;16B" or im.mode == "I;16L":
                arr = np.asarray(im).astype(np.uint16)
            elif im.mode == "I":
                arr = np.asarray(im).astype(np.uint16)
            else:
                arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return to_gray(arr)


def read_mask(path: Path | str, threshold: float = 0.5) -> np.ndarray:
    return (read_image(path) >= threshold).astype(np.uint8)


def _list_images(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _drive_id(path: Path) -> str:
    m = re.match(r"(\d+)_", path.name)
    return m.group(1) if m else path.stem


def load_drive(root: Path | str) -> list[FundusItem]:
    """Load one DRIVE split: ``images/``, ``1st_manual/`` and ``mask/`` under ``root``.

    Files are matched on their leading numeric id (``21_training.tif``,
    ``21_manual1.gif``, ``21_training_mask.gif``). A missing annotation is an
    error; a missing FOV mask falls back to the whole frame.
    """
    root = Path(root)
    missing = [s for s in DRIVE_SUBDIRS[:2] if not (root / s).is_dir()]
    if missing:
        raise DataError(
            f"{root} is not a DRIVE split: missing {', '.join(missing)} "
            f"(expected subdirectories: {', '.join(DRIVE_SUBDIRS)})"
        )
    images = _list_images(root / "images")
    if not images:
        raise DataError(f"no images under {root / 'images'}")
    manual = {_drive_id(p): p for p in _list_images(root / "1st_manual")}
    fovs = {_drive_id(p): p for p in _list_images(root / "mask")} if (root / "mask").is_dir() else {}
    out = []
    for p in images:
        key = _drive_id(p)
        if key not in manual:
            raise DataError(f"no annotation in {root / '1st_manual'} for image {p.name}")
        img = read_image(p)
        label = read_mask(manual[key])
        fov = read_mask(fovs[key]) if key in fovs else np.ones(img.shape, dtype=np.uint8)
        if label.shape != img.shape or fov.shape != img.shape:
            raise DataError(f"shape mismatch between {p.name} and its annotation/FOV mask")
        out.append(FundusItem(id=key, image=img, label=label, fov=fov))
    return out


def clahe(img: np.ndarray, tiles: int = 8, clip: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation on an 8-bit grid.

    ``clip`` follows the usual convention of a multiple of the mean bin count.
    """
    u8 = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
    op = cv2.createCLAHE(clipLimit=float(clip), tileGridSize=(int(tiles), int(tiles)))
    return op.apply(u8) / 255.0


def preprocess_fundus(img: np.ndarray, fov: np.ndarray | None = None, cfg: PreprocessConfig = PreprocessConfig()):
    """Median filter then CLAHE; outside the FOV the interior mean is used."""
    k = cfg.median_kernel
    if k < 1 or k % 2 == 0:
        raise ValueError(f"median kernel must be a positive odd size, got {k}")
    img = np.asarray(img, dtype=float)
    inside = np.ones(img.shape, dtype=bool) if fov is None else np.asarray(fov) > 0
    fill = cfg.fill_outside_fov and not inside.all() and inside.any()
    if fill:
        img = np.where(inside, img, img[inside].mean())
    out = median_filter(img, size=k, mode="reflect")
    out = clahe(out, cfg.clahe_tiles, cfg.clahe_clip)
    if fill:
        out = np.where(inside, out, out[inside].mean())
    return np.clip(out, 0.0, 1.0)


def resize_to(img: np.ndarray, size: int, is_mask: bool | None = None) -> np.ndarray:
    """Resample to ``size`` x ``size``: bilinear for images, nearest for masks.

    ``is_mask`` defaults to True for integer/bool arrays.
    """
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    a = np.asarray(img)
    if is_mask is None:
        is_mask = a.dtype.kind in "biu"
    if a.shape == (size, size):
        return a.copy()
    if is_mask:
        src = (a > 0).astype(np.uint8)
        return cv2.resize(src, (size, size), interpolation=cv2.INTER_NEAREST)
    out = cv2.resize(a.astype(np.float64), (size, size), interpolation=cv2.INTER_LINEAR)
    return np.clip(out, 0.0, 1.0)


def load_dsa_dir(root: Path | str) -> list[DsaItem]:
    """Load ``dsa/*`` frames, pairing ``precontrast/<stem>`` and ``truth/<stem>`` when present.

    Pre-contrast frames without a matching stem are ignored here; use
    :func:`load_precontrast_pool` to sample them freely.
    """
    root = Path(root)
    if not (root / "dsa").is_dir():
        raise DataError(f"{root} has no dsa/ subdirectory")
    pre = {p.stem: p for p in _list_images(root / "precontrast")} if (root / "precontrast").is_dir() else {}
    truth = {p.stem: p for p in _list_images(root / "truth")} if (root / "truth").is_dir() else {}
    out = []
    for p in _list_images(root / "dsa"):
        out.append(
            DsaItem(
                id=p.stem,
                image=read_image(p),
                bstar=read_image(pre[p.stem]) if p.stem in pre else None,
                truth=read_mask(truth[p.stem]) if p.stem in truth else None,
            )
        )
    if not out:
        raise DataError(f"no images under {root / 'dsa'}")
    return out


def load_precontrast_pool(root: Path | str) -> list[np.ndarray]:
    d = Path(root) / "precontrast"
    return [read_image(p) for p in _list_images(d)] if d.is_dir() else []


def load_phantom_dataset(root: Path | str) -> list[DsaItem]:
    """Read a directory written by ``phantom.make_phantom_dataset``."""
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise DataError(f"no manifest.csv under {root}")
    out = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            for key in ("image", "mask", "background"):
                if not (root / row[key]).is_file():
                    raise DataError(f"manifest references missing file {root / row[key]}")
            out.append(
                DsaItem(
                    id=Path(row["image"]).stem,
                    image=read_image(root / row["image"]),
                    truth=read_mask(root / row["mask"]),
                    bstar=read_image(root / row["background"]),
                )
            )
    return out


def _crop(img: np.ndarray, top: int, left: int, patch: int) -> np.ndarray:
    return img[top : top + patch, left : left + patch]


def _random_corner(shape, patch: int, rng: np.random.Generator) -> tuple[int, int]:
    h, w = shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} exceeds image size {shape}")
    return int(rng.integers(0, h - patch + 1)), int(rng.integers(0, w - patch + 1))


def _balanced_indices(n_pool: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` indices drawn as concatenated random permutations of the pool."""
    reps = -(-n // n_pool)
    return np.concatenate([rng.permutation(n_pool) for _ in range(reps)])[:n]


def sample_patches(
    fundus_pool: list[FundusItem],
    dsa_pool: list[DsaItem],
    bstar_pool: list[np.ndarray] | None,
    patch: int,
    n: int,
    seed,
) -> list[FusionSample]:
    """Draw ``n`` independently paired fundus/DSA patches.

    DSA indices are concatenated random permutations, so ``n == len(dsa_pool)``
    visits every DSA frame once; each fundus index is an independent uniform
    draw, so the pairing carries no structure. The pre-contrast patch
    is cropped at its own random position from the frame's own ``bstar`` if it
    has one, otherwise from a random member of ``bstar_pool``.
    """
    if not fundus_pool:
        raise ValueError("fundus pool is empty")
    if not dsa_pool:
        raise ValueError("DSA pool is empty")
    bstar_pool = bstar_pool or []
    rng = np.random.default_rng(seed)
    di = _balanced_indices(len(dsa_pool), n, rng)
    fi = rng.integers(0, len(fundus_pool), size=n)
    out = []
    for f_idx, d_idx in zip(fi, di):
        fund = fundus_pool[int(f_idx)]
        dsa = dsa_pool[int(d_idx)]
        if dsa.label is None:
            raise ValueError(f"DSA item {dsa.id!r} has no rough label")
        if dsa.bstar is not None:
            bs = dsa.bstar
        elif bstar_pool:
            bs = bstar_pool[int(rng.integers(len(bstar_pool)))]
        else:
            raise ValueError(f"no pre-contrast frame available for DSA item {dsa.id!r}")
        ta, la_ = _random_corner(fund.image.shape, patch, rng)
        tb, lb_ = _random_corner(dsa.image.shape, patch, rng)
        ts, ls_ = _random_corner(bs.shape, patch, rng)
        out.append(
            FusionSample(
                a=_crop(fund.image, ta, la_, patch),
                b=_crop(dsa.image, tb, lb_, patch),
                b_star=_crop(bs, ts, ls_, patch),
                label_a=_crop(fund.label, ta, la_, patch),
                label_b=_crop(dsa.label, tb, lb_, patch),
                fundus_index=int(f_idx),
                dsa_index=int(d_idx),
            )
        )
    return out


def sample_dsa_patches(dsa_pool: list[DsaItem], patch: int, n: int, seed) -> list[tuple[np.ndarray, np.ndarray]]:
    """(image, rough label) patches for training on DSA frames alone."""
    if not dsa_pool:
        raise ValueError("DSA pool is empty")
    rng = np.random.default_rng(seed)
    out = []
    for d_idx in _balanced_indices(len(dsa_pool), n, rng):
        item = dsa_pool[int(d_idx)]
        t, l = _random_corner(item.image.shape, patch, rng)
        out.append((_crop(item.image, t, l, patch), _crop(item.label, t, l, patch)))
    return out
