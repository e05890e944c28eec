"""Synthetic angiography-like and fundus-like vessel phantoms.

Every phantom comes with an exact ground-truth mask and a vessel-free copy of
its background, so the whole pipeline can be exercised without clinical data.

Vessels are grown as recursively branching random-walk centerlines and drawn
with a Gaussian cross-section. The stored per-point ``radius`` is the
half-maximum radius of that Gaussian, so the ground truth (profile >= half its
peak) is exactly the set of pixels within ``radius`` of the centerline.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from skimage.draw import line as draw_line

BACKGROUND_KINDS = ("flat", "smooth-gradient", "tissue-texture")
POLARITIES = ("dark-on-bright", "bright-on-dark")

# half-max radius r of exp(-d^2 / (2 s^2)) satisfies r = s * sqrt(2 ln 2)
_FWHM_TO_SIGMA = 1.0 / math.sqrt(2.0 * math.log(2.0))
_PROFILE_SUPPORT = 3.0  # profile truncated at this many Gaussian sigmas


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one family of phantoms.

    ``width_range`` bounds the full width at half maximum of the vessels in
    pixels; the root of each tree starts near the upper bound and every child
    is strictly thinner than its parent.
    """

    image_size: int = 256
    n_branches: int = 7
    width_range: tuple[float, float] = (2.0, 10.0)
    contrast_range: tuple[float, float] = (0.4, 0.7)
    noise_sigma: float = 0.03
    background_kind: str = "tissue-texture"
    vessel_polarity: str = "dark-on-bright"
    seed: int = 0
    n_trees: int = 1
    background_level: float = 0.75
    background_amplitude: float = 0.12
    thin_contrast_ratio: float = 0.5
    noisy_background: bool = True

    def validate(self) -> None:
        if self.image_size <= 0:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        if self.n_branches <= 0:
            raise ValueError(f"n_branches must be positive, got {self.n_branches}")
        if self.n_trees <= 0:
            raise ValueError(f"n_trees must be positive, got {self.n_trees}")
        lo, hi = self.width_range
        if lo < 1.0 or hi < lo or hi > self.image_size / 8:
            raise ValueError(
                f"width_range {self.width_range} must satisfy 1 <= min <= max <= image_size/8"
            )
        c_lo, c_hi = self.contrast_range
        if not (0.0 < c_lo <= c_hi <= 1.0):
            raise ValueError(f"contrast_range {self.contrast_range} must lie within (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if self.background_kind not in BACKGROUND_KINDS:
            raise ValueError(f"unknown background_kind {self.background_kind!r}")
        if self.vessel_polarity not in POLARITIES:
            raise ValueError(f"unknown vessel_polarity {self.vessel_polarity!r}")
        if not 0.0 < self.thin_contrast_ratio <= 1.0:
            raise ValueError("thin_contrast_ratio must lie within (0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown phantom key(s): {', '.join(sorted(unknown))}")
        kw = dict(data)
        for key in ("width_range", "contrast_range"):
            if key in kw:
                kw[key] = tuple(float(v) for v in kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["width_range"] = list(self.width_range)
        d["contrast_range"] = list(self.contrast_range)
        return d


@dataclass
class Centerline:
    """One vessel segment: ``points`` is (N, 2) in (row, col), ``radii`` is (N,)."""

    points: np.ndarray
    radii: np.ndarray
    contrast: float
    depth: int = 0
    children: list[int] = field(default_factory=list)


@dataclass
class PhantomSample:
    image: np.ndarray
    truth_mask: np.ndarray
    background_only: np.ndarray
    centerlines: list[Centerline] = field(default_factory=list, repr=False)


def _border_start(size: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Random point on the image border plus an inward-pointing heading."""
    side = rng.integers(4)
    t = rng.uniform(0.2, 0.8) * (size - 1)
    edge = size - 1
    start = {
        0: (0.0, t),
        1: (edge, t),
        2: (t, 0.0),
        3: (t, edge),
    }[int(side)]
    start = np.array(start, dtype=float)
    centre = np.array([edge / 2.0, edge / 2.0])
    d = centre - start
    heading = math.atan2(d[1], d[0]) + rng.uniform(-0.5, 0.5)
    return start, heading


def _walk(start, heading, length, r0, r1, size, rng) -> tuple[np.ndarray, np.ndarray, float]:
    """Unit-step random walk with slowly drifting heading; stops at the border."""
    n_max = max(int(length), 1)
    pts = [np.asarray(start, dtype=float)]
    p = pts[0].copy()
    h = heading
    for _ in range(n_max):
        h += rng.normal(0.0, 0.06)
        step = np.array([math.cos(h), math.sin(h)])
        q = p + step
        if q.min() < 0.0 or q.max() > size - 1:
            break
        pts.append(q)
        p = q
    pts_arr = np.array(pts)
    n = len(pts_arr)
    frac = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    radii = r0 + (r1 - r0) * frac
    return pts_arr, radii, h


def grow_vessel_tree(spec: PhantomSpec) -> list[Centerline]:
    """Grow ``spec.n_trees`` binary vessel trees of ``spec.n_branches`` segments each.

    Segments are generated breadth-first: the root enters from a random border
    point, and each finished segment spawns two thinner children at its end
    until the segment budget is spent. Radii decrease monotonically along every
    segment and each child starts strictly thinner than its parent's end.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    w_lo, w_hi = spec.width_range
    r_lo, r_hi = w_lo / 2.0, w_hi / 2.0
    c_lo, c_hi = spec.contrast_range

    out: list[Centerline] = []
    for _ in range(spec.n_trees):
        start, heading = _border_start(size, rng)
        tree_contrast = rng.uniform(c_lo, c_hi)
        r_root = rng.uniform(r_lo + 0.8 * (r_hi - r_lo), r_hi)
        root_len = rng.uniform(0.3, 0.55) * size
        # queue entries: (parent index or -1, start, heading, start radius, length, depth)
        queue = deque([(-1, start, heading, r_root, root_len, 0)])
        made = 0
        while queue and made < spec.n_branches:
            parent, p0, h0, r0, length, depth = queue.popleft()
            r1 = r_lo + (r0 - r_lo) * 0.9
            pts, radii, h_end = _walk(p0, h0, length, r0, r1, size, rng)
            rel = (radii - r_lo) / max(r_hi - r_lo, 1e-9)
            k = spec.thin_contrast_ratio
            contrast = tree_contrast * (k + (1.0 - k) * float(np.clip(rel.mean(), 0.0, 1.0)))
            seg = Centerline(points=pts, radii=radii, contrast=contrast, depth=depth)
            idx = len(out)
            out.append(seg)
            made += 1
            if parent >= 0:
                out[parent].children.append(idx)
            if len(pts) < 2:
                continue
            for sign in (-1.0, 1.0):
                child_r = r_lo + (radii[-1] - r_lo) * rng.uniform(0.55, 0.8)
                if not child_r < radii[-1]:
                    continue
                child_h = h_end + sign * rng.uniform(0.45, 1.0)
                child_len = length * rng.uniform(0.6, 0.9)
                queue.append((idx, pts[-1], child_h, child_r, child_len, depth + 1))
    return out


def rasterize_centerlines(centerlines: list[Centerline], size: int) -> np.ndarray:
    """Boolean image of the pixels visited by the polylines (rounded, line-joined)."""
    out = np.zeros((size, size), dtype=bool)
    for seg in centerlines:
        pix = np.clip(np.rint(seg.points).astype(int), 0, size - 1)
        out[pix[0, 0], pix[0, 1]] = True
        for (r0, c0), (r1, c1) in zip(pix[:-1], pix[1:]):
            rr, cc = draw_line(r0, c0, r1, c1)
            out[rr, cc] = True
    return out


def _vessel_fields(centerlines: list[Centerline], size: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (normalised profile, contrast-weighted profile), each combined by max."""
    profile = np.zeros((size, size))
    weighted = np.zeros((size, size))
    for seg in centerlines:
        pts, radii = seg.points, seg.radii
        if len(pts) == 1:
            pts = np.vstack([pts, pts])
            radii = np.concatenate([radii, radii])
        for (p, q, ra, rb) in zip(pts[:-1], pts[1:], radii[:-1], radii[1:]):
            reach = _PROFILE_SUPPORT * max(ra, rb) * _FWHM_TO_SIGMA + 1.0
            r_min = max(int(math.floor(min(p[0], q[0]) - reach)), 0)
            r_max = min(int(math.ceil(max(p[0], q[0]) + reach)), size - 1)
            c_min = max(int(math.floor(min(p[1], q[1]) - reach)), 0)
            c_max = min(int(math.ceil(max(p[1], q[1]) + reach)), size - 1)
            rr, cc = np.mgrid[r_min : r_max + 1, c_min : c_max + 1]
            d = q - p
            dd = float(d @ d)
            if dd > 0:
                t = ((rr - p[0]) * d[0] + (cc - p[1]) * d[1]) / dd
                t = np.clip(t, 0.0, 1.0)
            else:
                t = np.zeros(rr.shape)
            dist2 = (rr - (p[0] + t * d[0])) ** 2 + (cc - (p[1] + t * d[1])) ** 2
            rad = ra + (rb - ra) * t
            s = rad * _FWHM_TO_SIGMA
            prof = np.exp(-dist2 / (2.0 * s * s))
            prof[dist2 > (_PROFILE_SUPPORT * s) ** 2] = 0.0
            win = profile[r_min : r_max + 1, c_min : c_max + 1]
            np.maximum(win, prof, out=win)
            wwin = weighted[r_min : r_max + 1, c_min : c_max + 1]
            np.maximum(wwin, seg.contrast * prof, out=wwin)
    return profile, weighted


def render_background(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    level = spec.background_level
    amp = spec.background_amplitude
    if spec.background_kind == "flat":
        bg = np.full((size, size), level)
    elif spec.background_kind == "smooth-gradient":
        theta = rng.uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1) - 0.5
        ramp = math.cos(theta) * yy + math.sin(theta) * xx
        bg = level + 2.0 * amp * ramp
    else:
        coarse = gaussian_filter(rng.standard_normal((size, size)), size / 12.0, mode="wrap")
        fine = gaussian_filter(rng.standard_normal((size, size)), size / 48.0, mode="wrap")
        coarse /= max(np.abs(coarse).max(), 1e-12)
        fine /= max(np.abs(fine).max(), 1e-12)
        bg = level + amp * (0.75 * coarse + 0.25 * fine)
    return np.clip(bg, 0.0, 1.0)


def composite(background: np.ndarray, vessel: np.ndarray, polarity: str) -> np.ndarray:
    """Dark vessels attenuate the background multiplicatively, bright ones lift it."""
    if polarity == "dark-on-bright":
        return background * (1.0 - vessel)
    return background + (1.0 - background) * vessel


def render_phantom(spec: PhantomSpec) -> PhantomSample:
    """Draw one phantom: noisy image, half-maximum truth mask, and vessel-free background."""
    spec.validate()
    centerlines = grow_vessel_tree(spec)
    rng = np.random.default_rng([spec.seed, 1])
    size = spec.image_size
    background = render_background(spec, rng)
    profile, weighted = _vessel_fields(centerlines, size)
    clean = composite(background, weighted, spec.vessel_polarity)
    truth = profile >= 0.5
    image = clean
    bg_only = background
    if spec.noise_sigma > 0:
        image = clean + rng.normal(0.0, spec.noise_sigma, clean.shape)
        if spec.noisy_background:
            bg_only = background + rng.normal(0.0, spec.noise_sigma, clean.shape)
    return PhantomSample(
        image=np.clip(image, 0.0, 1.0),
        truth_mask=truth.astype(np.uint8),
        background_only=np.clip(bg_only, 0.0, 1.0),
        centerlines=centerlines,
    )


def fundus_like_spec(base: PhantomSpec, **overrides) -> PhantomSpec:
    """Denser, thinner bright-on-dark trees; rendered with :func:`render_fundus_like`."""
    kw = dict(
        n_branches=max(2 * base.n_branches + 1, 15),
        n_trees=max(base.n_trees, 2),
        width_range=(base.width_range[0], max(base.width_range[0], base.width_range[1] * 0.7)),
        contrast_range=(0.35, 0.6),
        background_kind="smooth-gradient",
        vessel_polarity="bright-on-dark",
        background_level=0.4,
        background_amplitude=0.1,
        thin_contrast_ratio=0.8,
    )
    kw.update(overrides)
    return replace(base, **kw)


def render_fundus_like(spec: PhantomSpec) -> PhantomSample:
    """Render with ``spec.vessel_polarity``, then invert grey levels as a fundus green channel would."""
    s = render_phantom(spec)
    return PhantomSample(
        image=1.0 - s.image,
        truth_mask=s.truth_mask,
        background_only=1.0 - s.background_only,
        centerlines=s.centerlines,
    )


def _to_u16(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)


def save_gray(path: Path, img: np.ndarray) -> None:
    """Write a [0, 1] image as a 16-bit PNG."""
    try:
        Image.fromarray(_to_u16(img)).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def save_mask(path: Path, mask: np.ndarray) -> None:
    try:
        Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def make_phantom_dataset(
    spec: PhantomSpec,
    n_images: int,
    out_dir: Path | str,
    fundus_like: bool = False,
) -> Path:
    """Write ``n_images`` (image, mask, background) triples and a manifest.

    Image ``i`` uses seed ``spec.seed + i``. The manifest is ``manifest.csv``
    (header ``image,mask,background``, paths relative to ``out_dir``); the
    generating spec sits next to it in ``spec.json``. Returns the manifest path.
    """
    spec.validate()
    out_dir = Path(out_dir)
    render = render_fundus_like if fundus_like else render_phantom
    try:
        for sub in ("images", "masks", "background"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    rows = []
    for i in range(n_images):
        sample = render(replace(spec, seed=spec.seed + i))
        name = f"{i:05d}.png"
        rel = (f"images/{name}", f"masks/{name}", f"background/{name}")
        save_gray(out_dir / rel[0], sample.image)
        save_mask(out_dir / rel[1], sample.truth_mask)
        save_gray(out_dir / rel[2], sample.background_only)
        rows.append(rel)
    manifest = out_dir / "manifest.csv"
    try:
        with open(manifest, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "mask", "background"])
            w.writerows(rows)
        meta = {"spec": spec.to_dict(), "fundus_like": fundus_like, "n_images": n_images}
        (out_dir / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write manifest {manifest}: {exc}") from exc
    return manifest
