"""End-to-end four-method comparison on phantom (or user-supplied) data."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import (
    DsaItem,
    FundusItem,
    PreprocessConfig,
    load_drive,
    preprocess_fundus,
    resize_to,
)
from .evaluation import MetricsReport, emit_comparison_figure, evaluate_method, summary_table
from .phantom import PhantomSpec, fundus_like_spec, render_fundus_like, render_phantom
from .training import (
    TrainConfig,
    compute_rough_labels,
    root_seeds,
    segment,
    split_dataset,
    train_add_unet,
    train_classic_unet,
    train_scgan,
)
from .vesselness import FrangiParams, rough_label

log = logging.getLogger(__name__)

METHOD_ORDER = ("frangi", "classic_unet", "add_unet", "scgan")
METHOD_TITLES = {
    "frangi": "Frangi",
    "classic_unet": "Classic U-Net",
    "add_unet": "Add U-Net",
    "scgan": "SC-GAN",
}


def default_dsa_spec() -> PhantomSpec:
    return PhantomSpec(
        image_size=256,
        n_branches=63,
        width_range=(1.5, 14.0),
        contrast_range=(0.3, 0.6),
        noise_sigma=0.05,
        thin_contrast_ratio=0.15,
        background_kind="tissue-texture",
        vessel_polarity="dark-on-bright",
        seed=1000,
    )


def default_fundus_spec() -> PhantomSpec:
    return fundus_like_spec(
        PhantomSpec(image_size=256, width_range=(1.5, 10.0), noise_sigma=0.03, seed=500000),
        n_branches=63,
    )


@dataclass
class ExperimentConfig:
    n_dsa: int = 100
    n_fundus: int = 40
    drive_dir: str | None = None
    image_size: int = 256
    dsa: PhantomSpec = field(default_factory=default_dsa_spec)
    fundus: PhantomSpec = field(default_factory=default_fundus_spec)
    preprocess: PreprocessConfig = PreprocessConfig()
    preprocess_fundus_phantoms: bool = False
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            epochs_flat=10,
            epochs_decay=10,
            batch_size=4,
            patch_size=128,
            patches_per_image=8,
            base_width=16,
            disc_width=32,
            # drops isolated noise responses so Frangi errors are mostly missed faint vessels
            frangi=FrangiParams(min_object_size=10),
        )
    )
    methods: tuple[str, ...] = METHOD_ORDER


def make_dsa_items(spec: PhantomSpec, n: int) -> list[DsaItem]:
    out = []
    for i in range(n):
        s = render_phantom(replace(spec, seed=spec.seed + i))
        out.append(DsaItem(id=f"dsa{i:04d}", image=s.image, bstar=s.background_only, truth=s.truth_mask))
    return out


def make_fundus_items(cfg: ExperimentConfig) -> list[FundusItem]:
    if cfg.drive_dir:
        raw = load_drive(cfg.drive_dir)
        items = []
        for it in raw:
            img = preprocess_fundus(it.image, it.fov, cfg.preprocess)
            items.append(
                FundusItem(
                    id=it.id,
                    image=resize_to(img, cfg.image_size, is_mask=False),
                    label=resize_to(it.label, cfg.image_size, is_mask=True),
                )
            )
        return items
    items = []
    for i in range(cfg.n_fundus):
        s = render_fundus_like(replace(cfg.fundus, seed=cfg.fundus.seed + i))
        img = preprocess_fundus(s.image, None, cfg.preprocess) if cfg.preprocess_fundus_phantoms else s.image
        items.append(FundusItem(id=f"fundus{i:04d}", image=img, label=s.truth_mask))
    return items


def _test_set(items: list[DsaItem]):
    return [(it.id, it.image, it.truth) for it in items]


def run_seed(
    cfg: ExperimentConfig,
    seed: int,
    dsa_items: list[DsaItem],
    fundus_items: list[FundusItem],
    out_dir: Path | str | None = None,
    figure_rows: int = 4,
) -> dict[str, MetricsReport]:
    """Train the learned methods for one seed and score all four on the test split."""
    tcfg = replace(cfg.train, seed=seed)
    seeds = root_seeds(seed)
    train, val, test = split_dataset(dsa_items, tcfg.split, seeds["split"])
    compute_rough_labels(dsa_items, tcfg.frangi, tcfg.threshold)
    out_dir = Path(out_dir) if out_dir is not None else None
    bstar_pool = [it.bstar for it in train if it.bstar is not None]
    reports: dict[str, MetricsReport] = {}
    segmenters = {}
    test_set = _test_set(test)
    h = tcfg.digest()
    for method in cfg.methods:
        run_dir = out_dir / method if out_dir is not None else None
        if method == "frangi":
            segmenters[method] = lambda im: rough_label(im, tcfg.frangi, tcfg.threshold)
            reports[method] = evaluate_method(method, segmenters[method], test_set, h)
            continue
        if method == "scgan":
            res = train_scgan(tcfg, fundus_items, train, bstar_pool, run_dir=run_dir, val_pool=val)
        elif method == "add_unet":
            res = train_add_unet(tcfg, fundus_items, train, run_dir=run_dir, val_pool=val)
        elif method == "classic_unet":
            res = train_classic_unet(tcfg, train, run_dir=run_dir, val_pool=val)
        else:
            raise ValueError(f"unknown method {method!r}")
        seg = res.segmentor
        if tcfg.eval_checkpoint == "best" and res.run_dir is not None and res.best_epoch is not None:
            from .training import load_segmentor

            seg = load_segmentor(res.run_dir / "checkpoints" / f"epoch_{res.best_epoch}")
        segmenters[method] = lambda im, s=seg: segment(s, im)
        reports[method] = evaluate_method(method, segmenters[method], test_set, h)
        log.info("seed %d %s dice %.4f", seed, method, reports[method].mean("dice"))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        for rep in reports.values():
            rep.save(out_dir / f"report_{rep.method}.csv")
        (out_dir / "summary.csv").write_text(summary_table(ordered_reports(reports)), encoding="utf-8")
        if figure_rows > 0 and test:
            rows = [(it.image, {m: fn(it.image) for m, fn in segmenters.items()}, it.truth) for it in test[:figure_rows]]
            emit_comparison_figure(rows, out_dir / "comparison.png")
    return reports


def ordered_reports(reports: dict[str, MetricsReport]) -> list[MetricsReport]:
    return [reports[m] for m in METHOD_ORDER if m in reports]


def seed_summary(results: dict[int, dict[str, MetricsReport]]) -> str:
    """Methods as rows; each cell is the mean over seeds of the per-seed mean, +- their std."""
    from .evaluation import METRICS

    lines = ["method," + ",".join(METRICS)]
    for m in METHOD_ORDER:
        per_seed = [r[m] for r in results.values() if m in r]
        if not per_seed:
            continue
        cells = []
        for metric in METRICS:
            v = np.array([rep.mean(metric) for rep in per_seed])
            cells.append(f"{v.mean():.3f}+-{v.std():.3f}")
        lines.append(m + "," + ",".join(cells))
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig, seeds=(0, 1, 2), out_dir: Path | str | None = None):
    """Per-seed reports for every method: ``{seed: {method: MetricsReport}}``."""
    dsa_items = make_dsa_items(cfg.dsa, cfg.n_dsa)
    fundus_items = make_fundus_items(cfg)
    results = {}
    for seed in seeds:
        sub = Path(out_dir) / f"seed_{seed}" if out_dir is not None else None
        results[seed] = run_seed(cfg, seed, dsa_items, fundus_items, sub)
    if out_dir is not None:
        Path(out_dir, "summary.csv").write_text(seed_summary(results), encoding="utf-8")
    return results
