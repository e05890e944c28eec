"""Trainers for the fusion GAN and the two U-Net baselines.

A run directory holds ``config.snapshot``, ``logs/losses.csv``,
``logs/val_metrics.csv`` and ``checkpoints/epoch_<n>/`` (the latest epoch and
the best-validation epoch are kept).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import fusion
from .dataio import DsaItem, FundusItem, sample_dsa_patches, sample_patches
from .evaluation import binarize_prediction, confusion, metrics_from_confusion
from .models import (
    PatchDiscConfig,
    UNetConfig,
    build_discriminator,
    build_generator,
    build_segmentor,
    load_network,
    save_network,
)
from .objectives import (
    LossWeights,
    NonFiniteLossError,
    gan_loss_discriminator,
    gan_loss_generator,
    seg_loss,
    shape_loss,
    total_loss,
)
from .vesselness import FrangiParams, rough_label

log = logging.getLogger(__name__)

METHODS = ("scgan", "add_unet", "classic_unet")
LOSS_COLUMNS = ("step", "L_GAN_D", "L_GAN_G", "L_seg", "L_shape_A", "L_shape_B", "total")
VAL_COLUMNS = ("epoch", "accuracy", "precision", "recall", "dice")


@dataclass(frozen=True)
class SplitFractions:
    train: float = 0.5
    val: float = 0.2
    test: float = 0.3

    def __post_init__(self):
        vals = (self.train, self.val, self.test)
        if min(vals) < 0 or not math.isclose(sum(vals), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {vals}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.train, self.val, self.test)


@dataclass(frozen=True)
class TrainConfig:
    method: str = "scgan"
    lr: float = 2e-4
    epochs_flat: int = 50
    epochs_decay: int = 50
    batch_size: int = 4
    patch_size: int = 256
    # patches drawn per DSA training image in one epoch
    patches_per_image: int = 1
    weights: LossWeights = LossWeights()
    split: SplitFractions = SplitFractions()
    seed: int = 0
    frangi: FrangiParams = FrangiParams()
    threshold: str = "otsu"
    adam_betas: tuple[float, float] = (0.5, 0.999)
    base_width: int = 64
    depth: int = 4
    disc_width: int = 64
    disc_layers: int = 3
    seg_grads_into_generator: bool = False
    normalize_by_mask_area: bool = False
    eval_checkpoint: str = "last"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs_flat < 0 or self.epochs_decay < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1 or self.patch_size < 1 or self.patches_per_image < 1:
            raise ValueError("batch_size, patch_size and patches_per_image must be positive")
        if self.eval_checkpoint not in ("last", "best"):
            raise ValueError(f"eval_checkpoint must be 'last' or 'best', got {self.eval_checkpoint!r}")
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))

    @property
    def epochs(self) -> int:
        return self.epochs_flat + self.epochs_decay

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["frangi"]["scales"] = list(self.frangi.scales)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        nested = {"weights": LossWeights, "split": SplitFractions, "frangi": FrangiParams}
        known = {f.name for f in dataclasses.fields(cls)}
        kw = {}
        for key, value in data.items():
            if key not in known:
                raise KeyError(f"train.{key}")
            if key in nested:
                sub_known = {f.name for f in dataclasses.fields(nested[key])}
                for sub in value:
                    if sub not in sub_known:
                        raise KeyError(f"train.{key}.{sub}")
                value = nested[key](**value)
            kw[key] = value
        return cls(**kw)

    def digest(self) -> str:
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def unet_config(self, generator: bool) -> UNetConfig:
        return UNetConfig(
            base_width=self.base_width,
            depth=self.depth,
            final_activation="tanh" if generator else "none",
        )

    def disc_config(self) -> PatchDiscConfig:
        return PatchDiscConfig(base_width=self.disc_width, n_layers=self.disc_layers)


def split_dataset(items: Sequence, fractions=(0.5, 0.2, 0.3), seed=0) -> tuple[list, list, list]:
    """Shuffle and cut into (train, val, test); rounding leftovers go to train."""
    if isinstance(fractions, SplitFractions):
        fractions = fractions.as_tuple()
    f_train, f_val, f_test = (float(f) for f in fractions)
    SplitFractions(f_train, f_val, f_test)
    n = len(items)
    if n < 3:
        raise ValueError(f"need at least 3 items to split, got {n}")
    n_val = int(round(f_val * n))
    n_test = int(round(f_test * n))
    n_train = n - n_val - n_test
    order = np.random.default_rng(seed).permutation(n)
    items = list(items)
    train = [items[i] for i in order[:n_train]]
    val = [items[i] for i in order[n_train : n_train + n_val]]
    test = [items[i] for i in order[n_train + n_val :]]
    return train, val, test


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant for ``epochs_flat`` epochs, then linear decay reaching 0 at ``epochs``."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.epochs_flat:
        return cfg.lr
    if cfg.epochs_decay == 0:
        return 0.0
    return cfg.lr * max(0.0, 1.0 - (epoch - cfg.epochs_flat) / cfg.epochs_decay)


def root_seeds(seed: int) -> dict[str, int]:
    """Independent per-purpose seeds derived from one root seed."""
    names = ("split", "sampling", "init")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def compute_rough_labels(
    items: list[DsaItem],
    params: FrangiParams,
    threshold: str = "otsu",
    cache_dir: Path | str | None = None,
) -> list[DsaItem]:
    """Attach Frangi pseudo-labels to every item (in place), optionally cached on disk."""
    cache = None
    if cache_dir is not None:
        key = f"{params.digest()}-{threshold}"
        cache = Path(cache_dir) / key
        cache.mkdir(parents=True, exist_ok=True)
    for item in items:
        if cache is not None:
            f = cache / f"{item.id}.npy"
            if f.is_file():
                item.label = np.load(f)
                continue
        item.label = rough_label(item.image, params, threshold)
        if cache is not None:
            np.save(cache / f"{item.id}.npy", item.label)
    return items


def _stack(arrays: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays).astype(np.float32)[:, None])


def _pad_to_multiple(img: np.ndarray, f: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = img.shape
    ph, pw = (-h) % f, (-w) % f
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="reflect")
    return img, (h, w)


@torch.no_grad()
def predict_logits(segmentor, img: np.ndarray) -> np.ndarray:
    """Segmentor logits for a whole image of any size (reflect-padded internally)."""
    f = 2**segmentor.cfg.depth
    padded, (h, w) = _pad_to_multiple(np.asarray(img, dtype=float), f)
    x = torch.from_numpy(padded.astype(np.float32))[None, None]
    was_training = segmentor.training
    segmentor.eval()
    out = segmentor(x)[0, 0, :h, :w].double().numpy()
    segmentor.train(was_training)
    return out


def segment(segmentor, img: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return binarize_prediction(predict_logits(segmentor, img), threshold)


def validation_metrics(segmentor, items: list[DsaItem]) -> dict[str, float] | None:
    scored = [it for it in items if it.truth is not None]
    if not scored:
        return None
    rows = [metrics_from_confusion(*confusion(segment(segmentor, it.image), it.truth)) for it in scored]
    m = np.mean(np.array(rows), axis=0)
    return dict(zip(VAL_COLUMNS[1:], (float(v) for v in m)))


@dataclass
class TrainResult:
    method: str
    networks: dict
    history: list[dict] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)
    run_dir: Path | None = None
    best_epoch: int | None = None

    @property
    def segmentor(self):
        return self.networks["segmentor"]


def _check_finite(values: dict, step: int) -> None:
    for k, v in values.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(k, v, step)


class _Trainer:
    """Shared loop: epochs, learning-rate schedule, logging, checkpoints, validation."""

    nets: tuple[str, ...] = ()

    def __init__(self, cfg: TrainConfig, run_dir: Path | str | None, val_pool: list[DsaItem] | None):
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.val_pool = val_pool or []
        self.seeds = root_seeds(cfg.seed)
        torch.manual_seed(self.seeds["init"])
        self.networks = self.build_networks()
        self.optims = {
            name: torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.adam_betas)
            for name, net in self.networks.items()
        }
        self.step = 0
        self.start_epoch = 0
        self.history: list[dict] = []
        self.val_history: list[dict] = []
        self.best_dice = -math.inf
        self.best_epoch: int | None = None

    def build_networks(self) -> dict:
        raise NotImplementedError

    def epoch_batches(self, epoch: int) -> list:
        raise NotImplementedError

    def train_step(self, batch) -> dict[str, float]:
        raise NotImplementedError

    # -- persistence ---------------------------------------------------------
    def _ckpt_dir(self, epoch: int) -> Path:
        return self.run_dir / "checkpoints" / f"epoch_{epoch}"

    def save_checkpoint(self, epoch: int) -> Path:
        d = self._ckpt_dir(epoch)
        d.mkdir(parents=True, exist_ok=True)
        for name, net in self.networks.items():
            save_network(d / f"{name}.vxf", net, extra={"method": self.cfg.method, "epoch": epoch})
        torch.save({k: o.state_dict() for k, o in self.optims.items()}, d / "optimizer.pt")
        state = {
            "method": self.cfg.method,
            "epoch": epoch,
            "step": self.step,
            "config": self.cfg.to_dict(),
            "history": self.history,
            "val_history": self.val_history,
            "best_dice": self.best_dice if math.isfinite(self.best_dice) else None,
            "best_epoch": self.best_epoch,
        }
        (d / "state.json").write_text(json.dumps(state, indent=1), encoding="utf-8")
        return d

    def load_checkpoint(self, d: Path | str) -> None:
        d = Path(d)
        state = json.loads((d / "state.json").read_text(encoding="utf-8"))
        if state["method"] != self.cfg.method:
            raise ValueError(f"checkpoint {d} is for method {state['method']!r}")
        for name in self.networks:
            net, _ = load_network(d / f"{name}.vxf")
            self.networks[name].load_state_dict(net.state_dict())
        opt_state = torch.load(d / "optimizer.pt", weights_only=True)
        for k, o in self.optims.items():
            o.load_state_dict(opt_state[k])
        self.step = state["step"]
        self.start_epoch = state["epoch"] + 1
        self.history = state["history"]
        self.val_history = state["val_history"]
        self.best_dice = state["best_dice"] if state["best_dice"] is not None else -math.inf
        self.best_epoch = state["best_epoch"]

    def _prune(self, keep: set[int]) -> None:
        root = self.run_dir / "checkpoints"
        for d in root.glob("epoch_*"):
            try:
                n = int(d.name.split("_", 1)[1])
            except ValueError:
                continue
            if n not in keep:
                shutil.rmtree(d)

    def _write_logs(self) -> None:
        logs = self.run_dir / "logs"
        logs.mkdir(parents=True, exist_ok=True)
        with open(logs / "losses.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOSS_COLUMNS)
            for row in self.history:
                w.writerow([row["step"]] + [repr(row[c]) for c in LOSS_COLUMNS[1:]])
        with open(logs / "val_metrics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(VAL_COLUMNS)
            for row in self.val_history:
                w.writerow([row["epoch"]] + [repr(row[c]) for c in VAL_COLUMNS[1:]])

    # -- loop ----------------------------------------------------------------
    def run(self, stop_epoch: int | None = None) -> TrainResult:
        cfg = self.cfg
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "config.snapshot").write_text(
                json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
            )
        end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
        for epoch in range(self.start_epoch, end):
            lr = lr_schedule(epoch, cfg)
            for o in self.optims.values():
                for g in o.param_groups:
                    g["lr"] = lr
            for batch in self.epoch_batches(epoch):
                values = self.train_step(batch)
                _check_finite(values, self.step)
                comps = {
                    "gan": values.get("L_GAN_G", 0.0),
                    "seg": values["L_seg"],
                    "shape_a": values.get("L_shape_A", 0.0),
                    "shape_b": values.get("L_shape_B", 0.0),
                }
                _, breakdown = total_loss(comps, cfg.weights)
                row = {
                    "step": self.step,
                    "L_GAN_D": values.get("L_GAN_D", 0.0),
                    "L_GAN_G": comps["gan"],
                    "L_seg": comps["seg"],
                    "L_shape_A": comps["shape_a"],
                    "L_shape_B": comps["shape_b"],
                    "total": breakdown["total"],
                }
                self.history.append(row)
                self.step += 1
            val = validation_metrics(self.networks["segmentor"], self.val_pool)
            if val is not None:
                self.val_history.append({"epoch": epoch, **val})
                if val["dice"] > self.best_dice:
                    self.best_dice = val["dice"]
                    self.best_epoch = epoch
            last = self.history[-1] if self.history else {}
            log.info("%s epoch %d lr %.2e seg %.4f val %s", cfg.method, epoch, lr,
                     last.get("L_seg", float("nan")), None if val is None else round(val["dice"], 4))
            if self.run_dir is not None:
                self.save_checkpoint(epoch)
                keep = {epoch} | ({self.best_epoch} if self.best_epoch is not None else set())
                self._prune(keep)
                self._write_logs()
        return TrainResult(
            method=cfg.method,
            networks=self.networks,
            history=self.history,
            val_history=self.val_history,
            run_dir=self.run_dir,
            best_epoch=self.best_epoch,
        )

    def _batches(self, samples: list) -> list[list]:
        b = self.cfg.batch_size
        return [samples[i : i + b] for i in range(0, len(samples), b)]


class SCGANTrainer(_Trainer):
    def __init__(self, cfg, fundus_pool, dsa_pool, bstar_pool=None, run_dir=None, val_pool=None):
        _require_labels(dsa_pool)
        self.fundus_pool = fundus_pool
        self.dsa_pool = dsa_pool
        self.bstar_pool = bstar_pool
        super().__init__(cfg, run_dir, val_pool)

    def build_networks(self):
        return {
            "generator": build_generator(self.cfg.unet_config(generator=True)),
            "discriminator": build_discriminator(self.cfg.disc_config()),
            "segmentor": build_segmentor(self.cfg.unet_config(generator=False)),
        }

    def epoch_batches(self, epoch):
        samples = sample_patches(
            self.fundus_pool, self.dsa_pool, self.bstar_pool, self.cfg.patch_size,
            len(self.dsa_pool) * self.cfg.patches_per_image, [self.seeds["sampling"], epoch],
        )
        return [fusion_batch(chunk) for chunk in self._batches(samples)]

    def train_step(self, batch):
        return scgan_step(self.networks, self.optims, batch, self.cfg)


class SegmentorTrainer(_Trainer):
    """Single U-Net trained with the segmentation loss (both baselines)."""

    def __init__(self, cfg, dsa_pool, fundus_pool=None, bstar_pool=None, run_dir=None, val_pool=None):
        _require_labels(dsa_pool)
        if cfg.method == "add_unet" and not fundus_pool:
            raise ValueError("add_unet needs a fundus pool")
        self.fundus_pool = fundus_pool
        self.dsa_pool = dsa_pool
        self.bstar_pool = bstar_pool
        super().__init__(cfg, run_dir, val_pool)

    def build_networks(self):
        return {"segmentor": build_segmentor(self.cfg.unet_config(generator=False))}

    def epoch_batches(self, epoch):
        seed = [self.seeds["sampling"], epoch]
        n = len(self.dsa_pool) * self.cfg.patches_per_image
        p = self.cfg.patch_size
        out = []
        if self.cfg.method == "add_unet":
            # pre-contrast frames are not used, but pairing follows the GAN's sampler
            samples = sample_patches(self.fundus_pool, self.dsa_pool, self.bstar_pool or [np.zeros((p, p))], p, n, seed)
            for chunk in self._batches(samples):
                fb = fusion_batch(chunk)
                out.append((fusion.mix(fb["a"], fb["b"]), fusion.union_label(fb["label_a"], fb["label_b"])))
        else:
            pairs = sample_dsa_patches(self.dsa_pool, p, n, seed)
            for chunk in self._batches(pairs):
                out.append((_stack([c[0] for c in chunk]), _stack([c[1] for c in chunk])))
        return out

    def train_step(self, batch):
        x, y = batch
        return {"L_seg": segmentor_step(self.networks["segmentor"], self.optims["segmentor"], x, y)}


def _require_labels(pool: list[DsaItem]) -> None:
    if not pool:
        raise ValueError("DSA pool is empty")
    missing = [it.id for it in pool if it.label is None]
    if missing:
        raise ValueError(f"DSA items without rough labels: {missing[:5]}")


def fusion_batch(samples) -> dict[str, torch.Tensor]:
    return {
        "a": _stack([s.a for s in samples]),
        "b": _stack([s.b for s in samples]),
        "b_star": _stack([s.b_star for s in samples]),
        "label_a": _stack([s.label_a for s in samples]),
        "label_b": _stack([s.label_b for s in samples]),
    }


def discriminator_step(disc, opt, real_bg, fake_bg) -> float:
    opt.zero_grad(set_to_none=True)
    loss = gan_loss_discriminator(disc(real_bg), disc(fake_bg.detach()))
    loss.backward()
    opt.step()
    return loss.item()


def generator_step(gen, disc, opt, fake, batch, cfg: TrainConfig, seg_term=None) -> dict[str, float]:
    """One generator update on an already computed ``fake`` (graph still attached)."""
    opt.zero_grad(set_to_none=True)
    fake_bg = fusion.extract_background(fake, batch["label_a"], batch["label_b"])
    # the discriminator only passes gradients through to the generator here
    for p in disc.parameters():
        p.requires_grad_(False)
    try:
        l_gan = gan_loss_generator(disc(fake_bg))
        l_a = shape_loss(fake, batch["a"], batch["label_a"], cfg.normalize_by_mask_area)
        l_b = shape_loss(fake, batch["b"], batch["label_b"], cfg.normalize_by_mask_area)
        loss = l_gan + cfg.weights.lambda_shape_a * l_a + cfg.weights.mu_shape_b * l_b
        if seg_term is not None:
            loss = loss + seg_term
        loss.backward()
    finally:
        for p in disc.parameters():
            p.requires_grad_(True)
    opt.step()
    return {"L_GAN_G": l_gan.item(), "L_shape_A": l_a.item(), "L_shape_B": l_b.item()}


def segmentor_step(seg, opt, x, y) -> float:
    opt.zero_grad(set_to_none=True)
    loss = seg_loss(seg(x), y)
    loss.backward()
    opt.step()
    return loss.item()


def scgan_step(networks: dict, optims: dict, batch: dict, cfg: TrainConfig) -> dict[str, float]:
    """Generator forward, then discriminator, generator and segmentor updates in that order."""
    gen, disc, seg = networks["generator"], networks["discriminator"], networks["segmentor"]
    union = fusion.union_label(batch["label_a"], batch["label_b"])
    fake = gen(fusion.mix(batch["a"], batch["b"]))
    real_bg = fusion.extract_background(batch["b_star"], batch["label_a"], batch["label_b"])
    fake_bg = fusion.extract_background(fake, batch["label_a"], batch["label_b"])
    l_d = discriminator_step(disc, optims["discriminator"], real_bg, fake_bg)

    seg_term = None
    if cfg.seg_grads_into_generator:
        for p in seg.parameters():
            p.requires_grad_(False)
        seg_term = seg_loss(seg(fake), union)
    try:
        g_vals = generator_step(gen, disc, optims["generator"], fake, batch, cfg, seg_term)
    finally:
        for p in seg.parameters():
            p.requires_grad_(True)
    l_s = segmentor_step(seg, optims["segmentor"], fake.detach(), union)
    return {"L_GAN_D": l_d, "L_seg": l_s, **g_vals}


def train_scgan(cfg, fundus_pool, dsa_pool, bstar_pool=None, run_dir=None, val_pool=None,
                resume_from=None, stop_epoch=None) -> TrainResult:
    """Train generator, discriminator and segmentor jointly on fused patches."""
    if cfg.method != "scgan":
        cfg = dataclasses.replace(cfg, method="scgan")
    t = SCGANTrainer(cfg, fundus_pool, dsa_pool, bstar_pool, run_dir, val_pool)
    if resume_from is not None:
        t.load_checkpoint(resume_from)
    return t.run(stop_epoch)


def train_add_unet(cfg, fundus_pool, dsa_pool, run_dir=None, val_pool=None, bstar_pool=None,
                   resume_from=None, stop_epoch=None) -> TrainResult:
    """U-Net on averaged fundus/DSA patches with union labels; evaluated on raw DSA."""
    if cfg.method != "add_unet":
        cfg = dataclasses.replace(cfg, method="add_unet")
    t = SegmentorTrainer(cfg, dsa_pool, fundus_pool, bstar_pool, run_dir, val_pool)
    if resume_from is not None:
        t.load_checkpoint(resume_from)
    return t.run(stop_epoch)


def train_classic_unet(cfg, dsa_pool, run_dir=None, val_pool=None, resume_from=None, stop_epoch=None) -> TrainResult:
    """U-Net trained to reproduce the Frangi pseudo-labels of the DSA frames."""
    if cfg.method != "classic_unet":
        cfg = dataclasses.replace(cfg, method="classic_unet")
    t = SegmentorTrainer(cfg, dsa_pool, run_dir=run_dir, val_pool=val_pool)
    if resume_from is not None:
        t.load_checkpoint(resume_from)
    return t.run(stop_epoch)


def load_segmentor(checkpoint_dir: Path | str):
    net, _ = load_network(Path(checkpoint_dir) / "segmentor.vxf")
    net.eval()
    return net


def find_checkpoint(run_dir: Path | str, which: str = "last") -> Path:
    """Path of the latest (``which="last"``) or best-validation epoch checkpoint."""
    root = Path(run_dir) / "checkpoints"
    dirs = sorted(root.glob("epoch_*"), key=lambda d: int(d.name.split("_", 1)[1]))
    if not dirs:
        raise FileNotFoundError(f"no checkpoints under {root}")
    last = dirs[-1]
    if which == "last":
        return last
    state = json.loads((last / "state.json").read_text(encoding="utf-8"))
    best = state.get("best_epoch")
    if best is None:
        return last
    return root / f"epoch_{best}"
