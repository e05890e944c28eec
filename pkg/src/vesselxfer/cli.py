"""``vesselxfer`` command line: synth | frangi | train | eval | repro.

Every invocation writes into a fresh timestamped directory under ``--out``
and finishes by atomically writing ``manifest.json`` there.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .dataio import DataError, DsaItem, load_dsa_dir, load_phantom_dataset, resize_to
from .evaluation import emit_comparison_figure, evaluate_method, summary_table
from .objectives import NonFiniteLossError
from .phantom import make_phantom_dataset, save_mask
from .repro import METHOD_ORDER, make_dsa_items, make_fundus_items, ordered_reports, run_experiment
from .training import (
    compute_rough_labels,
    find_checkpoint,
    load_segmentor,
    root_seeds,
    segment,
    split_dataset,
    train_add_unet,
    train_classic_unet,
    train_scgan,
)
from .vesselness import rough_label

log = logging.getLogger("vesselxfer")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config_sha256: str
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    started: str = ""
    wall_clock_s: float = 0.0
    argv: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def write(self, run_dir: Path) -> Path:
        out = run_dir / "manifest.json"
        tmp = run_dir / ".manifest.json.tmp"
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, out)
        return out


def hash_tree(root: Path | str) -> str:
    """SHA-256 over the relative paths and bytes of every file below ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _spec_hash(spec) -> str:
    return hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()


def new_run_dir(out: Path | str, command: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{command}-{stamp}"
    d, k = base, 1
    while d.exists():
        d = base.with_name(f"{base.name}-{k}")
        k += 1
    d.mkdir(parents=True)
    return d


# -- data --------------------------------------------------------------------


def load_dsa(cfg: RunConfig, inputs: dict) -> list[DsaItem]:
    """User-supplied DSA directory (phantom manifest or dsa/ layout) or fresh phantoms."""
    d = cfg.data.dsa_dir
    if d:
        items = load_phantom_dataset(d) if (Path(d) / "manifest.csv").is_file() else load_dsa_dir(d)
        for it in items:
            if it.image.shape != (cfg.data.image_size,) * 2:
                it.image = resize_to(it.image, cfg.data.image_size, is_mask=False)
                if it.bstar is not None:
                    it.bstar = resize_to(it.bstar, cfg.data.image_size, is_mask=False)
                if it.truth is not None:
                    it.truth = resize_to(it.truth, cfg.data.image_size, is_mask=True)
        inputs["dsa_dir"] = hash_tree(d)
        return items
    spec = cfg.phantom
    inputs["dsa_phantom_spec"] = _spec_hash(spec)
    return make_dsa_items(spec, cfg.data.n_dsa)


def load_fundus(cfg: RunConfig, inputs: dict):
    if cfg.data.drive_dir:
        inputs["drive_dir"] = hash_tree(cfg.data.drive_dir)
    else:
        inputs["fundus_phantom_spec"] = _spec_hash(cfg.fundus_phantom)
    return make_fundus_items(cfg.experiment())


def _split(cfg: RunConfig, items):
    return split_dataset(items, cfg.train.split, root_seeds(cfg.train.seed)["split"])


# -- commands ----------------------------------------------------------------


def cmd_synth(cfg: RunConfig, run_dir: Path, man: RunManifest) -> None:
    spec = replace(cfg.phantom, seed=cfg.phantom.seed + cfg.seed)
    out = run_dir / "dataset"
    manifest = make_phantom_dataset(spec, cfg.n_images, out)
    man.inputs["phantom_spec"] = _spec_hash(spec)
    man.outputs += [str(manifest), str(out)]
    log.info("wrote %d phantoms to %s", cfg.n_images, out)


def cmd_frangi(cfg: RunConfig, run_dir: Path, man: RunManifest) -> None:
    items = load_dsa(cfg, man.inputs)
    compute_rough_labels(items, cfg.train.frangi, cfg.train.threshold, cache_dir=run_dir / "cache")
    out = run_dir / "labels"
    out.mkdir()
    for it in items:
        save_mask(out / f"{it.id}.png", it.label)
    man.outputs += [str(out), str(run_dir / "cache")]
    log.info("computed %d rough labels", len(items))


def _train_one(cfg: RunConfig, method: str, fundus, train, val, run_dir: Path):
    tcfg = replace(cfg.train, method=method)
    bstar = [it.bstar for it in train if it.bstar is not None]
    if method == "scgan":
        return train_scgan(tcfg, fundus, train, bstar, run_dir=run_dir, val_pool=val)
    if method == "add_unet":
        return train_add_unet(tcfg, fundus, train, run_dir=run_dir, val_pool=val)
    return train_classic_unet(tcfg, train, run_dir=run_dir, val_pool=val)


def cmd_train(cfg: RunConfig, run_dir: Path, man: RunManifest) -> None:
    method = cfg.train.method
    dsa = load_dsa(cfg, man.inputs)
    train, val, test = _split(cfg, dsa)
    compute_rough_labels(train + val, cfg.train.frangi, cfg.train.threshold, cache_dir=run_dir / "cache")
    fundus = load_fundus(cfg, man.inputs) if method != "classic_unet" else None
    (run_dir / "split.json").write_text(
        json.dumps({"train": [i.id for i in train], "val": [i.id for i in val], "test": [i.id for i in test]}),
        encoding="utf-8",
    )
    res = _train_one(cfg, method, fundus, train, val, run_dir)
    man.outputs += [str(run_dir / "checkpoints"), str(run_dir / "logs"), str(run_dir / "config.snapshot")]
    if res.val_history:
        log.info("final validation dice %.4f", res.val_history[-1]["dice"])


def _checkpoints(cfg: RunConfig, method_filter: str | None) -> dict[str, Path]:
    ck = cfg.eval.checkpoint
    if not ck:
        return {}
    paths = ck if isinstance(ck, (list, tuple)) else [ck]
    out = {}
    for p in paths:
        p = Path(p)
        if (p / "checkpoints").is_dir():
            p = find_checkpoint(p, cfg.train.eval_checkpoint)
        if not (p / "state.json").is_file():
            raise DataError(f"{p} is not a checkpoint directory")
        method = json.loads((p / "state.json").read_text(encoding="utf-8"))["method"]
        if method_filter in (None, method):
            out[method] = p
    return out


def cmd_eval(cfg: RunConfig, run_dir: Path, man: RunManifest, method_filter: str | None = None) -> None:
    dsa = load_dsa(cfg, man.inputs)
    _, _, test = _split(cfg, dsa)
    missing = [it.id for it in test if it.truth is None]
    if missing:
        raise DataError(f"test items without ground truth: {', '.join(missing[:5])}")
    test_set = [(it.id, it.image, it.truth) for it in test]
    segmenters = {}
    if method_filter in (None, "frangi"):
        segmenters["frangi"] = lambda im: rough_label(im, cfg.train.frangi, cfg.train.threshold)
    for method, path in _checkpoints(cfg, method_filter).items():
        net = load_segmentor(path)
        segmenters[method] = lambda im, n=net: segment(n, im, cfg.eval.threshold)
        man.inputs[f"checkpoint_{method}"] = hash_tree(path)
    if not segmenters:
        raise ConfigError("nothing to evaluate: set eval.checkpoint or use --method frangi")
    h = cfg.train.digest()
    reports = {m: evaluate_method(m, fn, test_set, h) for m, fn in segmenters.items()}
    for rep in reports.values():
        rep.save(run_dir / f"report_{rep.method}.csv")
        man.outputs.append(str(run_dir / f"report_{rep.method}.csv"))
    ordered = [reports[m] for m in METHOD_ORDER if m in reports]
    (run_dir / "summary.csv").write_text(summary_table(ordered), encoding="utf-8")
    man.outputs.append(str(run_dir / "summary.csv"))
    if cfg.eval.figure and cfg.eval.figure_rows > 0:
        rows = [
            (it.image, {m: fn(it.image) for m, fn in segmenters.items()}, it.truth)
            for it in test[: cfg.eval.figure_rows]
        ]
        fig = emit_comparison_figure(rows, run_dir / "comparison.png", tile=cfg.eval.figure_tile)
        man.outputs.append(str(fig))
    print(summary_table(ordered), end="")


def cmd_repro(cfg: RunConfig, run_dir: Path, man: RunManifest, method_filter: str | None = None) -> None:
    exp = cfg.experiment()
    if method_filter:
        exp = replace(exp, methods=(method_filter,))
    if cfg.data.dsa_dir:
        log.warning("repro always uses freshly rendered phantoms; data.dsa_dir is ignored")
    man.inputs["dsa_phantom_spec"] = _spec_hash(cfg.phantom)
    if cfg.data.drive_dir:
        man.inputs["drive_dir"] = hash_tree(cfg.data.drive_dir)
    else:
        man.inputs["fundus_phantom_spec"] = _spec_hash(cfg.fundus_phantom)
    results = run_experiment(exp, seeds=tuple(cfg.repro.seeds), out_dir=run_dir)
    for seed, reps in results.items():
        print(f"seed {seed}")
        print(summary_table(ordered_reports(reps)), end="")
    print("all seeds")
    print((run_dir / "summary.csv").read_text(encoding="utf-8"), end="")
    man.outputs.append(str(run_dir / "summary.csv"))
    man.outputs += [str(run_dir / f"seed_{s}") for s in results]


COMMANDS = {
    "synth": cmd_synth,
    "frangi": cmd_frangi,
    "train": cmd_train,
    "eval": cmd_eval,
    "repro": cmd_repro,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vesselxfer", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, default=None, help="YAML configuration file")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    p.add_argument("--out", type=Path, default=Path("runs"), help="parent directory for run folders")
    p.add_argument("--method", default=None, help="method to train or evaluate")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg = replace(
            cfg,
            seed=args.seed,
            train=replace(cfg.train, seed=args.seed),
            repro=replace(cfg.repro, seeds=(args.seed,)),
        )
    else:
        cfg = replace(cfg, train=replace(cfg.train, seed=cfg.seed))
    if args.method is not None:
        if args.command == "train":
            try:
                cfg = replace(cfg, train=replace(cfg.train, method=args.method))
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        elif args.method not in METHOD_ORDER:
            raise ConfigError(f"unknown method {args.method!r}; choose from {', '.join(METHOD_ORDER)}")
    return cfg


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logging.getLogger("vesselxfer").setLevel(logging.INFO)
    try:
        cfg, digest = load_config(args.config)
        cfg = _apply_overrides(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    t0 = time.time()
    try:
        run_dir = new_run_dir(args.out, args.command)
    except OSError as exc:
        print(f"data error: cannot create run directory under {args.out}: {exc}", file=sys.stderr)
        return EXIT_DATA
    man = RunManifest(
        command=args.command,
        config_path=str(args.config) if args.config else None,
        config_sha256=digest,
        seed=cfg.seed,
        started=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        argv=argv,
        config=cfg.to_dict(),
    )
    (run_dir / "config.resolved.json").write_text(json.dumps(man.config, indent=2, sort_keys=True), encoding="utf-8")
    fn = COMMANDS[args.command]
    code = EXIT_OK
    try:
        if args.command in ("eval", "repro"):
            fn(cfg, run_dir, man, args.method)
        else:
            fn(cfg, run_dir, man)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    man.wall_clock_s = round(time.time() - t0, 3)
    man.write(run_dir)
    if code == EXIT_OK:
        print(f"run directory: {run_dir}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
