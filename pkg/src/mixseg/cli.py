"""Command line entry point.

Subcommands: generate, train, eval, verify, ablate, plot. Exit codes
are part of the interface: 0 success, 2 configuration problem, 3
training diverged, 4 checkpoint or state mismatch, 5 self-check
failure. Scripts drive these, so the mapping must stay stable.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import config as C
from . import dataio, evaluation, trainer, verify
from .errors import (ConfigError, DivergedError, FormatError, MixsegError,
                     StateMismatch)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_STATE = 4
EXIT_VERIFY = 5

ABLATION_VARIANTS = (
    # name, overrides applied on top of the run config
    ("baseline", {"train.unsup_weight_max": 0.0}),
    ("mix_random", {"mix.pairing": "random", "train.use_nonlocal": False}),
    ("mix_similar", {"mix.pairing": "similar", "train.use_nonlocal": False}),
    ("nonlocal", {"mix.pairing": "similar", "train.use_nonlocal": True}),
    ("hard_decouple", {"mix.decouple_mode": "hard"}),
    ("soft_decouple", {"mix.decouple_mode": "soft"}),
)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="config file (key = value lines)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gmx")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic shapes dataset")
    _add_common(g)
    g.add_argument("--out", required=True, help="dataset directory to create")

    t = sub.add_parser("train", help="train a model on a generated dataset")
    _add_common(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory for outputs")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="val", choices=("val", "labeled"))
    e.add_argument("--no-tta", action="store_true", help="skip flip averaging")

    v = sub.add_parser("verify", help="run numeric self-checks")
    _add_common(v)

    a = sub.add_parser("ablate", help="train every variant over several seeds")
    _add_common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, default=3)

    pl = sub.add_parser("plot", help="render predictions as color images")
    _add_common(pl)
    pl.add_argument("--data", required=True)
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--count", type=int, default=8)
    return ap


def _load_dataset(cfg: dict, root: str):
    manifest = os.path.join(root, "manifest.tsv")
    rows, num_classes = dataio.read_manifest(manifest)
    if num_classes != cfg["model.num_classes"]:
        raise ConfigError(
            f"model.num_classes={cfg['model.num_classes']} but dataset "
            f"{manifest} declares {num_classes} classes")
    labeled = dataio.load_split(root, rows, "labeled")
    unlabeled = dataio.load_split(root, rows, "unlabeled")
    val = dataio.load_split(root, rows, "val")
    return rows, labeled, unlabeled, val


def cmd_generate(args) -> int:
    cfg = C.load(args.config, args.overrides)
    dataio.generate_shapes(
        args.out,
        n_images=cfg["data.n_images"],
        size=cfg["data.size"],
        seed=cfg["data.seed"],
        labeled_fraction=cfg["split.labeled_fraction"],
        val_count=cfg["split.val_count"],
        noise_std=cfg["data.noise_std"],
        min_frac=cfg["data.min_frac"],
        max_frac=cfg["data.max_frac"],
        contrast=cfg["data.contrast"],
    )
    rows, num_classes = dataio.read_manifest(os.path.join(args.out, "manifest.tsv"))
    counts = {s: 0 for s in dataio.SPLITS}
    for r in rows:
        counts[r.split] += 1
    print(f"wrote {len(rows)} images to {args.out} "
          f"({counts['labeled']} labeled, {counts['unlabeled']} unlabeled, "
          f"{counts['val']} val, {num_classes} classes)")
    return EXIT_OK


def _print_progress(metrics, val_cell) -> None:
    if metrics.iteration % 100 == 0 or val_cell:
        tail = f" val {float(val_cell):.4f}" if val_cell else ""
        print(f"iter {metrics.iteration:5d} lr {metrics.lr:.6f} "
              f"sup {metrics.loss_sup:.4f} unsup {metrics.loss_unsup:.4f}{tail}",
              flush=True)


def cmd_train(args) -> int:
    cfg = C.load(args.config, args.overrides)
    _, labeled, unlabeled, val = _load_dataset(cfg, args.data)
    model = C.build_model(cfg)
    tc = C.train_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.cfg"), "w", newline="\n") as fh:
        fh.write(C.dump(cfg))
    result = trainer.run_training(model, labeled, unlabeled, val, tc, args.out,
                                  progress=_print_progress)
    print(f"final val mIoU {result.final_miou:.4f}")
    print(f"checkpoint {result.checkpoint_path}")
    print(f"metrics {result.metrics_path}")
    return EXIT_OK


def _restore(cfg: dict, path: str):
    model = C.build_model(cfg)
    trainer.load_model_checkpoint(model, path)
    return model


def cmd_eval(args) -> int:
    cfg = C.load(args.config, args.overrides)
    _, labeled, _, val = _load_dataset(cfg, args.data)
    samples = val if args.split == "val" else labeled
    model = _restore(cfg, args.checkpoint)
    mean, per_class = evaluation.evaluate_miou(model, samples, tta=not args.no_tta)
    print(f"mIoU {mean:.4f} over {len(samples)} {args.split} images")
    for k, iou in enumerate(per_class):
        text = "undefined" if np.isnan(iou) else f"{iou:.4f}"
        print(f"  class {k}: {text}")
    return EXIT_OK


def cmd_verify(args) -> int:
    # config is parsed for interface consistency; checks take no knobs
    C.load(args.config, args.overrides)
    ok = verify.run_all(sys.stdout)
    return EXIT_OK if ok else EXIT_VERIFY


def run_ablation(cfg: dict, data_root: str, out_dir: str, seeds: int,
                 progress=None) -> dict[str, list[float]]:
    """Train every variant with `seeds` seeds, return variant -> mIoU list.

    Also writes ablation.csv (one row per run) under out_dir.
    """
    _, labeled, unlabeled, val = _load_dataset(cfg, data_root)
    os.makedirs(out_dir, exist_ok=True)
    results: dict[str, list[float]] = {}
    rows = []
    for name, overrides in ABLATION_VARIANTS:
        results[name] = []
        for seed in range(seeds):
            run_cfg = dict(cfg)
            run_cfg.update(overrides)
            run_cfg["train.seed"] = cfg["train.seed"] + seed
            model = C.build_model(run_cfg)
            tc = C.train_config(run_cfg)
            run_dir = os.path.join(out_dir, f"{name}_s{seed}")
            res = trainer.run_training(model, labeled, unlabeled, val, tc, run_dir)
            results[name].append(res.final_miou)
            rows.append((name, seed, res.final_miou))
            if progress is not None:
                progress(name, seed, res.final_miou)
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="\n") as fh:
        fh.write("variant,seed,final_miou\n")
        for name, seed, m in rows:
            fh.write(f"{name},{seed},{repr(float(m))}\n")
    return results


def cmd_ablate(args) -> int:
    cfg = C.load(args.config, args.overrides)
    if args.seeds < 1:
        raise ConfigError("--seeds must be at least 1")

    def progress(name, seed, m):
        print(f"{name} seed {seed}: mIoU {m:.4f}", flush=True)

    results = run_ablation(cfg, args.data, args.out, args.seeds, progress)
    print(f"\n{'variant':<14} {'mean':>8} {'min':>8} {'max':>8}")
    for name, vals in results.items():
        print(f"{name:<14} {np.mean(vals):8.4f} {min(vals):8.4f} {max(vals):8.4f}")
    print(f"rows written to {os.path.join(args.out, 'ablation.csv')}")
    return EXIT_OK


def class_palette(num_classes: int) -> np.ndarray:
    """(C, 3) uint8 colors: dark background, evenly spaced hues for classes."""
    pal = np.zeros((num_classes, 3), dtype=np.uint8)
    pal[0] = (40, 40, 48)
    for k in range(1, num_classes):
        h = (k - 1) / max(num_classes - 1, 1) * 6.0
        i = int(h) % 6
        f = h - int(h)
        v, s = 0.95, 0.75
        p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
        rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
        pal[k] = tuple(int(round(255 * u)) for u in rgb)
    return pal


def colorize(mask: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Integer mask (h, w) to float image (3, h, w) through the palette."""
    rgb = palette[mask.astype(np.int64)]
    return rgb.transpose(2, 0, 1).astype(np.float64) / 255.0


def cmd_plot(args) -> int:
    cfg = C.load(args.config, args.overrides)
    _, _, _, val = _load_dataset(cfg, args.data)
    model = _restore(cfg, args.checkpoint)
    pal = class_palette(cfg["model.num_classes"])
    os.makedirs(args.out, exist_ok=True)
    count = min(args.count, len(val))
    for sample in val[:count]:
        probs = evaluation.predict_tta_flip(model, sample.image)
        pred = np.argmax(probs, axis=0)
        # one strip per sample: input | ground truth | prediction
        gap = np.ones((3, sample.image.shape[1], 2))
        strip = np.concatenate(
            [sample.image, gap, colorize(sample.mask, pal),
             gap, colorize(pred, pal)], axis=2)
        dataio.write_ppm(os.path.join(args.out, f"{sample.index:05d}.ppm"), strip)
    print(f"wrote {count} image|truth|prediction strips to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (StateMismatch, FormatError) as e:
        print(f"state error: {e}", file=sys.stderr)
        return EXIT_STATE
    except MixsegError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
