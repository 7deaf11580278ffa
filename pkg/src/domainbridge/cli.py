"""Command-line front-end.

Every subcommand takes its settings from three layers, later ones winning:
built-in defaults, an optional JSON file given with ``--config``, and
command-line flags. The fully resolved configuration is written as
``config.json`` next to the outputs, and can be fed back with ``--config``
to repeat a run. Unknown keys in a config file are rejected.

Subcommands::

    toygen          generate the four toy domains (plus an optional labelled target split)
    bridge-build    check compatibility and write the bridged training manifests
    i2i-train       train the clear -> rain translator
    i2i-translate   translate a manifest with sampled style codes
    uda-train       train the segmentation network (--strategy none|batchwise|wpl)
    eval            evaluate a segmentation checkpoint, optionally plotting training curves

Exit status is 0 on success, 1 for invalid input or configuration, 2 when a
run fails (divergence, I/O).

Toy generator flags: ``--n`` sets the size of every domain, ``--n-source``,
``--n-target``, ``--n-bridge`` set them individually, and ``--n-eval`` adds a
labelled ``target_eval`` manifest drawn from the target distribution but
disjoint from ``target_rain``. The ``toyworld`` config section holds the
rendering parameters (image size, rain and acquisition-setup appearance).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from domainbridge.checkpoint import CheckpointError
from domainbridge.datasets.bridge import BridgeError
from domainbridge.config import ConfigError, from_dict, merge, to_dict
from domainbridge.datasets import (
    DatasetManifest,
    DomainTags,
    ManifestError,
    SampleRecord,
    ToyWorldConfig,
    assemble_bridged_dataset,
    check_bridge_compatibility,
    generate_toy_dataset,
    load_manifest,
    save_manifest,
)
from domainbridge.i2i import I2iTrainConfig, TranslatorSpec, load_translator, train_i2i, translate
from domainbridge.uda import UdaConfig, load_segmentation, run_uda_training

logger = logging.getLogger("domainbridge")

VALIDATION_ERRORS = (ConfigError, ManifestError, BridgeError, CheckpointError, ValueError, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- config plumbing

def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path}: top level must be an object")
    return data


def resolve(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    """Merge defaults, file values and flags; reject keys absent from ``defaults``."""
    unknown = sorted(set(file_cfg) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return merge(merge(defaults, file_cfg), flags)


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join(f"--{k.replace('_', '-')}" for k in missing))


def _echo(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def _preset(name: str, toy: Callable, full: Callable):
    if name not in ("toy", "full"):
        raise ConfigError(f"preset must be 'toy' or 'full', got {name!r}")
    return toy() if name == "toy" else full()


# ---------------------------------------------------------------- subcommands

def toygen_defaults() -> dict:
    return {"out": None, "seed": 0, "n_source": 500, "n_target": 500, "n_bridge": 300, "n_eval": 0,
            "toyworld": to_dict(ToyWorldConfig())}


def cmd_toygen(cfg: dict) -> int:
    _require(cfg, "out")
    cfg["toyworld"]["seed"] = cfg["seed"]
    world = from_dict(ToyWorldConfig, cfg["toyworld"], "toyworld")
    sizes = {"source_clear": cfg["n_source"], "target_rain": cfg["n_target"],
             "bridge_clear": cfg["n_bridge"], "bridge_rain": cfg["n_bridge"]}
    if min(sizes.values()) < 1 or cfg["n_eval"] < 0:
        raise ConfigError("dataset sizes must be positive")
    out = Path(cfg["out"])
    for domain, n in sizes.items():
        extra = cfg["n_eval"] if domain == "target_rain" else 0
        m = generate_toy_dataset(world, n + extra, domain)
        save_manifest(m.subset(range(n), domain), out / f"{domain}.jsonl")
        if extra:
            save_manifest(m.subset(range(n, n + extra), "target_eval"), out / "target_eval.jsonl")
        logger.info("wrote %d %s samples", n, domain)
    _echo(cfg, out)
    return 0


def bridge_defaults() -> dict:
    return {"a": None, "b": None, "c": None, "d": None, "out": None}


def cmd_bridge_build(cfg: dict) -> int:
    _require(cfg, "a", "b", "c", "d", "out")
    A, B, C, D = (load_manifest(cfg[k]) for k in ("a", "b", "c", "d"))
    report = check_bridge_compatibility(A, B, C, D)
    if not report.ok:
        raise BridgeError(report)
    A2, B2 = assemble_bridged_dataset(A, B, C, D)
    out = Path(cfg["out"])
    save_manifest(A2, out / "source_bridged.jsonl")
    save_manifest(B2, out / "target_bridged.jsonl")
    logger.info("A' has %d samples (%d bridge), B' has %d (%d bridge)", len(A2), len(A2) - len(A),
                len(B2), len(B2) - len(B))
    _echo(cfg, out)
    return 0


def i2i_defaults(preset: str) -> dict:
    train = _preset(preset, I2iTrainConfig.toy, I2iTrainConfig)
    return {"a": None, "b": None, "out": None, "seed": 0, "preset": preset,
            "i2i": to_dict(train), "translator": to_dict(TranslatorSpec())}


def cmd_i2i_train(cfg: dict) -> int:
    _require(cfg, "a", "b", "out")
    cfg["i2i"]["seed"] = cfg["seed"]
    train_cfg = from_dict(I2iTrainConfig, cfg["i2i"], "i2i")
    spec = from_dict(TranslatorSpec, cfg["translator"], "translator")
    A, B = load_manifest(cfg["a"]), load_manifest(cfg["b"])
    out = Path(cfg["out"])
    _echo(cfg, out)
    train_i2i(A, B, train_cfg, spec, out_dir=out)
    return 0


def translate_defaults() -> dict:
    return {"translator": None, "manifest": None, "out": None, "style_seed": 0, "n_styles": 1,
            "direction": "a2b"}


def cmd_i2i_translate(cfg: dict) -> int:
    _require(cfg, "translator", "manifest", "out")
    if cfg["n_styles"] < 1:
        raise ConfigError("--n-styles must be at least 1")
    if cfg["direction"] not in ("a2b", "b2a"):
        raise ConfigError("--direction must be a2b or b2a")
    translator = load_translator(cfg["translator"])
    src = load_manifest(cfg["manifest"])
    gen = torch.Generator().manual_seed(cfg["style_seed"])
    weather = "rain" if cfg["direction"] == "a2b" else "clear"
    samples = []
    for s in src.samples:
        x = torch.from_numpy(s.load_image()).permute(2, 0, 1)
        styles = torch.randn(cfg["n_styles"], translator.spec.style_dim, generator=gen)
        label = s.load_label() if s.label_ref is not None or s.label_data is not None else None
        for k, style in enumerate(styles):
            y = translate(x, style, translator, cfg["direction"]).permute(1, 2, 0).numpy()
            stem = Path(s.image_ref).stem
            samples.append(SampleRecord(f"{stem}_style{k}", DomainTags(weather, s.tags.setup, s.tags.origin),
                                        image_data=y, label_data=label))
    out = Path(cfg["out"])
    save_manifest(DatasetManifest("translated", samples, src.class_count, src.class_names),
                  out / "translated.jsonl")
    _echo(cfg, out)
    return 0


def uda_defaults(preset: str) -> dict:
    uda = _preset(preset, UdaConfig.toy, UdaConfig)
    return {"src": None, "tgt": None, "eval": None, "translator": None, "out": None, "seed": 0,
            "preset": preset, "resume": None, "uda": uda.to_dict()}


def cmd_uda_train(cfg: dict) -> int:
    _require(cfg, "src", "tgt", "out")
    cfg["uda"]["seed"] = cfg["seed"]
    uda = from_dict(UdaConfig, cfg["uda"], "uda")
    src, tgt = load_manifest(cfg["src"]), load_manifest(cfg["tgt"])
    ev = load_manifest(cfg["eval"]) if cfg["eval"] else None
    translator = load_translator(cfg["translator"]) if cfg["translator"] else None
    out = Path(cfg["out"])
    _echo(cfg, out)
    res = run_uda_training(src, tgt, translator, uda, eval_set=ev, out_dir=out, resume_from=cfg["resume"])
    if res.report is not None:
        logger.info("final target mIoU %.4f", res.report.miou)
    return 0


def eval_defaults() -> dict:
    return {"model": None, "manifest": None, "out": None, "plot": False, "run_dir": None}


def cmd_eval(cfg: dict) -> int:
    from domainbridge.evaluation import evaluate_model

    _require(cfg, "model", "manifest", "out")
    model, blob = load_segmentation(cfg["model"])
    m = load_manifest(cfg["manifest"], class_count=model.spec.class_count)
    unlabeled = [s.image_ref for s in m.samples if s.label_ref is None and s.label_data is None]
    if unlabeled or not len(m):
        raise ConfigError(f"evaluation manifest needs labels on every sample; missing for {unlabeled[:3]}")
    images, labels = m.load_arrays(with_labels=True)
    names = blob.get("class_names") or m.class_names
    report = evaluate_model(model, images, labels, list(names))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "eval.csv")
    print(f"mIoU {report.miou:.4f} (present classes {report.miou_present:.4f}), "
          f"pixel accuracy {report.pixel_accuracy:.4f}")
    if cfg["plot"]:
        run_dir = Path(cfg["run_dir"]) if cfg["run_dir"] else Path(cfg["model"]).parent
        try:
            plot_curves(run_dir, out)
        except Exception as e:  # plots never decide the exit status
            logger.warning("plotting failed: %s", e)
    _echo(cfg, out)
    return 0


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _column(rows, key):
    xs, ys = [], []
    for i, r in enumerate(rows):
        if r.get(key) not in (None, ""):
            xs.append(i)
            ys.append(float(r[key]))
    return xs, ys


def plot_curves(run_dir: Path, out: Path) -> list[Path]:
    """Write threshold, coverage and loss curves found in ``run_dir`` as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    if (run_dir / "metrics.csv").exists():
        rows = _read_csv(run_dir / "metrics.csv")
        for key, ylabel in (("alpha", "threshold alpha"), ("coverage", "pseudo-label coverage")):
            xs, ys = _column(rows, key)
            fig, ax = plt.subplots(figsize=(5, 3))
            ax.plot(xs, ys, lw=1)
            ax.set_xlabel("step")
            ax.set_ylabel(ylabel)
            fig.tight_layout()
            written.append(out / f"curve_{key}.png")
            fig.savefig(written[-1], dpi=100)
            plt.close(fig)
        fig, ax = plt.subplots(figsize=(5, 3))
        for key in ("l_ce", "l_ss"):
            xs, ys = _column(rows, key)
            ax.plot(xs, ys, lw=1, label=key)
        ax.set_xlabel("step")
        ax.legend()
        fig.tight_layout()
        written.append(out / "curve_losses.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)
    if (run_dir / "losses.csv").exists():
        series: dict[str, tuple[list, list]] = {}
        for r in _read_csv(run_dir / "losses.csv"):
            xs, ys = series.setdefault(r["loss_name"], ([], []))
            xs.append(int(r["iteration"]))
            ys.append(float(r["value"]))
        fig, ax = plt.subplots(figsize=(5, 3))
        for name, (xs, ys) in series.items():
            ax.plot(xs, ys, lw=1, label=name)
        ax.set_xlabel("iteration")
        ax.set_yscale("log")
        ax.legend(fontsize=6)
        fig.tight_layout()
        written.append(out / "curve_i2i_losses.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)
    if not written:
        logger.warning("no metrics.csv or losses.csv in %s; nothing to plot", run_dir)
    return written


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="domainbridge", description="Bridged domain adaptation experiments.")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON file with settings (flags override it)")
        sp.add_argument("--out", help="output directory")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("toygen", help="generate the toy domains")
    common(sp)
    sp.add_argument("--n", type=int, help="samples per domain")
    for d in ("source", "target", "bridge", "eval"):
        sp.add_argument(f"--n-{d}", type=int)

    sp = sub.add_parser("bridge-build", help="assemble bridged training manifests")
    common(sp, seed=False)
    for k, what in (("a", "source (clear)"), ("b", "target (rain)"), ("c", "clear bridge"), ("d", "rain bridge")):
        sp.add_argument(f"--{k}", help=f"{what} manifest")

    sp = sub.add_parser("i2i-train", help="train the translator")
    common(sp)
    sp.add_argument("--a", help="clear manifest")
    sp.add_argument("--b", help="rain manifest")
    sp.add_argument("--preset", choices=("toy", "full"))
    sp.add_argument("--iters", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--crop", type=int, nargs=2, metavar=("H", "W"))
    sp.add_argument("--lr", type=float)

    sp = sub.add_parser("i2i-translate", help="translate a manifest")
    common(sp, seed=False)
    sp.add_argument("--translator", help="translator checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--style-seed", type=int)
    sp.add_argument("--n-styles", type=int)
    sp.add_argument("--direction", choices=("a2b", "b2a"))

    sp = sub.add_parser("uda-train", help="train the segmentation network")
    common(sp)
    sp.add_argument("--src", help="labelled source manifest")
    sp.add_argument("--tgt", help="unlabelled target manifest")
    sp.add_argument("--eval", help="labelled target manifest for periodic evaluation")
    sp.add_argument("--translator", help="translator checkpoint (omit to train on raw source)")
    sp.add_argument("--preset", choices=("toy", "full"))
    sp.add_argument("--strategy", choices=("none", "batchwise", "wpl"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--refine-epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--checkpoint-every", type=int)
    sp.add_argument("--resume", help="train-state checkpoint to continue from")

    sp = sub.add_parser("eval", help="evaluate a segmentation checkpoint")
    common(sp, seed=False)
    sp.add_argument("--model", help="segmentation checkpoint")
    sp.add_argument("--manifest", help="labelled manifest")
    sp.add_argument("--plot", action="store_true", default=None, help="also plot training curves")
    sp.add_argument("--run-dir", help="directory holding metrics.csv/losses.csv (default: the model's)")
    return p


def _flags(args: argparse.Namespace) -> dict:
    skip = {"command", "quiet", "config"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _configure(args: argparse.Namespace) -> tuple[Callable[[dict], int], dict]:
    file_cfg = _read_config(args.config)
    flags = _flags(args)
    cmd = args.command
    if cmd == "toygen":
        n = flags.pop("n")
        for d in ("source", "target", "bridge"):
            if flags[f"n_{d}"] is None:
                flags[f"n_{d}"] = n
        return cmd_toygen, resolve(toygen_defaults(), file_cfg, flags)
    if cmd == "bridge-build":
        return cmd_bridge_build, resolve(bridge_defaults(), file_cfg, flags)
    if cmd == "i2i-train":
        preset = flags["preset"] or file_cfg.get("preset", "toy")
        section = {"iterations": flags.pop("iters"), "batch_size": flags.pop("batch_size"),
                   "crop": flags.pop("crop"), "lr": flags.pop("lr")}
        flags["i2i"] = section
        return cmd_i2i_train, resolve(i2i_defaults(preset), file_cfg, flags)
    if cmd == "i2i-translate":
        return cmd_i2i_translate, resolve(translate_defaults(), file_cfg, flags)
    if cmd == "uda-train":
        preset = flags["preset"] or file_cfg.get("preset", "toy")
        flags["uda"] = {k: flags.pop(k) for k in ("strategy", "epochs", "refine_epochs", "batch_size",
                                                   "checkpoint_every")}
        return cmd_uda_train, resolve(uda_defaults(preset), file_cfg, flags)
    return cmd_eval, resolve(eval_defaults(), file_cfg, flags)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run, cfg = _configure(args)
        if "seed" in cfg:
            torch.manual_seed(cfg["seed"])
            np.random.seed(cfg["seed"] % 2 ** 32)
        return run(cfg)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # training divergence, I/O failures
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
