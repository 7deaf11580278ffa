"""Adaptation loop: supervised learning on source or translated images plus
gated self-supervision on unlabelled target images.

Every random draw of a step (source augmentation, target batch, the two
path-gating variables, style codes) comes from generators keyed on
``(seed, iteration)``. A run is therefore reproducible, resumable from any
epoch checkpoint, and two runs that differ only in the self-supervision
strategy see identical data until their losses first differ.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

from domainbridge.checkpoint import load_checkpoint, save_checkpoint
from domainbridge.datasets.augment import augment_pair
from domainbridge.datasets.records import DatasetManifest
from domainbridge.evaluation import EvalReport, evaluate_model
from domainbridge.i2i.translator import apply_translator
from domainbridge.segmentation import SegModelSpec, SegNet, build_model, supervised_ce_logits
from domainbridge.wpl import (
    PseudoLabelState,
    ThresholdParam,
    WplLossConfig,
    batchwise_pseudo_label,
    weighted_ce,
    wpl_loss,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("none", "batchwise", "wpl")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class PathPolicy:
    p_tp: float = 0.75
    p_translate: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.p_tp <= 1.0 and 0.0 <= self.p_translate <= 1.0):
            raise ValueError("path probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class UdaConfig:
    epochs: int = 100
    refine_epochs: int = 70
    crop: tuple[int, int] = (512, 512)
    input_size: tuple[int, int] = (512, 1024)
    batch_size: int = 6
    momentum: float = 0.9
    lr_encoder: float = 1e-4
    lr_decoder: float = 1e-3
    lr_step_epochs: int = 33
    lr_gamma: float = 0.5
    refine_lr_factor: float = 0.1
    scale_range: tuple[float, float] = (0.5, 2.0)
    strategy: str = "wpl"
    batchwise_weight: float = 1.0
    wpl: WplLossConfig = field(default_factory=WplLossConfig)
    path: PathPolicy = field(default_factory=PathPolicy)
    model: SegModelSpec = field(default_factory=SegModelSpec)
    seed: int = 0
    eval_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.refine_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if min(self.lr_encoder, self.lr_decoder) <= 0:
            raise ValueError("learning rates must be positive")
        if self.crop[0] > self.input_size[0] or self.crop[1] > self.input_size[1]:
            raise ValueError("crop must fit inside the input size")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.batch_size < 1 or self.lr_step_epochs < 1:
            raise ValueError("batch_size and lr_step_epochs must be positive")

    @classmethod
    def toy(cls, **overrides) -> UdaConfig:
        base: dict[str, Any] = dict(
            epochs=12, refine_epochs=6, crop=(64, 64), input_size=(64, 64),
            lr_encoder=0.01, lr_decoder=0.1, lr_step_epochs=5,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def total_epochs(self) -> int:
        return self.epochs + self.refine_epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return _listify(d)

    @classmethod
    def from_dict(cls, d: dict) -> UdaConfig:
        d = dict(d)
        d["wpl"] = WplLossConfig(**d.get("wpl", {}))
        d["path"] = PathPolicy(**d.get("path", {}))
        d["model"] = SegModelSpec.from_dict(d["model"]) if "model" in d else SegModelSpec()
        for k in ("crop", "input_size", "scale_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_listify(v) for v in obj]
    return obj


def lr_schedule(epoch: int, cfg: UdaConfig) -> tuple[float, float]:
    """(encoder, decoder) learning rates for a global epoch index.

    Main phase: step decay by ``lr_gamma`` every ``lr_step_epochs``.
    Refinement (epoch >= cfg.epochs): constant ``refine_lr_factor`` times the base rates.
    """
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if epoch >= cfg.epochs:
        f = cfg.refine_lr_factor
    else:
        f = cfg.lr_gamma ** (epoch // cfg.lr_step_epochs)
    return cfg.lr_encoder * f, cfg.lr_decoder * f


def step_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def gate_draws(seed: int, iteration: int) -> tuple[float, float]:
    """(u_translate, p_pl) for one step, both ~ U(0, 1)."""
    u = step_rng(seed, 3, iteration).random(2)
    return float(u[0]), float(u[1])


def fires_self_supervision(p_pl: float, policy: PathPolicy) -> bool:
    """The self-supervised term joins a step iff its draw exceeds ``p_tp``."""
    return p_pl > policy.p_tp


def style_generator(seed: int, iteration: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(step_rng(seed, 5, iteration).integers(0, 2 ** 62)))


@dataclass
class StepResult:
    translated: bool
    ss_fired: bool
    l_ce: float
    l_w: float | None = None
    l_b: float | None = None
    l_ss: float | None = None
    alpha: float = float("nan")
    coverage: float | None = None
    total: float = float("nan")


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).contiguous()


def _stack_states(states: list[PseudoLabelState]) -> PseudoLabelState:
    return PseudoLabelState(torch.stack([s.classes for s in states]),
                            torch.stack([s.included for s in states]),
                            torch.stack([s.weights for s in states]))


def uda_step(model: SegNet, optimizer: torch.optim.Optimizer, theta: ThresholdParam,
             theta_optimizer: torch.optim.Optimizer, src_x: torch.Tensor, src_y: torch.Tensor,
             tgt_x: torch.Tensor | None, cfg: UdaConfig, translator=None, self_supervision: bool = True,
             u_translate: float = 1.0, p_pl: float = 0.0,
             styles: torch.Generator | None = None) -> StepResult:
    """One optimisation step of the adaptation loss.

    The supervised term uses translated source images (one fresh style code
    per image) when ``u_translate < p_translate`` and a translator is given,
    raw source images otherwise. The self-supervised term on ``tgt_x`` is
    added only when ``self_supervision`` is on and ``p_pl > p_tp``; only then
    does the threshold parameter take a step.
    """
    model.train()
    translated = translator is not None and u_translate < cfg.path.p_translate
    x = src_x
    if translated:
        codes = torch.randn(src_x.shape[0], translator.spec.style_dim, generator=styles)
        x = apply_translator(translator, src_x, codes)
    logits = model(x)
    l_ce = supervised_ce_logits(logits, src_y)
    total = l_ce
    fired = (self_supervision and cfg.strategy != "none" and tgt_x is not None
             and fires_self_supervision(p_pl, cfg.path))
    res = StepResult(translated, fired, 0.0, alpha=float(theta.alpha.detach()))
    if fired:
        p_t = torch.softmax(model(tgt_x), dim=1)
        if cfg.strategy == "wpl":
            out = wpl_loss(p_t, theta, cfg.wpl)
            total = total + out.loss
            res.l_w, res.l_b, res.l_ss = float(out.l_w.detach()), float(out.l_b.detach()), float(out.loss.detach())
            res.coverage = out.state.coverage
        else:
            state = _stack_states(batchwise_pseudo_label(p_t))
            l_pl = weighted_ce(p_t, state)
            total = total + cfg.batchwise_weight * l_pl
            res.l_w = res.l_ss = float(l_pl.detach())
            res.coverage = state.coverage
    if not torch.isfinite(total):
        raise TrainingDiverged(f"non-finite loss (L_ce={float(l_ce.detach())}, L_ss={res.l_ss})")
    optimizer.zero_grad(set_to_none=True)
    theta_optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    if fired and cfg.strategy == "wpl":
        theta_optimizer.step()
    res.l_ce = float(l_ce.detach())
    res.total = float(total.detach())
    res.alpha = float(theta.alpha.detach())
    return res


STEP_FIELDS = ("epoch", "step", "phase", "translated", "ss_fired", "l_ce", "l_w", "l_b", "l_ss",
               "alpha", "coverage", "miou")


@dataclass
class UdaResult:
    model: SegNet
    theta: ThresholdParam
    steps: list[dict]
    epochs: list[dict]
    report: EvalReport | None
    out_dir: Path | None = None

    def coverages(self) -> list[float]:
        return [r["coverage"] for r in self.steps if r["coverage"] is not None]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


def write_rows(rows: list[dict], fields, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in fields])


def _load_images(manifest: DatasetManifest, size: tuple[int, int], labels: bool):
    images, lbls = manifest.load_arrays(with_labels=labels)
    if images.shape[1:3] != tuple(size):
        t = F.interpolate(_to_tensor(images), size=size, mode="bilinear", align_corners=False)
        images = t.permute(0, 2, 3, 1).numpy()
        if lbls is not None:
            lt = F.interpolate(torch.from_numpy(lbls)[:, None].float(), size=size, mode="nearest")
            lbls = lt[:, 0].to(torch.uint8).numpy()
    return images, lbls


def _augment_batch(images, labels, idx, rng, cfg):
    xs, ys = [], []
    for i in idx:
        x, y = augment_pair(images[i], None if labels is None else labels[i], rng, cfg.crop, cfg.scale_range)
        xs.append(x)
        ys.append(y)
    x = _to_tensor(np.stack(xs))
    y = torch.from_numpy(np.stack(ys)).long() if labels is not None else None
    return x, y


def _set_lr(optimizer, lrs):
    for group, lr in zip(optimizer.param_groups, lrs):
        group["lr"] = lr


def run_uda_training(src: DatasetManifest, tgt: DatasetManifest, translator, cfg: UdaConfig,
                     eval_set: DatasetManifest | None = None, out_dir: str | os.PathLike | None = None,
                     resume_from: str | os.PathLike | None = None, init_state: dict | None = None,
                     stop_after_epoch: int | None = None) -> UdaResult:
    """Train the segmentation network: main phase, then refinement with self-supervision.

    Self-supervision (per ``cfg.strategy``) is active only during the
    ``refine_epochs`` that follow the ``epochs`` of the main phase. Target
    labels are never read. With ``eval_set`` the model is evaluated every
    ``eval_every`` epochs and after the last one.
    """
    if not len(src) or not len(tgt):
        raise ValueError("source and target sets must be non-empty")
    src_x, src_y = _load_images(src, cfg.input_size, labels=True)
    tgt_x, _ = _load_images(tgt, cfg.input_size, labels=False)
    if eval_set is not None:
        ev_x, ev_y = _load_images(eval_set, cfg.input_size, labels=True)
    class_names = src.class_names

    model = build_model(cfg.model, seed=cfg.seed)
    if init_state is not None:
        model.load_state_dict(init_state)
    theta = ThresholdParam(cfg.wpl.alpha_init)
    optimizer = torch.optim.SGD(model.param_groups(*lr_schedule(0, cfg)), momentum=cfg.momentum)
    theta_opt = theta.make_optimizer(cfg.wpl)
    steps: list[dict] = []
    epochs: list[dict] = []
    start_epoch, iteration = 0, 0
    if resume_from is not None:
        blob = load_checkpoint(resume_from, "train_state")
        model.load_state_dict(blob["state"]["model"])
        optimizer.load_state_dict(blob["state"]["optimizer"])
        theta.load_state_dict(blob["state"]["theta"])
        theta_opt.load_state_dict(blob["state"]["theta_optimizer"])
        start_epoch, iteration = blob["epoch"], blob["iteration"]
        steps, epochs = blob["steps"], blob["epochs"]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    n_src, n_tgt, bs = len(src_x), len(tgt_x), cfg.batch_size
    report = None
    for epoch in range(start_epoch, cfg.total_epochs):
        refine = epoch >= cfg.epochs
        _set_lr(optimizer, lr_schedule(epoch, cfg))
        order = step_rng(cfg.seed, 1, epoch).permutation(n_src)
        epoch_rows = []
        for b in range(0, n_src, bs):
            idx = order[b:b + bs]
            x, y = _augment_batch(src_x, src_y, idx, step_rng(cfg.seed, 4, iteration), cfg)
            t_rng = step_rng(cfg.seed, 2, iteration)
            u_tr, p_pl = gate_draws(cfg.seed, iteration)
            tx = None
            if refine and cfg.strategy != "none" and fires_self_supervision(p_pl, cfg.path):
                t_idx = t_rng.integers(0, n_tgt, size=bs)
                tx, _ = _augment_batch(tgt_x, None, t_idx, t_rng, cfg)
            try:
                r = uda_step(model, optimizer, theta, theta_opt, x, y, tx, cfg, translator,
                             self_supervision=refine, u_translate=u_tr, p_pl=p_pl,
                             styles=style_generator(cfg.seed, iteration))
            except FloatingPointError as e:
                if out is not None:
                    _save_state(out / "diverged_state.pt", cfg, model, optimizer, theta, theta_opt,
                                epoch, iteration, steps, epochs)
                raise TrainingDiverged(f"epoch {epoch} iteration {iteration}: {e}") from e
            row = {"epoch": epoch, "step": iteration, "phase": "refine" if refine else "main",
                   "translated": r.translated, "ss_fired": r.ss_fired, "l_ce": r.l_ce, "l_w": r.l_w,
                   "l_b": r.l_b, "l_ss": r.l_ss, "alpha": r.alpha, "coverage": r.coverage, "miou": None}
            steps.append(row)
            epoch_rows.append(row)
            iteration += 1

        last = epoch == cfg.total_epochs - 1
        erow: dict[str, Any] = {
            "epoch": epoch, "phase": "refine" if refine else "main",
            "lr_encoder": optimizer.param_groups[0]["lr"], "lr_decoder": optimizer.param_groups[1]["lr"],
            "l_ce": float(np.mean([r["l_ce"] for r in epoch_rows])) if epoch_rows else None,
            "alpha": float(theta.alpha.detach()),
        }
        covs = [r["coverage"] for r in epoch_rows if r["coverage"] is not None]
        erow["coverage"] = float(np.mean(covs)) if covs else None
        if eval_set is not None and ((epoch + 1) % cfg.eval_every == 0 or last):
            report = evaluate_model(model, ev_x, ev_y, class_names)
            erow["miou"] = report.miou
            erow.update({f"iou_{n}": (None if np.isnan(v) else float(v))
                         for n, v in zip(class_names, report.iou)})
            if epoch_rows:
                epoch_rows[-1]["miou"] = report.miou
            logger.info("epoch %d (%s): mIoU %.4f alpha %.4f", epoch, erow["phase"], report.miou, erow["alpha"])
        epochs.append(erow)

        if out is not None:
            _write_logs(out, steps, epochs, class_names)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                _save_state(out / f"state_epoch{epoch + 1:03d}.pt", cfg, model, optimizer, theta,
                            theta_opt, epoch + 1, iteration, steps, epochs)
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break

    if out is not None:
        _write_logs(out, steps, epochs, class_names)
        save_checkpoint(out / "model.pt", "segmentation", cfg.model.to_dict(), model.state_dict(),
                        alpha=float(theta.alpha.detach()), class_names=list(class_names))
        if report is not None:
            report.write_csv(out / "eval.csv")
    return UdaResult(model, theta, steps, epochs, report, out)


def _write_logs(out: Path, steps, epochs, class_names) -> None:
    write_rows(steps, STEP_FIELDS, out / "metrics.csv")
    efields = ["epoch", "phase", "lr_encoder", "lr_decoder", "l_ce", "alpha", "coverage", "miou"]
    efields += [f"iou_{n}" for n in class_names]
    write_rows(epochs, efields, out / "epochs.csv")


def _save_state(path, cfg, model, optimizer, theta, theta_opt, epoch, iteration, steps, epochs):
    state = {"model": model.state_dict(), "optimizer": optimizer.state_dict(),
             "theta": theta.state_dict(), "theta_optimizer": theta_opt.state_dict()}
    save_checkpoint(path, "train_state", cfg.model.to_dict(), state, epoch=epoch, iteration=iteration,
                    steps=steps, epochs=epochs, config=cfg.to_dict())


def run_baseline(strategy: str, src: DatasetManifest, tgt: DatasetManifest, translator, cfg: UdaConfig,
                 **kwargs) -> UdaResult:
    """Same harness with the self-supervision strategy swapped."""
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    return run_uda_training(src, tgt, translator, replace(cfg, strategy=strategy), **kwargs)


def load_segmentation(path) -> tuple[SegNet, dict]:
    blob = load_checkpoint(path, "segmentation")
    model = SegNet(SegModelSpec.from_dict(blob["spec"]))
    model.load_state_dict(blob["state"])
    model.eval()
    return model, blob


def coverage_expansion(coverages: list[float], frac: float = 0.1) -> tuple[float, float]:
    """Mean coverage over the first and last ``frac`` of the recorded steps."""
    n = len(coverages)
    if n == 0:
        return math.nan, math.nan
    k = max(1, int(round(frac * n)))
    return float(np.mean(coverages[:k])), float(np.mean(coverages[-k:]))
