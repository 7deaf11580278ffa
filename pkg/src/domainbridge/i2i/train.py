"""Bidirectional adversarial training of the translator."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from domainbridge.datasets.records import DatasetManifest
from domainbridge.i2i.translator import Translator, TranslatorSpec, save_translator

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, snapshot: Path | None = None):
        self.snapshot = snapshot
        if snapshot is not None:
            message += f" (snapshot written to {snapshot})"
        super().__init__(message)


@dataclass(frozen=True)
class LossWeights:
    adversarial: float = 1.0
    image: float = 10.0
    style: float = 1.0
    content: float = 1.0


@dataclass(frozen=True)
class I2iTrainConfig:
    iterations: int = 200_000
    batch_size: int = 1
    crop: tuple[int, int] = (480, 480)
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @classmethod
    def toy(cls, **overrides) -> I2iTrainConfig:
        base = dict(iterations=5000, crop=(64, 64))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop"] = list(self.crop)
        return d


LOSS_NAMES = ("dis", "gen_adv", "recon_image", "recon_style", "recon_content", "gen_total")


def _lsgan(preds: list[torch.Tensor], target: float) -> torch.Tensor:
    return sum(torch.mean((p - target) ** 2) for p in preds)


def _batch(images: np.ndarray, rng: np.random.Generator, n: int, crop: tuple[int, int]) -> torch.Tensor:
    idx = rng.integers(0, len(images), size=n)
    out = []
    for i in idx:
        img = images[i]
        h, w = img.shape[:2]
        ch, cw = min(crop[0], h), min(crop[1], w)
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        img = img[top:top + ch, left:left + cw]
        if rng.random() < 0.5:
            img = img[:, ::-1]
        out.append(np.ascontiguousarray(img))
    return torch.from_numpy(np.stack(out)).permute(0, 3, 1, 2).contiguous()


def build_translator(spec: TranslatorSpec | None = None, seed: int = 0) -> Translator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Translator(spec)


def train_i2i(A: DatasetManifest, B: DatasetManifest, cfg: I2iTrainConfig,
              spec: TranslatorSpec | None = None, out_dir: str | os.PathLike | None = None,
              translator: Translator | None = None) -> tuple[Translator, list[tuple[int, str, float]]]:
    """Train a clear (A) <-> rain (B) translator.

    Each iteration updates the two discriminators with a least-squares
    objective, then both generators with adversarial, within-domain image
    reconstruction and cross-domain style/content reconstruction losses.
    Returns the translator and the loss history ``(iteration, name, value)``;
    with ``out_dir`` the checkpoint and ``losses.csv`` are written there.
    """
    if not len(A) or not len(B):
        raise ValueError("both training sets must be non-empty")
    if translator is None:
        translator = build_translator(spec, cfg.seed)
    spec = translator.spec
    imgs_a, _ = A.load_arrays(with_labels=False)
    imgs_b, _ = B.load_arrays(with_labels=False)
    rng = np.random.default_rng([cfg.seed, 1])
    style_gen = torch.Generator().manual_seed(cfg.seed + 7919)
    opt_g = torch.optim.Adam(translator.generator_parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(translator.discriminator_parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    wts = cfg.weights
    ga, gb, da, db = translator.gen_a, translator.gen_b, translator.dis_a, translator.dis_b
    history: list[tuple[int, str, float]] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    translator.train()

    for it in range(cfg.iterations):
        x_a = _batch(imgs_a, rng, cfg.batch_size, cfg.crop)
        x_b = _batch(imgs_b, rng, cfg.batch_size, cfg.crop)
        n = x_a.shape[0]

        s_a = torch.randn(n, spec.style_dim, generator=style_gen)
        s_b = torch.randn(n, spec.style_dim, generator=style_gen)
        with torch.no_grad():
            c_a, _ = ga.encode(x_a)
            c_b, _ = gb.encode(x_b)
            x_ba = ga.decode(c_b, s_a)
            x_ab = gb.decode(c_a, s_b)
        loss_d = wts.adversarial * (_lsgan(da(x_a), 1.0) + _lsgan(da(x_ba), 0.0)
                                    + _lsgan(db(x_b), 1.0) + _lsgan(db(x_ab), 0.0))
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()

        s_a = torch.randn(n, spec.style_dim, generator=style_gen)
        s_b = torch.randn(n, spec.style_dim, generator=style_gen)
        c_a, s_a_own = ga.encode(x_a)
        c_b, s_b_own = gb.encode(x_b)
        rec_img = F.l1_loss(ga.decode(c_a, s_a_own), x_a) + F.l1_loss(gb.decode(c_b, s_b_own), x_b)
        x_ba = ga.decode(c_b, s_a)
        x_ab = gb.decode(c_a, s_b)
        c_b_rec, s_a_rec = ga.encode(x_ba)
        c_a_rec, s_b_rec = gb.encode(x_ab)
        rec_style = F.l1_loss(s_a_rec, s_a) + F.l1_loss(s_b_rec, s_b)
        rec_content = F.l1_loss(c_a_rec, c_a) + F.l1_loss(c_b_rec, c_b)
        adv = _lsgan(da(x_ba), 1.0) + _lsgan(db(x_ab), 1.0)
        loss_g = (wts.adversarial * adv + wts.image * rec_img + wts.style * rec_style
                  + wts.content * rec_content)
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        opt_g.step()

        values = (loss_d, adv, rec_img, rec_style, rec_content, loss_g)
        vals = [float(v.detach()) for v in values]
        if not all(math.isfinite(v) for v in vals):
            snap = None
            if out_dir is not None:
                snap = out_dir / "diverged_translator.pt"
                save_translator(translator, snap, iteration=it)
            raise TrainingDiverged(f"non-finite translator loss at iteration {it}: "
                                   + ", ".join(f"{k}={v}" for k, v in zip(LOSS_NAMES, vals)), snap)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            history.extend((it, name, v) for name, v in zip(LOSS_NAMES, vals))
        if it % 500 == 0:
            logger.info("i2i iteration %d: gen %.4f dis %.4f", it, vals[-1], vals[0])

    translator.eval()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_translator(translator, out_dir / "translator.pt", train_config=cfg.to_dict())
        write_loss_csv(history, out_dir / "losses.csv")
    return translator, history


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss_name", "value"])
        for it, name, v in history:
            w.writerow([it, name, f"{v:.8g}"])
