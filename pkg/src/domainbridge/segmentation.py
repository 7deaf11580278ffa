"""Small encoder-decoder segmentation network and supervised loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from domainbridge import IGNORE_INDEX
from domainbridge.wpl import LOG_EPS

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegModelSpec:
    class_count: int = 4
    widths: tuple[int, ...] = (16, 32, 64)
    decoder_width: int = 32

    def to_dict(self) -> dict:
        return {"class_count": self.class_count, "widths": list(self.widths),
                "decoder_width": self.decoder_width}

    @classmethod
    def from_dict(cls, d: dict) -> SegModelSpec:
        return cls(int(d["class_count"]), tuple(d["widths"]), int(d["decoder_width"]))


def _block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SegNet(nn.Module):
    """Three-stage encoder with a light decoder fusing every stage by skip connections."""

    def __init__(self, spec: SegModelSpec):
        super().__init__()
        self.spec = spec
        w = spec.widths
        stages, cin = [], 3
        for i, cout in enumerate(w):
            stages.append(_block(cin, cout, stride=1 if i == 0 else 2))
            cin = cout
        self.encoder = nn.ModuleList(stages)
        d = spec.decoder_width
        self.decoder = nn.ModuleDict({
            "lateral": nn.ModuleList([nn.Conv2d(c, d, 1) for c in w]),
            "fuse": nn.Sequential(nn.Conv2d(d, d, 3, padding=1, bias=False), nn.BatchNorm2d(d),
                                  nn.ReLU(inplace=True)),
            "head": nn.Conv2d(d, spec.class_count, 1),
        })

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Images (N, 3, H, W) in [0, 1] -> logits (N, Q, H, W)."""
        feats = []
        h = x * 2.0 - 1.0
        for stage in self.encoder:
            h = stage(h)
            feats.append(h)
        lateral = self.decoder["lateral"]
        y = lateral[-1](feats[-1])
        for i in range(len(feats) - 2, -1, -1):
            y = F.interpolate(y, size=feats[i].shape[-2:], mode="bilinear", align_corners=False)
            y = y + lateral[i](feats[i])
        y = self.decoder["fuse"](y)
        logits = self.decoder["head"](y)
        if logits.shape[-2:] != x.shape[-2:]:
            logits = F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return logits

    def param_groups(self, lr_encoder: float, lr_decoder: float) -> list[dict]:
        return [
            {"params": list(self.encoder.parameters()), "lr": lr_encoder, "name": "encoder"},
            {"params": list(self.decoder.parameters()), "lr": lr_decoder, "name": "decoder"},
        ]


def predict_probs(model: SegNet, x: torch.Tensor) -> torch.Tensor:
    """Softmax class probabilities (N, Q, H, W), evaluated in inference mode."""
    if x.dim() == 3:
        return predict_probs(model, x[None])[0]
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected images of shape (N, 3, H, W), got {tuple(x.shape)}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        p = torch.softmax(model(x), dim=1)
    model.train(was_training)
    return p


def supervised_ce(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean ``-log p[y]`` over pixels whose label is not the ignore index.

    ``p`` is (N, Q, H, W) or (Q, H, W) probabilities, ``y`` the matching labels.
    """
    if p.shape[:-3] + p.shape[-2:] != y.shape:
        raise ValueError(f"probability shape {tuple(p.shape)} does not match labels {tuple(y.shape)}")
    valid = y != IGNORE_INDEX
    if not valid.any():
        logger.warning("every pixel is ignored; supervised loss is 0")
        return p.sum() * 0.0
    target = torch.where(valid, y.long(), torch.zeros_like(y, dtype=torch.long))
    picked = p.gather(-3, target.unsqueeze(-3)).squeeze(-3)
    nll = -torch.log(picked.clamp_min(LOG_EPS))
    return nll[valid].mean()


def supervised_ce_logits(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Same loss from logits, via log-softmax (the numerically stable path used in training)."""
    valid = y != IGNORE_INDEX
    if not valid.any():
        logger.warning("every pixel is ignored; supervised loss is 0")
        return logits.sum() * 0.0
    return F.cross_entropy(logits, y.long(), ignore_index=IGNORE_INDEX)


def build_model(spec: SegModelSpec, seed: int | None = None) -> SegNet:
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return SegNet(spec)
    return SegNet(spec)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

