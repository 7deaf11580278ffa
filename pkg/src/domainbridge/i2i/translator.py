"""Multimodal clear -> rain translator with disentangled content and style."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from domainbridge.checkpoint import load_checkpoint, save_checkpoint
from domainbridge.i2i.networks import ContentEncoder, Decoder, Discriminator, StyleEncoder


@dataclass(frozen=True)
class TranslatorSpec:
    base_channels: int = 16
    n_down: int = 2
    n_res: int = 2
    style_dim: int = 8
    mlp_dim: int = 64
    disc_channels: int = 16
    disc_layers: int = 3
    disc_scales: int = 3
    shared_content: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> TranslatorSpec:
        return cls(**d)


class DomainBranch(nn.Module):
    """Content encoder, style encoder and decoder of one image domain."""

    def __init__(self, spec: TranslatorSpec, content: ContentEncoder | None = None):
        super().__init__()
        self.content = content or ContentEncoder(spec.base_channels, spec.n_down, spec.n_res)
        self.style = StyleEncoder(spec.base_channels, spec.n_down, spec.style_dim)
        self.decoder = Decoder(self.content.out_channels, spec.n_down, spec.n_res,
                               spec.style_dim, spec.mlp_dim)

    def encode(self, x):
        h = x * 2.0 - 1.0
        return self.content(h), self.style(h)

    def decode(self, content, style):
        return self.decoder(content, style)


class Translator(nn.Module):
    """Two domain branches ("a" = clear, "b" = rain) and one discriminator each.

    With ``spec.shared_content`` both branches use one content encoder, so
    content codes of the two domains live in a common space and each decoder,
    trained to reconstruct its own domain, keeps object colours when fed codes
    from the other domain.
    """

    def __init__(self, spec: TranslatorSpec | None = None):
        super().__init__()
        self.spec = spec or TranslatorSpec()
        self.gen_a = DomainBranch(self.spec)
        self.gen_b = DomainBranch(self.spec, self.gen_a.content if self.spec.shared_content else None)
        self.dis_a = Discriminator(self.spec.disc_channels, self.spec.disc_layers, self.spec.disc_scales)
        self.dis_b = Discriminator(self.spec.disc_channels, self.spec.disc_layers, self.spec.disc_scales)

    @property
    def multiple(self) -> int:
        return 2 ** self.spec.n_down

    def generator_parameters(self):
        # ModuleList.parameters() yields a shared encoder once
        return list(nn.ModuleList([self.gen_a, self.gen_b]).parameters())

    def discriminator_parameters(self):
        return list(nn.ModuleList([self.dis_a, self.dis_b]).parameters())

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        return translate(x, style, self)


def sample_style(dim: int, generator: torch.Generator | None = None, n: int | None = None,
                 ) -> torch.Tensor:
    """Draw style codes from the standard normal prior: shape ``(dim,)`` or ``(n, dim)``."""
    if dim < 1:
        raise ValueError("style dimension must be at least 1")
    shape = (dim,) if n is None else (n, dim)
    return torch.randn(shape, generator=generator)


def _pad_to_multiple(x: torch.Tensor, m: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, (h, w)


def translate(image: torch.Tensor, style: torch.Tensor, translator: Translator,
              direction: str = "a2b") -> torch.Tensor:
    """Render the content of ``image`` with ``style`` in the other domain.

    ``image`` is (3, H, W) or (N, 3, H, W) in [0, 1]; ``style`` is (s,) or
    (N, s). The output has the input's shape, clamped to [0, 1].
    """
    single = image.dim() == 3
    x = image[None] if single else image
    s = style[None] if style.dim() == 1 else style
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) images, got {tuple(image.shape)}")
    if s.shape[-1] != translator.spec.style_dim:
        raise ValueError(f"style dimension {s.shape[-1]} != translator's {translator.spec.style_dim}")
    if s.shape[0] == 1 and x.shape[0] > 1:
        s = s.expand(x.shape[0], -1)
    if s.shape[0] != x.shape[0]:
        raise ValueError("one style code per image (or a single shared code) is required")
    src, dst = (translator.gen_a, translator.gen_b) if direction == "a2b" else (translator.gen_b, translator.gen_a)
    xp, (h, w) = _pad_to_multiple(x, translator.multiple)
    was_training = translator.training
    translator.eval()
    with torch.no_grad():
        content, _ = src.encode(xp)
        out = dst.decode(content, s)[..., :h, :w].clamp(0.0, 1.0)
    translator.train(was_training)
    return out[0] if single else out


def save_translator(translator: Translator, path, **extra) -> None:
    save_checkpoint(path, "translator", translator.spec.to_dict(), translator.state_dict(), **extra)


def load_translator(path) -> Translator:
    blob = load_checkpoint(path, "translator")
    t = Translator(TranslatorSpec.from_dict(blob["spec"]))
    t.load_state_dict(blob["state"])
    t.eval()
    return t


class IdentityTranslator(nn.Module):
    """Stand-in translator returning its input unchanged."""

    spec = TranslatorSpec()

    def forward(self, x, style):
        return x


def apply_translator(translator: nn.Module, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
    if isinstance(translator, Translator):
        return translate(x, style, translator)
    with torch.no_grad():
        return translator(x, style)
