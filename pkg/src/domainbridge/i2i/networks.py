"""Building blocks of the style/content translator and its discriminator."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class AdaIN(nn.Module):
    """Instance norm whose per-channel scale/shift come from a style code."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels

    def forward(self, x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
        h = F.instance_norm(x, eps=1e-5)
        return h * (1.0 + gamma[:, :, None, None]) + beta[:, :, None, None]


class ResBlock(nn.Module):
    def __init__(self, channels: int, adain: bool = False):
        super().__init__()
        self.adain = adain
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        if adain:
            self.norm1, self.norm2 = AdaIN(channels), AdaIN(channels)
        else:
            self.norm1 = nn.InstanceNorm2d(channels)
            self.norm2 = nn.InstanceNorm2d(channels)

    def forward(self, x, style_params: list[torch.Tensor] | None = None):
        if self.adain:
            g1, b1, g2, b2 = style_params
            h = F.relu(self.norm1(self.conv1(x), g1, b1))
            return x + self.norm2(self.conv2(h), g2, b2)
        h = F.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class ContentEncoder(nn.Module):
    def __init__(self, base: int, n_down: int, n_res: int):
        super().__init__()
        layers = [nn.Conv2d(3, base, 5, padding=2), nn.InstanceNorm2d(base), nn.ReLU(inplace=True)]
        ch = base
        for _ in range(n_down):
            layers += [nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1), nn.InstanceNorm2d(ch * 2),
                       nn.ReLU(inplace=True)]
            ch *= 2
        layers += [ResBlock(ch) for _ in range(n_res)]
        self.net = nn.Sequential(*layers)
        self.out_channels = ch

    def forward(self, x):
        return self.net(x)


class StyleEncoder(nn.Module):
    def __init__(self, base: int, n_down: int, style_dim: int):
        super().__init__()
        layers = [nn.Conv2d(3, base, 5, padding=2), nn.ReLU(inplace=True)]
        ch = base
        for _ in range(n_down):
            layers += [nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1), nn.ReLU(inplace=True)]
            ch *= 2
        layers += [nn.AdaptiveAvgPool2d(1), nn.Conv2d(ch, style_dim, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x).flatten(1)


class Decoder(nn.Module):
    """AdaIN residual blocks followed by upsampling back to the input resolution."""

    def __init__(self, channels: int, n_up: int, n_res: int, style_dim: int, mlp_dim: int):
        super().__init__()
        self.res = nn.ModuleList([ResBlock(channels, adain=True) for _ in range(n_res)])
        ups = []
        ch = channels
        for _ in range(n_up):
            ups += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(ch, ch // 2, 3, padding=1), nn.GroupNorm(1, ch // 2), nn.ReLU(inplace=True)]
            ch //= 2
        ups += [nn.Conv2d(ch, 3, 5, padding=2)]
        self.up = nn.Sequential(*ups)
        self.channels = channels
        self.mlp = nn.Sequential(
            nn.Linear(style_dim, mlp_dim), nn.ReLU(inplace=True),
            nn.Linear(mlp_dim, mlp_dim), nn.ReLU(inplace=True),
            nn.Linear(mlp_dim, 4 * channels * n_res),
        )

    def forward(self, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        params = self.mlp(style).split(self.channels, dim=1)
        h = content
        for i, block in enumerate(self.res):
            h = block(h, params[4 * i:4 * i + 4])
        return torch.sigmoid(self.up(h))


class Discriminator(nn.Module):
    """Strided convolutional patch classifiers (least-squares objective), one per image scale.

    Scale k sees the input average-pooled by 2**k, so coarser scales judge
    whole objects while the finest judges local texture.
    """

    def __init__(self, base: int, n_layers: int = 3, n_scales: int = 1):
        super().__init__()
        self.nets = nn.ModuleList([self._patch_net(base, n_layers) for _ in range(n_scales)])

    @staticmethod
    def _patch_net(base: int, n_layers: int) -> nn.Sequential:
        layers, ch = [], 3
        for i in range(n_layers):
            out = base * 2 ** i
            layers += [nn.Conv2d(ch, out, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            ch = out
        layers += [nn.Conv2d(ch, 1, 1)]
        return nn.Sequential(*layers)

    def forward(self, x) -> list[torch.Tensor]:
        h = x * 2.0 - 1.0
        outs = []
        for i, net in enumerate(self.nets):
            if i:
                h = F.avg_pool2d(h, 3, stride=2, padding=1, count_include_pad=False)
            outs.append(net(h))
        return outs
