"""Random rescale / flip / crop augmentation shared by images and labels."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from domainbridge import IGNORE_INDEX
from domainbridge.datasets.records import SampleRecord


@dataclass(frozen=True)
class AugmentParams:
    scale: float
    flip: bool
    top: int
    left: int
    crop: tuple[int, int]


def draw_augment_params(rng: np.random.Generator, image_size: tuple[int, int],
                        crop: tuple[int, int], scale_range: tuple[float, float] = (0.5, 2.0),
                        flip_prob: float = 0.5) -> AugmentParams:
    scale = float(rng.uniform(*scale_range))
    flip = bool(rng.random() < flip_prob)
    h, w = _scaled_size(image_size, scale)
    top = int(rng.integers(0, max(h - crop[0], 0) + 1))
    left = int(rng.integers(0, max(w - crop[1], 0) + 1))
    return AugmentParams(scale, flip, top, left, tuple(crop))


def _scaled_size(size: tuple[int, int], scale: float) -> tuple[int, int]:
    return max(1, int(round(size[0] * scale))), max(1, int(round(size[1] * scale)))


def apply_geometry(arr: np.ndarray, params: AugmentParams, is_label: bool) -> np.ndarray:
    """Apply rescale, flip and crop to an H x W x C image or an H x W label.

    Images are resampled bilinearly and padded with 0; labels use nearest
    neighbour and are padded with the ignore index.
    """
    size = arr.shape[:2]
    new = _scaled_size(size, params.scale)
    if new != size:
        t = torch.from_numpy(np.ascontiguousarray(arr))
        if is_label:
            t = F.interpolate(t[None, None].float(), size=new, mode="nearest")[0, 0]
            arr = t.to(torch.uint8).numpy()
        else:
            t = F.interpolate(t.permute(2, 0, 1)[None].float(), size=new, mode="bilinear",
                              align_corners=False)[0]
            arr = t.permute(1, 2, 0).numpy()
    if params.flip:
        arr = arr[:, ::-1]
    ch, cw = params.crop
    h, w = arr.shape[:2]
    if h < ch or w < cw:
        pad = [(0, max(ch - h, 0)), (0, max(cw - w, 0))] + [(0, 0)] * (arr.ndim - 2)
        arr = np.pad(arr, pad, constant_values=IGNORE_INDEX if is_label else 0)
    out = arr[params.top:params.top + ch, params.left:params.left + cw]
    return np.ascontiguousarray(out, dtype=np.uint8 if is_label else np.float32)


def augment_pair(image: np.ndarray, label: np.ndarray | None, rng: np.random.Generator,
                 crop: tuple[int, int], scale_range: tuple[float, float] = (0.5, 2.0),
                 ) -> tuple[np.ndarray, np.ndarray | None]:
    params = draw_augment_params(rng, image.shape[:2], crop, scale_range)
    img = apply_geometry(image, params, is_label=False)
    lbl = apply_geometry(label, params, is_label=True) if label is not None else None
    return img, lbl


def augment_sample(s: SampleRecord, rng: np.random.Generator, crop: tuple[int, int],
                   scale_range: tuple[float, float] = (0.5, 2.0)) -> SampleRecord:
    """Randomly rescale (factor in ``scale_range``), flip and crop a sample."""
    img, lbl = augment_pair(s.load_image(), s.load_label(), rng, crop, scale_range)
    return replace(s, image_data=img, label_data=lbl)
