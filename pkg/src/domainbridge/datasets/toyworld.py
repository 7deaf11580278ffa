"""Procedural toy world: labelled shape scenes under clear/rain weather and
different acquisition setups.

Four domains are produced. The source (clear) and target (rain) come from
different camera setups, while the two bridge domains share one setup and
differ only in weather::

    source_clear   clear  setup "city"
    target_rain    rain   setup "dash"   (cfg.target_setup)
    bridge_clear   clear  setup "tube"   (cfg.setup)
    bridge_rain    rain   setup "tube"   (cfg.setup)

Rain darkens and desaturates the scene, blurs it and adds bright droplet
discs on the lens. Labels are never affected by weather or setup.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from domainbridge.datasets.records import DatasetManifest, DomainTags, SampleRecord

DOMAINS = ("source_clear", "target_rain", "bridge_clear", "bridge_rain")
SHAPES = ("disc", "rect", "triangle", "diamond", "ring", "cross")
DROPLET_COLOR = np.array([0.86, 0.9, 0.95], dtype=np.float32)


@dataclass(frozen=True)
class RainParams:
    droplet_count_range: tuple[int, int] = (5, 10)
    droplet_radius_range: tuple[float, float] = (2.0, 3.5)
    darkening_factor: float = 0.45
    blur_radius: float = 1.0

    def __post_init__(self):
        lo, hi = self.droplet_count_range
        if not 0 <= lo <= hi:
            raise ValueError("droplet_count_range must be a nonempty range")
        rlo, rhi = self.droplet_radius_range
        if not 0 < rlo <= rhi:
            raise ValueError("droplet_radius_range must be a nonempty positive range")
        if not 0.0 <= self.darkening_factor <= 1.0:
            raise ValueError("darkening_factor must lie in [0, 1]")
        if self.blur_radius < 0:
            raise ValueError("blur_radius must be nonnegative")


@dataclass(frozen=True)
class SetupParams:
    """Camera setup: hue rotation (fraction of a turn) and radial vignetting."""

    hue_shift: float = 0.0
    vignette_strength: float = 0.0


@dataclass(frozen=True)
class ToyWorldConfig:
    image_size: tuple[int, int] = (64, 64)
    class_count: int = 4
    shape_density: float = 0.5
    rain: RainParams = field(default_factory=RainParams)
    # shared by both bridge domains
    setup: SetupParams = field(default_factory=lambda: SetupParams(-0.04, 0.45))
    target_setup: SetupParams = field(default_factory=lambda: SetupParams(0.09, 0.3))
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2 (background + one shape class)")
        if min(self.image_size) < 16:
            raise ValueError("image_size must be at least 16 x 16")
        if self.shape_density <= 0:
            raise ValueError("shape_density must be positive")

    @property
    def class_names(self) -> list[str]:
        return ["background"] + [SHAPES[(c - 1) % len(SHAPES)] + ("" if c <= len(SHAPES) else str(c))
                                 for c in range(1, self.class_count)]

    def domain_setup(self, domain: str) -> tuple[str, str, SetupParams]:
        """(weather, setup name, setup params) of a domain."""
        return {
            "source_clear": ("clear", "city", SetupParams()),
            "target_rain": ("rain", "dash", self.target_setup),
            "bridge_clear": ("clear", "tube", self.setup),
            "bridge_rain": ("rain", "tube", self.setup),
        }[domain]


def _class_color(c: int, q: int, rng: np.random.Generator) -> np.ndarray:
    hue = (c - 1) / (q - 1) + rng.uniform(-0.03, 0.03)
    val = 0.85 + rng.uniform(-0.08, 0.08)
    return _hsv_to_rgb(hue % 1.0, 0.7, val)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q_, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q_, v, p), (p, v, t), (p, q_, v), (t, p, v), (v, p, q_)][i]
    return np.array(rgb, dtype=np.float32)


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float,
                rng: np.random.Generator) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "rect":
        ay = r * rng.uniform(0.6, 1.0)
        return (np.abs(dy) <= ay) & (np.abs(dx) <= r)
    if kind == "triangle":
        # apex up, base at cy + r
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2.0)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.5 * r) ** 2)
    return ((np.abs(dy) <= r) & (np.abs(dx) <= r / 3)) | ((np.abs(dx) <= r) & (np.abs(dy) <= r / 3))


def _render_scene(cfg: ToyWorldConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    base = np.array([0.5, 0.52, 0.5], dtype=np.float32) + rng.uniform(-0.05, 0.05, 3).astype(np.float32)
    grad = (0.12 * (1.0 - yy / h))[..., None]
    noise = ndimage.gaussian_filter(rng.standard_normal((h, w)).astype(np.float32), 4.0)
    noise *= 0.08 / (noise.std() + 1e-6)
    img = base[None, None, :] + grad + noise[..., None]
    label = np.zeros((h, w), dtype=np.uint8)

    scale = min(h, w) / 64.0
    max_shapes = max(1, int(round(cfg.shape_density * 8)))
    for _ in range(int(rng.integers(1, max_shapes + 1))):
        c = int(rng.integers(1, cfg.class_count))
        r = rng.uniform(7.0, 13.0) * scale
        cy, cx = rng.uniform(r * 0.5, h - r * 0.5), rng.uniform(r * 0.5, w - r * 0.5)
        mask = _shape_mask(SHAPES[(c - 1) % len(SHAPES)], yy, xx, cy, cx, r, rng)
        color = _class_color(c, cfg.class_count, rng)
        tex = 0.03 * rng.standard_normal((h, w)).astype(np.float32)
        img[mask] = color[None, :] + tex[mask][:, None]
        label[mask] = c
    return np.clip(img, 0.0, 1.0), label


def _apply_rain(img: np.ndarray, rp: RainParams, rng: np.random.Generator,
                ) -> tuple[np.ndarray, list[tuple[float, float, float]]]:
    h, w = img.shape[:2]
    strength = rng.uniform(0.6, 1.0)
    img = img * (1.0 - rp.darkening_factor * strength)
    gray = img.mean(axis=2, keepdims=True)
    img = img + 0.35 * strength * (gray - img)
    if rp.blur_radius > 0:
        img = ndimage.gaussian_filter(img, sigma=(rp.blur_radius * strength, rp.blur_radius * strength, 0))
    local = ndimage.gaussian_filter(img, sigma=(2.0, 2.0, 0))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    drops = []
    for _ in range(int(rng.integers(rp.droplet_count_range[0], rp.droplet_count_range[1] + 1))):
        r = rng.uniform(*rp.droplet_radius_range)
        cy, cx = rng.uniform(r, h - 1 - r), rng.uniform(r, w - 1 - r)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        a = np.clip(r + 0.5 - d, 0.0, 1.0)[..., None]
        drop = 0.3 * local + 0.7 * DROPLET_COLOR[None, None, :]
        img = img * (1 - a) + drop * a
        drops.append((float(cy), float(cx), float(r)))
    return img, drops


def _hue_matrix(turns: float) -> np.ndarray:
    # rotation about the gray axis (1, 1, 1)
    th = 2.0 * np.pi * turns
    c, s = np.cos(th), np.sin(th)
    k = 1.0 / 3.0
    sq = np.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
    ], dtype=np.float32)


def _apply_setup(img: np.ndarray, sp: SetupParams) -> np.ndarray:
    if sp.hue_shift:
        img = img @ _hue_matrix(sp.hue_shift).T
    if sp.vignette_strength:
        h, w = img.shape[:2]
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
        rr = ((yy - (h - 1) / 2) / (h / 2)) ** 2 + ((xx - (w - 1) / 2) / (w / 2)) ** 2
        img = img * (1.0 - sp.vignette_strength * rr / 2.0)[..., None]
    return img


def generate_toy_dataset(cfg: ToyWorldConfig, n: int, domain: str, with_meta: bool = False):
    """Generate ``n`` labelled toy scenes for ``domain``.

    The result is a pure function of ``(cfg, n, domain)``; images are
    quantized to 8-bit levels so that writing them as PNG is lossless. With
    ``with_meta`` a list of droplet tuples ``(cy, cx, r)`` per image is also
    returned.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    weather, setup_name, sp = cfg.domain_setup(domain)
    rng = np.random.default_rng([cfg.seed, DOMAINS.index(domain)])
    samples, meta = [], []
    for i in range(n):
        img, label = _render_scene(cfg, rng)
        drops: list[tuple[float, float, float]] = []
        if weather == "rain":
            img, drops = _apply_rain(img, cfg.rain, rng)
        img = _apply_setup(img, sp)
        img = (np.clip(np.rint(img * 255.0), 0, 255) / 255.0).astype(np.float32)
        samples.append(SampleRecord(
            image_ref=f"toy_{domain}_s{cfg.seed}_{i:05d}",
            tags=DomainTags(weather, setup_name, "original"),
            label_ref=None,
            source_video=f"{setup_name}_{weather}" if domain.startswith("bridge") else None,
            frame_index=i if domain.startswith("bridge") else None,
            image_data=img,
            label_data=label,
        ))
        meta.append(drops)
    manifest = DatasetManifest(f"toy_{domain}", samples, cfg.class_count, cfg.class_names)
    return (manifest, meta) if with_meta else manifest


def _disc_kernel(r_in: float, r_out: float) -> np.ndarray:
    m = int(np.ceil(r_out))
    yy, xx = np.mgrid[-m:m + 1, -m:m + 1]
    d = np.sqrt(yy ** 2 + xx ** 2)
    k = ((d >= r_in) & (d <= r_out)).astype(np.float64)
    return k / k.sum()


def detect_droplets(image: np.ndarray, radius_range: tuple[float, float] = (2.0, 3.5),
                    threshold: float = 0.2, min_sep: int = 3) -> list[tuple[int, int, float]]:
    """Find small bright discs by matching a centre-minus-surround disc template.

    Returns ``(y, x, radius)`` for every local maximum of the template
    response above ``threshold``. Shapes much larger than the template give
    near-zero response in their interior.
    """
    lum = image[..., :3] @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    lum = lum.astype(np.float64)
    radii = np.linspace(radius_range[0], radius_range[1], 3)
    responses = []
    for r in radii:
        centre = ndimage.convolve(lum, _disc_kernel(0.0, r - 0.5), mode="nearest")
        ring = ndimage.convolve(lum, _disc_kernel(r + 1.0, r + 2.5), mode="nearest")
        responses.append(centre - ring)
    resp = np.max(responses, axis=0)
    best_r = radii[np.argmax(responses, axis=0)]
    peaks = (resp == ndimage.maximum_filter(resp, size=2 * min_sep + 1)) & (resp > threshold)
    ys, xs = np.nonzero(peaks)
    return [(int(y), int(x), float(best_r[y, x])) for y, x in zip(ys, xs)]
