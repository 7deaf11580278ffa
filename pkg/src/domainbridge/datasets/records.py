"""Sample records, dataset manifests and the JSON-lines manifest format.

A manifest file holds one JSON object per line. An optional header line
(``{"name": ..., "class_count": ..., "class_names": [...]}``) carries the
dataset-level fields; every other line is a sample record::

    {"image": "img/000.png", "label": "lbl/000.png", "weather": "clear",
     "setup": "chX", "origin": "original", "video": "v1", "frame": 12}

Relative paths are resolved against the directory containing the manifest.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from PIL import Image

from domainbridge import IGNORE_INDEX

logger = logging.getLogger(__name__)

WEATHERS = ("clear", "rain")
ORIGINS = ("original", "bridge")


class ManifestError(ValueError):
    """Raised for malformed or invalid manifests."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class DomainTags:
    weather: str
    setup: str
    origin: str = "original"

    def __post_init__(self):
        if self.weather not in WEATHERS:
            raise ValueError(f"weather must be one of {WEATHERS}, got {self.weather!r}")
        if not self.setup:
            raise ValueError("setup tag must be a non-empty string")
        if self.origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}, got {self.origin!r}")


@dataclass
class SampleRecord:
    """One image (optionally labelled) with its domain tags.

    ``image_ref`` is the identity of the sample: a file path for on-disk data
    or a synthetic id for rasters held in memory (``image_data``).
    """

    image_ref: str
    tags: DomainTags
    label_ref: str | None = None
    source_video: str | None = None
    frame_index: int | None = None
    image_data: np.ndarray | None = field(default=None, repr=False, compare=False)
    label_data: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def has_label(self) -> bool:
        return self.label_data is not None or self.label_ref is not None

    def load_image(self) -> np.ndarray:
        """H x W x 3 float32 array in [0, 1]."""
        if self.image_data is not None:
            return self.image_data
        with Image.open(self.image_ref) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
        return arr / 255.0

    def load_label(self) -> np.ndarray | None:
        if self.label_data is not None:
            return self.label_data
        if self.label_ref is None:
            return None
        with Image.open(self.label_ref) as im:
            return np.asarray(im, dtype=np.uint8).copy()

    def with_tags(self, **changes: Any) -> SampleRecord:
        return replace(self, tags=replace(self.tags, **changes))


@dataclass
class DatasetManifest:
    name: str
    samples: list[SampleRecord]
    class_count: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if not self.class_names:
            self.class_names = [f"class_{i}" for i in range(self.class_count)]
        if len(self.class_names) != self.class_count:
            raise ValueError("class_names must have class_count entries")
        seen = set()
        for s in self.samples:
            if s.image_ref in seen:
                raise ValueError(f"duplicate image_ref {s.image_ref!r}")
            seen.add(s.image_ref)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def refs(self) -> list[str]:
        return [s.image_ref for s in self.samples]

    def subset(self, indices: Iterable[int], name: str | None = None) -> DatasetManifest:
        return DatasetManifest(name or self.name, [self.samples[i] for i in indices],
                               self.class_count, list(self.class_names))

    def load_arrays(self, with_labels: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
        """Stack every sample into (N, H, W, 3) float32 images and (N, H, W) uint8 labels."""
        images = np.stack([s.load_image() for s in self.samples]).astype(np.float32)
        if not with_labels:
            return images, None
        labels = []
        for s in self.samples:
            lbl = s.load_label()
            if lbl is None:
                raise ManifestError(f"sample {s.image_ref!r} has no label")
            labels.append(lbl)
        return images, np.stack(labels).astype(np.uint8)

    def validate(self) -> None:
        """Check every label against its image size and the class range."""
        for i, s in enumerate(self.samples):
            _validate_sample(s, self.class_count, line=None, index=i)


def _validate_sample(s: SampleRecord, class_count: int, line: int | None, index: int) -> None:
    lbl = s.load_label()
    if lbl is None:
        return
    img = s.load_image()
    if lbl.shape != img.shape[:2]:
        raise ManifestError(
            f"sample {index} ({s.image_ref}): label size {lbl.shape} != image size {img.shape[:2]}",
            line)
    bad = (lbl >= class_count) & (lbl != IGNORE_INDEX)
    if bad.any():
        raise ManifestError(
            f"sample {index} ({s.image_ref}): class value {int(lbl[bad].max())} out of range "
            f"for {class_count} classes", line)


_RECORD_KEYS = {"image", "label", "weather", "setup", "origin", "video", "frame"}
_HEADER_KEYS = {"name", "class_count", "class_names"}


def _resolve(base: Path, ref: str) -> str:
    p = Path(ref)
    return str(p if p.is_absolute() else (base / p))


def load_manifest(path: str | os.PathLike, class_count: int | None = None) -> DatasetManifest:
    """Parse and validate a JSON-lines manifest.

    The class count comes from the header line, then ``class_count``, and is
    otherwise inferred from the largest label value present.
    """
    path = Path(path)
    base = path.parent
    header: dict[str, Any] = {}
    samples: list[SampleRecord] = []
    lines: list[int] = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ManifestError(f"malformed JSON: {e.msg}", lineno) from None
            if not isinstance(obj, dict):
                raise ManifestError("record must be a JSON object", lineno)
            if "image" not in obj and "class_count" in obj:
                if samples or header:
                    raise ManifestError("header must be the first line", lineno)
                unknown = set(obj) - _HEADER_KEYS
                if unknown:
                    raise ManifestError(f"unknown header fields {sorted(unknown)}", lineno)
                header = obj
                continue
            unknown = set(obj) - _RECORD_KEYS
            if unknown:
                raise ManifestError(f"unknown fields {sorted(unknown)}", lineno)
            for key in ("image", "weather", "setup"):
                if key not in obj:
                    raise ManifestError(f"missing field {key!r}", lineno)
            try:
                tags = DomainTags(obj["weather"], str(obj["setup"]), obj.get("origin", "original"))
            except ValueError as e:
                raise ManifestError(str(e), lineno) from None
            frame = obj.get("frame")
            if frame is not None and (not isinstance(frame, int) or frame < 0):
                raise ManifestError("frame must be a nonnegative integer", lineno)
            samples.append(SampleRecord(
                image_ref=_resolve(base, obj["image"]),
                tags=tags,
                label_ref=_resolve(base, obj["label"]) if obj.get("label") else None,
                source_video=obj.get("video"),
                frame_index=frame,
            ))
            lines.append(lineno)

    if not samples and not header:
        logger.warning("manifest %s is empty", path)

    q = header.get("class_count", class_count)
    if q is None:
        q = 1
        for s in samples:
            lbl = s.load_label()
            if lbl is not None:
                valid = lbl[lbl != IGNORE_INDEX]
                if valid.size:
                    q = max(q, int(valid.max()) + 1)
    seen: dict[str, int] = {}
    for s, lineno in zip(samples, lines):
        if s.image_ref in seen:
            raise ManifestError(f"duplicate image {s.image_ref!r} (first at line {seen[s.image_ref]})",
                                lineno)
        seen[s.image_ref] = lineno
    for i, (s, lineno) in enumerate(zip(samples, lines)):
        _validate_sample(s, q, lineno, i)
    return DatasetManifest(header.get("name", path.stem), samples, int(q),
                           list(header.get("class_names", [])))


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike,
                  data_dir: str | os.PathLike | None = None) -> Path:
    """Write ``manifest`` as JSON lines.

    Samples holding in-memory rasters are first written as PNG files under
    ``data_dir`` (default: ``<manifest stem>_data`` next to the manifest).
    Paths are stored relative to the manifest directory when possible.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data_dir = Path(data_dir) if data_dir is not None else path.parent / f"{path.stem}_data"
    out = [json.dumps({"name": manifest.name, "class_count": manifest.class_count,
                       "class_names": manifest.class_names})]
    for i, s in enumerate(manifest.samples):
        image_path, label_path = s.image_ref, s.label_ref
        if s.image_data is not None:
            data_dir.mkdir(parents=True, exist_ok=True)
            stem = Path(s.image_ref).name or f"{i:06d}"
            image_path = str(data_dir / f"{stem}.png")
            Image.fromarray(_to_uint8(s.image_data)).save(image_path)
            if s.label_data is not None:
                label_path = str(data_dir / f"{stem}_label.png")
                Image.fromarray(s.label_data.astype(np.uint8), mode="L").save(label_path)
        rec: dict[str, Any] = {"image": _relative(image_path, path.parent)}
        if label_path is not None:
            rec["label"] = _relative(label_path, path.parent)
        rec.update(weather=s.tags.weather, setup=s.tags.setup, origin=s.tags.origin)
        if s.source_video is not None:
            rec["video"] = s.source_video
        if s.frame_index is not None:
            rec["frame"] = s.frame_index
        out.append(json.dumps(rec))
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    return path


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _relative(p: str, base: Path) -> str:
    try:
        return os.path.relpath(p, base)
    except ValueError:
        return p
