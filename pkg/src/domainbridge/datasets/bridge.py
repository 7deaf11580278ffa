"""Bridge-set selection checks and dataset unions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from domainbridge.datasets.records import DatasetManifest, SampleRecord

logger = logging.getLogger(__name__)


class BridgeError(ValueError):
    def __init__(self, report: BridgeReport):
        self.report = report
        super().__init__("incompatible bridge sets:\n  " + "\n  ".join(report.violations))


@dataclass
class BridgeReport:
    ok: bool
    violations: list[str] = field(default_factory=list)


def check_bridge_compatibility(A: DatasetManifest, B: DatasetManifest,
                               C: DatasetManifest, D: DatasetManifest) -> BridgeReport:
    """Check the bridge sets C (clear) and D (rain) at the tag level.

    C must share the weather of the clear source, D the weather of the rainy
    target, and C and D must come from the same acquisition setups.
    """
    violations = []
    for name, bridge, weather in (("C", C, "clear"), ("D", D, "rain")):
        for i, s in enumerate(bridge.samples):
            if s.tags.weather != weather:
                violations.append(
                    f"{name}[{i}] {s.image_ref}: weather {s.tags.weather!r}, expected {weather!r}")
    if A.class_count != B.class_count or {C.class_count, D.class_count} - {A.class_count}:
        if len(C) or len(D):
            violations.append("class count mismatch between source, target and bridge sets")
    setups_c = {s.tags.setup for s in C.samples}
    setups_d = {s.tags.setup for s in D.samples}
    if setups_c != setups_d:
        violations.append(f"setup mismatch: C has {sorted(setups_c)}, D has {sorted(setups_d)}")
    return BridgeReport(not violations, violations)


def _union(base: DatasetManifest, extra: DatasetManifest, name: str) -> DatasetManifest:
    seen = set()
    samples: list[SampleRecord] = []
    for s in base.samples:
        if s.image_ref not in seen:
            seen.add(s.image_ref)
            samples.append(s)
    for s in extra.samples:
        if s.image_ref not in seen:
            seen.add(s.image_ref)
            samples.append(s.with_tags(origin="bridge"))
    return DatasetManifest(name, samples, base.class_count, list(base.class_names))


def assemble_bridged_dataset(A: DatasetManifest, B: DatasetManifest, C: DatasetManifest,
                             D: DatasetManifest) -> tuple[DatasetManifest, DatasetManifest]:
    """Return (A ∪ C, B ∪ D); bridge samples are re-tagged ``origin="bridge"``.

    Duplicates are resolved on ``image_ref`` and the first occurrence wins.
    """
    report = check_bridge_compatibility(A, B, C, D)
    if not report.ok:
        raise BridgeError(report)
    if not len(C) and not len(D):
        logger.warning("empty bridge sets: bridged datasets equal the originals")
    return _union(A, C, f"{A.name}+{C.name}"), _union(B, D, f"{B.name}+{D.name}")


def subsample_video_frames(frame_count: int, k: int) -> list[int]:
    """Uniformly pick ``k`` of ``frame_count`` frames: ``floor(i * N / k)``."""
    if frame_count < 1 or k < 1:
        raise ValueError("frame_count and k must be positive")
    if k > frame_count:
        raise ValueError(f"cannot pick {k} frames from a {frame_count}-frame video")
    return [i * frame_count // k for i in range(k)]
