from domainbridge.datasets.records import (
    DatasetManifest,
    DomainTags,
    ManifestError,
    SampleRecord,
    load_manifest,
    save_manifest,
)
from domainbridge.datasets.bridge import (
    BridgeReport,
    assemble_bridged_dataset,
    check_bridge_compatibility,
    subsample_video_frames,
)
from domainbridge.datasets.augment import AugmentParams, augment_sample, apply_geometry, draw_augment_params
from domainbridge.datasets.toyworld import (
    DOMAINS,
    RainParams,
    SetupParams,
    ToyWorldConfig,
    detect_droplets,
    generate_toy_dataset,
)
from domainbridge.datasets.gap import DomainGapReport, domain_gap_estimate, gaussian_kl_sym

__all__ = [
    "AugmentParams",
    "BridgeReport",
    "DOMAINS",
    "DatasetManifest",
    "DomainGapReport",
    "DomainTags",
    "ManifestError",
    "RainParams",
    "SampleRecord",
    "SetupParams",
    "ToyWorldConfig",
    "apply_geometry",
    "assemble_bridged_dataset",
    "augment_sample",
    "check_bridge_compatibility",
    "detect_droplets",
    "domain_gap_estimate",
    "draw_augment_params",
    "gaussian_kl_sym",
    "generate_toy_dataset",
    "load_manifest",
    "save_manifest",
    "subsample_video_frames",
]
