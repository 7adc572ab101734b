"""Volume ingestion, preprocessing, splitting, and synthetic data."""

from .datasets import (
    ManifestEntry,
    load_entry,
    load_manifest,
    load_volume,
    save_manifest,
    split_dataset,
)
from .nifti import NiftiHeader, parse_nifti1, write_nifti1
from .rawvol import describe_rawvol, read_rawvol, write_rawvol
from .synthetic import SyntheticSpec, generate_synthetic, slot_grid, sphere_mask
from .volume import SubjectMeta, Volume, center_crop, derive_mask, random_crop, whiten

__all__ = [
    "ManifestEntry", "load_entry", "load_manifest", "load_volume",
    "save_manifest", "split_dataset",
    "NiftiHeader", "parse_nifti1", "write_nifti1",
    "describe_rawvol", "read_rawvol", "write_rawvol",
    "SyntheticSpec", "generate_synthetic", "slot_grid", "sphere_mask",
    "SubjectMeta", "Volume", "center_crop", "derive_mask", "random_crop", "whiten",
]
