"""Voxel-wise vessel analysis toolkit.

Cross-hair 3-D convolutions, an extreme class-balancing loss with
false-positive-rate correction, a sub-sampling-free fully convolutional
network, and a synthetic vascular tree generator.
"""

from vesselkit.volume import (
    LabelVolume,
    PatchGrid,
    Volume3D,
    extract_patches,
    normalize_intensities,
    read_volume,
    stitch_patches,
    write_volume,
)

__all__ = [
    "LabelVolume",
    "PatchGrid",
    "Volume3D",
    "extract_patches",
    "normalize_intensities",
    "read_volume",
    "stitch_patches",
    "write_volume",
]

__version__ = "0.1.0"
