"""Lesion-to-outcome pipeline: normative-field tractography, disruption
features, first-order lesion features, and a random-forest evaluation harness.
"""

from .errors import (
    DegenerateDataWarning,
    DegenerateInputError,
    FormatError,
    ShapeError,
    UnsupportedDataTypeError,
    ValidationError,
)
from .volume import (
    GridSpec,
    Volume,
    containing_voxel,
    load_volume,
    resample_nearest,
    save_volume,
    voxel_to_world,
    world_to_voxel,
)

__version__ = "0.1.0"
