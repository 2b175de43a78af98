"""Sound source DOA estimation and tracking from SRP-PHAT power maps.

The package covers the full desk-scale pipeline: shoebox room simulation of
moving sources, SRP-PHAT map extraction, a causal 3D-CNN tracker with two
1D-CNN baselines, curriculum training and RMSAE evaluation.
"""

from . import evaluate, geometry, models, roomsim, scenegen, srpfeat, tensornet
from .errors import (
    AllSilent,
    DegenerateDirection,
    EmptySelection,
    FormatError,
    LagRangeTooSmall,
    NonPhysicalT60Warning,
    OutOfRoom,
    ShapeError,
    SrpTrackError,
    TooShort,
)
from .geometry import (
    SPEED_OF_SOUND,
    DelayTable,
    Doa,
    MicArray,
    SphericalGrid,
    angular_error,
    default_array,
    delay_table,
    doa_to_unit,
    grid_argmax,
    unit_to_doa,
)

__version__ = "0.1.0"

__all__ = [
    "SPEED_OF_SOUND",
    "AllSilent",
    "DegenerateDirection",
    "DelayTable",
    "Doa",
    "EmptySelection",
    "FormatError",
    "LagRangeTooSmall",
    "MicArray",
    "NonPhysicalT60Warning",
    "OutOfRoom",
    "ShapeError",
    "SphericalGrid",
    "SrpTrackError",
    "TooShort",
    "angular_error",
    "default_array",
    "delay_table",
    "doa_to_unit",
    "grid_argmax",
    "unit_to_doa",
    "__version__",
]
