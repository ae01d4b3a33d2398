"""Dense optical tracking: sparse tracks densified and refined into flow and visibility."""

from .core import (
    TAU,
    ConfigError,
    ContractError,
    DotError,
    FlowField,
    FormatError,
    NoVisibleTracksError,
    ShapeError,
    SpecError,
    TrackSet,
    Video,
    VisibilityMask,
    binarize_mask,
)

__all__ = [
    "TAU",
    "ConfigError",
    "ContractError",
    "DotError",
    "FlowField",
    "FormatError",
    "NoVisibleTracksError",
    "ShapeError",
    "SpecError",
    "TrackSet",
    "Video",
    "VisibilityMask",
    "binarize_mask",
]
