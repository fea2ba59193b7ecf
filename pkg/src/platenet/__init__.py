"""platenet: a small numpy CNN engine for ok/bad surface inspection images."""

from platenet.errors import (
    BuildError,
    DatasetError,
    FormatError,
    PlatenetError,
    ShapeError,
    StateError,
    StructureError,
    TrainingError,
    UnsupportedVersionError,
)
from platenet.model import Model, ModelSpec, build, default_spec, load, save

__version__ = "0.1.0"

__all__ = [
    "BuildError",
    "DatasetError",
    "FormatError",
    "Model",
    "ModelSpec",
    "PlatenetError",
    "ShapeError",
    "StateError",
    "StructureError",
    "TrainingError",
    "UnsupportedVersionError",
    "build",
    "default_spec",
    "load",
    "save",
]
