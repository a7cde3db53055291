"""Radiance fields that render colour together with semantic labels, normals, shading, keypoints and edges."""
from .properties import Branch, ConfigError, Kind, LossKind, PropertySpec, make_specs

__version__ = "0.1.0"

__all__ = ["Branch", "ConfigError", "Kind", "LossKind", "PropertySpec", "make_specs", "__version__"]
