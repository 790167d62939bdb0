"""Directed distance field toolkit.

Represents a watertight triangle mesh as a 5-D field mapping (position,
viewing direction) to the distance of the first surface hit, generates
training data with a surface-ray sampling strategy, trains a small
weight-normalized network to approximate the field, and renders,
reconstructs and evaluates the result against an exact BVH-backed oracle.
"""

__version__ = "0.1.0"

from .errors import DataError, DdfError, NumericError

__all__ = ["DataError", "DdfError", "NumericError", "__version__"]
