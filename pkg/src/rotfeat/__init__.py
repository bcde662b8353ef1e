"""Rotation-equivariant local features for image matching.

A cyclic-group steerable CNN produces per-pixel descriptors that are
invariant to discrete rotations after group pooling, plus reliability
and repeatability maps for keypoint selection. The package also ships
mutual-nearest-neighbor matching, a correspondence ensemble, RANSAC
homography verification, and rotated-matching / place-recognition
evaluation harnesses with CSV/JSON/figure reports.
"""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, backward  # noqa: F401
