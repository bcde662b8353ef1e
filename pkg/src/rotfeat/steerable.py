"""Cyclic-group steerable convolutions and group pooling.

A feature field carries a field type: the cyclic group C_n plus either the
trivial representation (group elements act as identity, e.g. RGB input and
pooled features) or the regular representation (elements cyclically
permute n orientation channels per field).

Layers are built by the rotated-filter construction: one learnable base
filter per output field is expanded into n filters, the p-th being the
base spatially rotated by 360*p/n degrees with its input orientation
blocks cyclically shifted by p. For n dividing 4 the rotations are exact
index permutations, making equivariance exact up to float rounding; for
other n the filters are rotated by bilinear interpolation and the
residual equivariance error is measured and pinned by the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


class FieldTypeError(ValueError):
    """A feature field's type does not match what an op expects."""


@dataclass(frozen=True)
class GroupSpec:
    """The cyclic group C_n of rotations by multiples of 360/n degrees."""

    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"group order must be >= 1, got {self.n}")

    def angle_deg(self, p):
        return 360.0 * (p % self.n) / self.n

    @property
    def angles_deg(self):
        return [self.angle_deg(p) for p in range(self.n)]


@dataclass(frozen=True)
class FieldType:
    """Representation tag for a feature tensor: group, kind, multiplicity."""

    group: GroupSpec
    kind: str  # "trivial" | "regular"
    multiplicity: int

    def __post_init__(self):
        if self.kind not in ("trivial", "regular"):
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.multiplicity < 1:
            raise ValueError(f"multiplicity must be >= 1, got {self.multiplicity}")

    @property
    def channels(self):
        return self.multiplicity * (1 if self.kind == "trivial" else self.group.n)


class FeatureField:
    """A [B,C,H,W] tensor tagged with how the group acts on its channels."""

    __slots__ = ("tensor", "field_type")

    def __init__(self, tensor, field_type):
        if tensor.ndim != 4:
            raise FieldTypeError(f"feature fields are 4-axis tensors, got shape {tensor.shape}")
        if tensor.shape[1] != field_type.channels:
            raise FieldTypeError(
                f"tensor has {tensor.shape[1]} channels but field type "
                f"{field_type.kind} x{field_type.multiplicity} over C_{field_type.group.n} "
                f"requires {field_type.channels}")
        self.tensor = tensor
        self.field_type = field_type

    @property
    def shape(self):
        return self.tensor.shape


def _orientation_roll_perm(channels, n, shift):
    """Channel permutation rolling each n-block by +shift (gather indices)."""
    m = channels // n
    j = np.arange(channels)
    blocks, orient = j // n, j % n
    return blocks * n + (orient - shift) % n


def shift_orientation(t, n, shift):
    """Cyclically roll each regular block of n channels by +shift."""
    if t.shape[1] % n != 0:
        raise FieldTypeError(f"channel count {t.shape[1]} not divisible by group order {n}")
    if n == 1 or shift % n == 0:
        return t
    return T.permute_channels(t, _orientation_roll_perm(t.shape[1], n, shift % n))


def regular_action(f, p):
    """Reference group action on a regular field: rotate space, roll channels.

    This is the output transform against which layer equivariance is tested.
    """
    if f.field_type.kind != "regular":
        raise FieldTypeError(f"regular_action needs a regular field, got {f.field_type.kind}")
    n = f.field_type.group.n
    if not 0 <= p < n:
        raise ValueError(f"group element index {p} outside [0, {n})")
    rotated = T.rotate_bilinear(f.tensor, f.field_type.group.angle_deg(p))
    return FeatureField(shift_orientation(rotated, n, p), f.field_type)


@dataclass
class SteerableKernel:
    """One learnable base filter per output field, expanded on demand.

    base has shape [out_fields, in_channels, k, k]; the expanded kernel
    [out_fields*n, in_channels, k, k] is derived, never learned directly.
    """

    base: T.Tensor
    in_type: FieldType
    out_fields: int

    def __post_init__(self):
        if self.base.ndim != 4:
            raise FieldTypeError(f"kernel base must be 4-axis, got {self.base.shape}")
        if self.base.shape[0] != self.out_fields:
            raise FieldTypeError(f"base has {self.base.shape[0]} filters for {self.out_fields} output fields")
        if self.base.shape[1] != self.in_type.channels:
            raise FieldTypeError(
                f"base expects {self.base.shape[1]} input channels, field type carries {self.in_type.channels}")

    @property
    def group(self):
        return self.in_type.group

    def expand(self):
        """Derive the full filter bank; differentiable w.r.t. the base."""
        n = self.group.n
        if n == 1:
            return self.base
        fshape = self.base.shape
        slices = []
        for p in range(n):
            w = T.rotate_bilinear(self.base, self.group.angle_deg(p))
            if self.in_type.kind == "regular":
                w = shift_orientation(w, n, p)
            slices.append(T.reshape(w, (fshape[0], 1) + tuple(fshape[1:])))
        stacked = T.concat(slices, axis=1)
        return T.reshape(stacked, (fshape[0] * n,) + tuple(fshape[1:]))


def gconv_forward(f, kernel, bias=None):
    """Steerable convolution: expand the kernel, then stride-1 same-pad conv.

    The bias is one value per output field, shared across the n orientation
    channels (per-orientation bias would break equivariance). Output is a
    regular field of kernel.out_fields fields.
    """
    if f.field_type != kernel.in_type:
        raise FieldTypeError(
            f"input field type {f.field_type} does not match kernel input type {kernel.in_type}")
    n = kernel.group.n
    k = kernel.base.shape[-1]
    expanded = kernel.expand()
    bias_c = None
    if bias is not None:
        if bias.shape != (kernel.out_fields,):
            raise FieldTypeError(f"bias shape {bias.shape} != ({kernel.out_fields},)")
        bias_c = T.repeat_interleave(bias, n) if n > 1 else bias
    out = T.conv2d(f.tensor, expanded, bias_c, stride=1, padding=(k - 1) // 2)
    return FeatureField(out, FieldType(kernel.group, "regular", kernel.out_fields))


def group_pool(f):
    """Max over each field's orientation channels; regular -> trivial."""
    if f.field_type.kind != "regular":
        raise FieldTypeError("group_pool needs a regular field; trivial fields have nothing to pool")
    n = f.field_type.group.n
    pooled = T.group_max(f.tensor, n)
    return FeatureField(pooled, FieldType(f.field_type.group, "trivial", f.field_type.multiplicity))


def interior_disk_mask(h, w, margin):
    """Pixels whose rotated pre-image stays in bounds for any angle.

    A centered disk shrunk by `margin` extra pixels; borders are excluded
    because zero padding breaks equivariance there for any construction.
    """
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    r = min(h, w) / 2.0 - 1.0 - margin
    return ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r


@dataclass
class EquivarianceReport:
    """Worst-case deviation between transform-then-map and map-then-transform."""

    group: GroupSpec
    max_abs: list            # per p
    max_rel: list            # per p, normalized by the reference side's scale
    margin: int
    trials: int
    image_size: int

    def worst_abs(self, skip_identity=True):
        vals = self.max_abs[1:] if skip_identity and len(self.max_abs) > 1 else self.max_abs
        return max(vals) if vals else 0.0

    def worst_rel(self, skip_identity=True):
        vals = self.max_rel[1:] if skip_identity and len(self.max_rel) > 1 else self.max_rel
        return max(vals) if vals else 0.0


def random_smooth_image(rng, channels, size, detail=4):
    """Band-limited random test image: coarse noise bilinearly upsampled.

    Interpolated (non-quarter-turn) rotations are only meaningful on
    signals the sampling grid can represent; white noise would measure
    the interpolator, not the layer.
    """
    coarse_hw = max(2, size // detail)
    coarse = rng.random((1, channels, coarse_hw, coarse_hw)).astype(np.float32)
    scale = np.diag([coarse_hw / size, coarse_hw / size, 1.0])
    return T.warp_bilinear(T.Tensor(coarse), scale, (size, size))


def check_equivariance(fragment, group, trials=5, image_size=32, in_channels=3,
                       margin=6, seed=0, smooth=True):
    """Measure the equivariance residual of a trivial-input net fragment.

    fragment maps a [B,C,H,W] Tensor to a FeatureField (trivial or regular).
    For each group element p the input is spatially rotated, the output of
    the unrotated input is transformed by the appropriate output action,
    and the max absolute difference over interior pixels is recorded.
    """
    rng = np.random.default_rng(seed)
    n = group.n
    mask = None
    max_abs = [0.0] * n
    max_rel = [0.0] * n
    for _ in range(trials):
        if smooth:
            x = random_smooth_image(rng, in_channels, image_size)
        else:
            x = T.Tensor(rng.random((1, in_channels, image_size, image_size)), dtype=np.float32)
        base = fragment(x)
        for p in range(n):
            lhs = fragment(T.rotate_bilinear(x, group.angle_deg(p))).tensor.data
            if base.field_type.kind == "regular":
                rhs = regular_action(base, p).tensor.data
            else:
                rhs = T.rotate_bilinear(base.tensor, group.angle_deg(p)).data
            if mask is None:
                mask = interior_disk_mask(rhs.shape[2], rhs.shape[3], margin)
            diff = np.abs(lhs - rhs)[:, :, mask]
            scale = np.abs(rhs[:, :, mask]).max()
            d = float(diff.max()) if diff.size else 0.0
            max_abs[p] = max(max_abs[p], d)
            max_rel[p] = max(max_rel[p], d / max(scale, 1e-12))
    return EquivarianceReport(group, max_abs, max_rel, margin, trials, image_size)
