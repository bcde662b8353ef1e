"""Planar homographies: application, composition, estimation, verification.

Shares the package-wide spatial convention (x right, y down, rotations
counter-clockwise about the map center). The text format for homography
files is 3 lines of 3 whitespace-separated decimals, row-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class PointAtInfinityError(ValueError):
    """A projective mapping sent a point to (or near) the line at infinity."""


class DegenerateConfigurationError(ValueError):
    """Point configuration too degenerate for homography estimation."""


class NoModelError(RuntimeError):
    """RANSAC found no homography with enough inliers."""


class Homography:
    """A 3x3 projective transform, normalized so m[2,2] == 1 when nonzero."""

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64).reshape(3, 3).copy()
        if m[2, 2] != 0:
            m = m / m[2, 2]
        self.matrix = m

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx, ty):
        m = np.eye(3)
        m[0, 2], m[1, 2] = tx, ty
        return cls(m)

    @classmethod
    def scaling(cls, sx, sy):
        return cls(np.diag([float(sx), float(sy), 1.0]))

    def det(self):
        return float(np.linalg.det(self.matrix))

    def is_invertible(self, tol=1e-12):
        return abs(self.det()) > tol

    def inverse(self):
        if not self.is_invertible():
            raise DegenerateConfigurationError("homography is numerically singular")
        return Homography(np.linalg.inv(self.matrix))

    def compose(self, other):
        """self after other: (self @ other)(p) == self(other(p))."""
        return Homography(self.matrix @ other.matrix)

    def __matmul__(self, other):
        return self.compose(other)

    def apply(self, points):
        """Map (x, y) or an [N,2] array of points with perspective divide."""
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        ph = np.c_[pts, np.ones(len(pts))]
        q = ph @ self.matrix.T
        w = q[:, 2]
        if np.any(np.abs(w) < 1e-12):
            raise PointAtInfinityError("point maps to infinity under this homography")
        out = q[:, :2] / w[:, None]
        return (out[0, 0], out[0, 1]) if single else out

    def __repr__(self):
        return f"Homography({self.matrix.tolist()})"


def rotation_homography(angle_deg, width, height):
    """Homography moving image content by a counter-clockwise rotation.

    Matches rotate_bilinear exactly: content at point q in the input lands
    at apply(H, q) in the rotated image. Center is ((W-1)/2, (H-1)/2).
    """
    t = math.radians(angle_deg)
    ct, st = math.cos(t), math.sin(t)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    # forward point map is the inverse of the sampling map used by the warp
    r = np.array([[ct, st, 0.0], [-st, ct, 0.0], [0.0, 0.0, 1.0]])
    tc = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    tn = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    return Homography(tc @ r @ tn)


def rescale_homography(h, sx_a, sy_a, sx_b, sy_b):
    """Rewrite h (A coords -> B coords) for axis-scaled copies of A and B."""
    if min(sx_a, sy_a, sx_b, sy_b) <= 0:
        raise ValueError("scales must be positive")
    sb = np.diag([sx_b, sy_b, 1.0])
    sa_inv = np.diag([1.0 / sx_a, 1.0 / sy_a, 1.0])
    return Homography(sb @ h.matrix @ sa_inv)


def _collinear_triple_exists(pts, tol=1e-8):
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a, b, c = pts[i], pts[j], pts[k]
                area2 = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
                scale = max(1.0, np.abs([a, b, c]).max())
                if area2 <= tol * scale * scale:
                    return True
    return False


def _hartley_normalize(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d if d > 1e-12 else 1.0
    t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    ph = np.c_[pts, np.ones(len(pts))]
    return (ph @ t.T)[:, :2], t


def dlt_homography(points_a, points_b):
    """Normalized direct linear transform from >= 4 correspondences.

    Exact for 4 noiseless pairs, least-squares otherwise. Raises
    DegenerateConfigurationError when 3 source points are collinear (for
    minimal sets) or the design matrix is rank deficient.
    """
    pa = np.asarray(points_a, dtype=np.float64)
    pb = np.asarray(points_b, dtype=np.float64)
    if pa.shape != pb.shape or pa.ndim != 2 or pa.shape[1] != 2 or len(pa) < 4:
        raise ValueError(f"need matching [N>=4, 2] arrays, got {pa.shape} and {pb.shape}")
    if len(pa) == 4 and _collinear_triple_exists(pa):
        raise DegenerateConfigurationError("3 of the 4 source points are collinear")
    pan, ta = _hartley_normalize(pa)
    pbn, tb = _hartley_normalize(pb)
    n = len(pa)
    a = np.zeros((2 * n, 9))
    x, y = pan[:, 0], pan[:, 1]
    u, v = pbn[:, 0], pbn[:, 1]
    a[0::2] = np.c_[x, y, np.ones(n), np.zeros((n, 3)), -u * x, -u * y, -u]
    a[1::2] = np.c_[np.zeros((n, 3)), x, y, np.ones(n), -v * x, -v * y, -v]
    if np.linalg.matrix_rank(a) < 8:
        raise DegenerateConfigurationError("rank-deficient correspondence system")
    _, _, vt = np.linalg.svd(a)
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(tb) @ hn @ ta
    if abs(m[2, 2]) < 1e-12 or abs(np.linalg.det(m)) < 1e-12:
        raise DegenerateConfigurationError("estimated homography is singular")
    return Homography(m)


def symmetric_transfer_error(h, points_a, points_b):
    """Mean of forward and backward reprojection distances, per pair."""
    pa = np.asarray(points_a, dtype=np.float64)
    pb = np.asarray(points_b, dtype=np.float64)
    fwd = h.apply(pa)
    bwd = h.inverse().apply(pb)
    ef = np.sqrt(((fwd - pb) ** 2).sum(axis=1))
    eb = np.sqrt(((bwd - pa) ** 2).sum(axis=1))
    return 0.5 * (ef + eb)


@dataclass
class RansacResult:
    homography: Homography
    inlier_mask: np.ndarray
    iterations: int
    seed: int

    @property
    def num_inliers(self):
        return int(self.inlier_mask.sum())


def ransac_homography(points_a, points_b, threshold_px=3.0, max_iters=2000,
                      confidence=0.995, seed=0):
    """Seeded RANSAC homography fit with a final inlier refit.

    Inliers are scored by symmetric transfer error <= threshold_px. The
    iteration budget shrinks adaptively from the confidence formula. The
    returned model never has fewer inliers than the best minimal-sample
    model evaluated. Raises NoModelError when no sample reaches 4 inliers.
    """
    pa = np.asarray(points_a, dtype=np.float64)
    pb = np.asarray(points_b, dtype=np.float64)
    n = len(pa)
    if n < 4 or len(pb) != n:
        raise NoModelError(f"RANSAC needs >= 4 matches, got {n}")
    rng = np.random.default_rng(seed)
    best_count = 0
    best_mask = None
    best_h = None
    needed = max_iters
    it = 0
    while it < min(max_iters, needed):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        try:
            h = dlt_homography(pa[idx], pb[idx])
            err = symmetric_transfer_error(h, pa, pb)
        except (DegenerateConfigurationError, PointAtInfinityError):
            continue
        mask = err <= threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask, best_h = count, mask, h
            w = count / n
            if 0 < w < 1:
                denom = math.log(max(1e-12, 1.0 - w ** 4))
                if denom < 0:
                    needed = min(max_iters, int(math.ceil(math.log(1.0 - confidence) / denom)))
            elif w >= 1:
                needed = it
    if best_h is None or best_count < 4:
        raise NoModelError(f"no homography with >= 4 inliers among {n} matches")
    # least-squares refit on the consensus set; keep it only if it does not
    # lose inliers relative to the best minimal-sample model
    try:
        refit = dlt_homography(pa[best_mask], pb[best_mask])
        refit_mask = symmetric_transfer_error(refit, pa, pb) <= threshold_px
        if int(refit_mask.sum()) >= best_count:
            best_h, best_mask = refit, refit_mask
    except (DegenerateConfigurationError, PointAtInfinityError):
        pass
    return RansacResult(best_h, best_mask, it, seed)


def read_homography_text(path):
    """Read the 3x3 row-major whitespace text format."""
    vals = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            vals.extend(float(tok) for tok in line.split())
    if len(vals) != 9:
        raise ValueError(f"{path}: expected 9 numbers, found {len(vals)}")
    return Homography(np.array(vals).reshape(3, 3))


def write_homography_text(h, path):
    with open(path, "w", encoding="utf-8") as f:
        for row in h.matrix:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")
