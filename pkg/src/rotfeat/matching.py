"""Keypoint extraction, mutual-NN matching, ensembling, rotation priors.

Keypoints are scored by repeatability x reliability and kept when they
dominate their square NMS neighborhood (Chebyshev radius); score ties are
broken toward the lexicographically smallest (y, x). Descriptor rows are
always unit length, so cosine similarity is a plain dot product.

The on-disk correspondence interchange format (UTF-8 JSON) lets externally
generated matches join the ensemble:

    {"image_a": ..., "image_b": ..., "model": ...,
     "frame": [width, height],          # optional, defaults to [300, 300]
     "matches": [{"xa","ya","xb","yb","similarity"}, ...]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import geometry
from .network import NetOutput


@dataclass
class Keypoint:
    x: float
    y: float
    score: float


@dataclass
class DescriptorSet:
    """Keypoints plus their unit-norm descriptor rows [num_kp, D]."""

    keypoints: list
    descriptors: np.ndarray
    source: str = "rotfeat"

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        if len(self.keypoints) != len(self.descriptors):
            raise ValueError(
                f"{len(self.keypoints)} keypoints but {len(self.descriptors)} descriptor rows")

    def __len__(self):
        return len(self.keypoints)

    @property
    def dim(self):
        return self.descriptors.shape[1] if len(self.descriptors) else 0

    def coords(self):
        return np.array([[kp.x, kp.y] for kp in self.keypoints], dtype=np.float64).reshape(-1, 2)


@dataclass
class MatchSet:
    """Correspondences between two images, coordinate level.

    points_a/points_b are [N,2] (x, y); similarity is the cosine between
    the matched descriptor rows; source tags which model produced each
    entry. index_a/index_b point back into the originating DescriptorSets
    when the matches came from one matcher (None after ensembling mixed
    sources). inlier_mask is set by RANSAC filtering.
    """

    points_a: np.ndarray
    points_b: np.ndarray
    similarity: np.ndarray
    source: list
    index_a: np.ndarray | None = None
    index_b: np.ndarray | None = None
    inlier_mask: np.ndarray | None = None

    def __post_init__(self):
        self.points_a = np.asarray(self.points_a, dtype=np.float64).reshape(-1, 2)
        self.points_b = np.asarray(self.points_b, dtype=np.float64).reshape(-1, 2)
        self.similarity = np.asarray(self.similarity, dtype=np.float64).reshape(-1)
        if not (len(self.points_a) == len(self.points_b) == len(self.similarity) == len(self.source)):
            raise ValueError("match arrays disagree on length")

    def __len__(self):
        return len(self.similarity)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), [])

    def kept(self):
        """Entries surviving RANSAC, or everything when unfiltered."""
        if self.inlier_mask is None:
            return self
        m = self.inlier_mask
        return MatchSet(self.points_a[m], self.points_b[m], self.similarity[m],
                        [s for s, keep in zip(self.source, m) if keep])


def extract_keypoints(output, max_kp=500, nms_radius=1, descriptor_source="pooled",
                      source="rotfeat"):
    """Select scored local maxima from a network output (batch size 1).

    Score = repeatability x reliability. A pixel survives when every other
    pixel in its Chebyshev-radius window scores strictly lower, with exact
    ties won by the lexicographically smaller (y, x). Pixels within
    nms_radius of the border, non-positive scores, and pixels whose
    descriptor is exactly zero are excluded. Keypoints are sorted by
    descending score (ties again by (y, x)) and truncated to max_kp.
    """
    if max_kp < 1 or nms_radius < 1:
        raise ValueError("max_kp and nms_radius must be >= 1")
    desc_map = output.unpooled if descriptor_source == "unpooled" else output.descriptors
    if descriptor_source == "unpooled" and desc_map is None:
        raise ValueError("network output carries no unpooled features; run the unpooled variant")
    if desc_map.shape[0] != 1:
        raise ValueError("extract_keypoints handles one image at a time")
    score = (output.repeatability.data[0, 0] * output.reliability.data[0, 0]).astype(np.float64)
    H, W = score.shape
    r = nms_radius
    masked = np.full((H + 2 * r, W + 2 * r), -np.inf)
    masked[r:H + r, r:W + r] = score
    # border exclusion: anything closer than r to the edge cannot win
    valid = np.zeros_like(score, dtype=bool)
    valid[r:H - r, r:W - r] = True
    dnorm = np.linalg.norm(desc_map.data[0], axis=0)
    valid &= (score > 0) & (dnorm > 0)
    win = sliding_window_view(masked, (2 * r + 1, 2 * r + 1))
    winmax = win.max(axis=(2, 3))
    cand = valid & (score >= winmax)
    ys, xs = np.nonzero(cand)
    keep = []
    for y, x in zip(ys, xs):
        block = masked[y:y + 2 * r + 1, x:x + 2 * r + 1]
        ok = True
        ties = np.argwhere(block == score[y, x])
        for dy, dx in ties:
            oy, ox = y + dy - r, x + dx - r
            if (oy, ox) != (y, x) and (oy, ox) < (y, x):
                ok = False
                break
        if ok:
            keep.append((y, x))
    keep.sort(key=lambda p: (-score[p[0], p[1]], p[0], p[1]))
    keep = keep[:max_kp]
    kps = [Keypoint(float(x), float(y), float(score[y, x])) for y, x in keep]
    if keep:
        iy = np.array([p[0] for p in keep])
        ix = np.array([p[1] for p in keep])
        rows = desc_map.data[0][:, iy, ix].T.astype(np.float64)
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        rows = rows / norms
    else:
        rows = np.zeros((0, desc_map.shape[1]))
    return DescriptorSet(kps, rows.astype(np.float32), source=source)


def mutual_nn_match(a, b):
    """Keep (i, j) iff i and j are each other's highest-cosine neighbor.

    argmax ties resolve to the lowest index on both sides, making the
    result deterministic.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("mutual_nn_match needs non-empty descriptor sets")
    if a.dim != b.dim:
        raise ValueError(f"descriptor dims differ: {a.dim} vs {b.dim}")
    sim = a.descriptors.astype(np.float64) @ b.descriptors.astype(np.float64).T
    nn12 = sim.argmax(axis=1)
    nn21 = sim.argmax(axis=0)
    ids = np.arange(len(a))
    mutual = nn21[nn12] == ids
    ia = ids[mutual]
    ib = nn12[mutual]
    ca, cb = a.coords(), b.coords()
    return MatchSet(ca[ia], cb[ib], sim[ia, ib], [a.source] * len(ia),
                    index_a=ia, index_b=ib)


def ensemble_correspondences(m1, m2, keep_fraction=0.5):
    """Pool two match sets and keep the top fraction by cosine similarity.

    Duplicate pixel pairs (same coordinates in both sets) are kept once
    with the higher similarity. Ties in similarity break by source tag,
    then pool order, so the selection is deterministic and independent of
    argument order up to that documented tie-break. An empty pool yields
    an empty MatchSet.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    entries = []
    for ms in (m1, m2):
        if ms is None:
            continue
        for i in range(len(ms)):
            entries.append((tuple(ms.points_a[i]), tuple(ms.points_b[i]),
                            float(ms.similarity[i]), ms.source[i]))
    best = {}
    for pa, pb, sim, src in entries:
        key = (pa, pb)
        if key not in best or sim > best[key][0] or (sim == best[key][0] and src < best[key][1]):
            best[key] = (sim, src)
    pool = [(pa, pb, sim, src) for (pa, pb), (sim, src) in best.items()]
    pool.sort(key=lambda e: (-e[2], e[3], e[0], e[1]))
    if not pool:
        return MatchSet.empty()
    n_keep = math.ceil(keep_fraction * len(pool))
    pool = pool[:n_keep]
    return MatchSet(np.array([e[0] for e in pool]), np.array([e[1] for e in pool]),
                    np.array([e[2] for e in pool]), [e[3] for e in pool])


def rotation_prior_match(a, b, prior_p, group):
    """Mutual-NN matching of unpooled descriptors under a known rotation.

    The descriptors must be unpooled (dimension D*n ordered as D blocks of
    n orientations). b's orientation blocks are rolled so that a content
    rotation by group element prior_p cancels: if b's features equal a's
    with blocks rolled by +prior_p, the match becomes the identity.
    """
    n = group.n
    if a.dim != b.dim:
        raise ValueError(f"descriptor dims differ: {a.dim} vs {b.dim}")
    if a.dim % n != 0:
        raise ValueError(f"descriptor dim {a.dim} not divisible by group order {n}")
    if not 0 <= prior_p < n:
        raise ValueError(f"prior_p {prior_p} outside [0, {n})")
    rows = b.descriptors.reshape(len(b), a.dim // n, n)
    rows = np.roll(rows, -prior_p, axis=2).reshape(len(b), a.dim)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    shifted = DescriptorSet(b.keypoints, rows / norms, source=b.source)
    return mutual_nn_match(a, shifted)


def make_extractor(model, max_kp=500, nms_radius=2, descriptor_source="pooled",
                   source="rotfeat"):
    """Bind a model and extraction knobs into an image -> DescriptorSet callable."""

    def extract(image):
        out = model.forward(image)
        return extract_keypoints(out, max_kp=max_kp, nms_radius=nms_radius,
                                 descriptor_source=descriptor_source, source=source)

    return extract


def apply_ransac(matches, threshold_px=3.0, max_iters=2000, confidence=0.995, seed=0):
    """RANSAC-verify a MatchSet; returns (RansacResult, filtered MatchSet).

    Raises geometry.NoModelError when no model reaches 4 inliers; callers
    evaluating retrieval treat that as zero inliers.
    """
    res = geometry.ransac_homography(matches.points_a, matches.points_b,
                                     threshold_px=threshold_px, max_iters=max_iters,
                                     confidence=confidence, seed=seed)
    out = MatchSet(matches.points_a, matches.points_b, matches.similarity,
                   list(matches.source), matches.index_a, matches.index_b,
                   inlier_mask=res.inlier_mask)
    return res, out


# ---------------------------------------------------------------------------
# interchange files
# ---------------------------------------------------------------------------

DEFAULT_FRAME = (300, 300)


def write_matches_json(matches, path, image_a="", image_b="", model="rotfeat",
                       frame=DEFAULT_FRAME):
    doc = {
        "image_a": str(image_a),
        "image_b": str(image_b),
        "model": model,
        "frame": list(frame),
        "matches": [
            {"xa": float(matches.points_a[i, 0]), "ya": float(matches.points_a[i, 1]),
             "xb": float(matches.points_b[i, 0]), "yb": float(matches.points_b[i, 1]),
             "similarity": float(matches.similarity[i])}
            for i in range(len(matches)) if matches.inlier_mask is None or matches.inlier_mask[i]
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def read_matches_json(path):
    """Returns (MatchSet, metadata dict with image_a/image_b/model/frame)."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    for key in ("image_a", "image_b", "model", "matches"):
        if key not in doc:
            raise ValueError(f"{path}: missing required field {key!r}")
    rows = doc["matches"]
    pa = np.array([[r["xa"], r["ya"]] for r in rows], dtype=np.float64).reshape(-1, 2)
    pb = np.array([[r["xb"], r["yb"]] for r in rows], dtype=np.float64).reshape(-1, 2)
    sim = np.array([r["similarity"] for r in rows], dtype=np.float64)
    meta = {"image_a": doc["image_a"], "image_b": doc["image_b"],
            "model": doc["model"], "frame": tuple(doc.get("frame", DEFAULT_FRAME))}
    return MatchSet(pa, pb, sim, [doc["model"]] * len(rows)), meta
