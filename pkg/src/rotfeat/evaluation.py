"""Evaluation protocols: rotated-pair matching accuracy and place recognition.

The rotated matching protocol takes scene pairs with ground-truth
homographies (HPatches-style directory layout), resizes both images to a
common frame, composes an extra rotation onto the ground truth, matches,
optionally RANSAC-filters, and reports mean matching accuracy over an
angle x threshold grid, split by variation tag.

The place-recognition protocol retrieves, for every query image, the
reference image with the most RANSAC inliers; retrieval is correct when
the reference index lies within +/-2 of the query index.

Dataset layouts:

    scenes/<tag>_<name>/1.ppm .. 6.ppm, H_1_2 .. H_1_6   (tag i/v/s)
    vpr/queries/<index>.ppm
    vpr/references/<variant>/<index>.ppm                 (variant = angle id)

Reports serialize to JSON (full structure) and CSV (one row per angle,
threshold, variation). Every report embeds the seed and a hash of the
protocol parameters.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import (
    Homography,
    NoModelError,
    read_homography_text,
    rescale_homography,
    rotation_homography,
    write_homography_text,
)
from .imageio import ImageFormatError, load_image, resize_image, save_image
from .matching import MatchSet, apply_ransac, mutual_nn_match
from .training import synthetic_texture

log = logging.getLogger("rotfeat.evaluation")

DEFAULT_ANGLES = tuple(range(0, 360, 15))     # 24 angles; 360 aliases 0
DEFAULT_THRESHOLDS = tuple(range(1, 11))
VARIATION_TAGS = {"i": "illumination", "v": "viewpoint"}


@dataclass
class ScenePair:
    image_a: str
    image_b: str
    gt: Homography
    scene: str
    variation: str  # illumination | viewpoint | synthetic


def load_scene_pairs(root):
    """Enumerate scene folders holding 1..6 images and H_1_2..H_1_6 files."""
    root = Path(root)
    pairs = []
    for scene_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        tag = VARIATION_TAGS.get(scene_dir.name.split("_")[0], "synthetic")
        first = None
        for ext in (".ppm", ".pgm", ".png"):
            if (scene_dir / f"1{ext}").exists():
                first = scene_dir / f"1{ext}"
                break
        if first is None:
            continue
        for k in range(2, 7):
            h_path = scene_dir / f"H_1_{k}"
            img = scene_dir / f"{k}{first.suffix}"
            if not h_path.exists() or not img.exists():
                continue
            pairs.append(ScenePair(str(first), str(img), read_homography_text(h_path),
                                   scene_dir.name, tag))
    return pairs


def config_hash(params):
    """Stable hash of the protocol parameters; changes iff any of them do."""
    blob = json.dumps(params, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def mma(matches, gt, threshold_px):
    """Fraction of kept correspondences whose gt projection lands within
    threshold of the matched point; an empty set scores 0 by definition."""
    kept = matches.kept()
    if len(kept) == 0:
        return 0.0
    proj = gt.apply(kept.points_a)
    err = np.sqrt(((proj - kept.points_b) ** 2).sum(axis=1))
    return float((err <= threshold_px).mean())


@dataclass
class MmaReport:
    angles: list
    thresholds: list
    variation_mma: dict      # tag -> [n_angles][n_thresholds] nested lists
    variation_pairs: dict    # tag -> pair count entering each mean
    per_pair: list           # dicts: scene, variation, angle, matches, inliers
    metadata: dict

    def overall(self):
        """Pair-weighted mean across variation tags, [n_angles][n_thresholds]."""
        total = np.zeros((len(self.angles), len(self.thresholds)))
        n = 0
        for tag, grid in self.variation_mma.items():
            w = self.variation_pairs[tag]
            total += np.asarray(grid) * w
            n += w
        return (total / max(n, 1)).tolist()

    def to_dict(self):
        return {"angles": list(self.angles), "thresholds": list(self.thresholds),
                "variation_mma": self.variation_mma, "variation_pairs": self.variation_pairs,
                "overall_mma": self.overall(), "per_pair": self.per_pair,
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d):
        return cls(d["angles"], d["thresholds"], d["variation_mma"],
                   d["variation_pairs"], d["per_pair"], d["metadata"])


def _pair_seed(base_seed, pair_idx, angle_idx):
    return int(np.random.SeedSequence([base_seed, pair_idx, angle_idx]).generate_state(1)[0])


def run_rotated_mma(pairs, extractor, angles=None, thresholds=None, resize=(300, 300),
                    use_ransac=False, ransac_threshold=3.0, ransac_iters=2000,
                    seed=0, jobs=1, extractor_info=None):
    """Rotated matching accuracy over a dataset of scene pairs.

    extractor: callable mapping an image Tensor [1,3,H,W] to a
    DescriptorSet. For each pair, both images are resized to `resize`
    (skipped when None), the ground truth is rescaled accordingly, and
    the second image is additionally rotated by each angle with the
    rotation composed onto the ground truth. Unreadable images are
    skipped with a warning and counted in the report metadata.
    """
    if not pairs:
        raise ValueError("empty dataset")
    angles = list(angles if angles is not None else DEFAULT_ANGLES)
    thresholds = list(thresholds if thresholds is not None else DEFAULT_THRESHOLDS)
    protocol = {"angles": angles, "thresholds": thresholds, "resize": resize,
                "use_ransac": use_ransac, "ransac_threshold": ransac_threshold,
                "ransac_iters": ransac_iters, "seed": seed,
                "extractor": extractor_info or {}, "empty_match_mma": 0.0,
                "pair_weighting": "pairs-equal"}
    results = [None] * len(pairs)
    skipped = []

    def eval_pair(idx):
        pair = pairs[idx]
        try:
            img_a = load_image(pair.image_a)
            img_b = load_image(pair.image_b)
        except ImageFormatError as e:
            log.warning("skipping pair %s: %s", pair.scene, e)
            return ("skip", str(e))
        gt = pair.gt
        if resize is not None:
            rh, rw = resize[1], resize[0]
            sxa, sya = rw / img_a.shape[3], rh / img_a.shape[2]
            sxb, syb = rw / img_b.shape[3], rh / img_b.shape[2]
            img_a = resize_image(img_a, rh, rw)
            img_b = resize_image(img_b, rh, rw)
            gt = rescale_homography(gt, sxa, sya, sxb, syb)
        set_a = extractor(img_a)
        h, w = img_b.shape[2], img_b.shape[3]
        grid = np.zeros((len(angles), len(thresholds)))
        pair_log = []
        for ai, angle in enumerate(angles):
            rot_b = T.rotate_bilinear(img_b, angle) if angle % 360 != 0 else img_b
            gt_angle = rotation_homography(angle, w, h) @ gt
            set_b = extractor(rot_b)
            n_inl = 0
            if len(set_a) == 0 or len(set_b) == 0:
                matches = MatchSet.empty()
            else:
                matches = mutual_nn_match(set_a, set_b)
                if use_ransac and len(matches) >= 4:
                    try:
                        res, matches = apply_ransac(
                            matches, threshold_px=ransac_threshold, max_iters=ransac_iters,
                            seed=_pair_seed(seed, idx, ai))
                        n_inl = res.num_inliers
                    except NoModelError:
                        matches = MatchSet(matches.points_a, matches.points_b,
                                           matches.similarity, list(matches.source),
                                           inlier_mask=np.zeros(len(matches), dtype=bool))
            for ti, thr in enumerate(thresholds):
                grid[ai, ti] = mma(matches, gt_angle, thr)
            pair_log.append({"scene": pair.scene, "variation": pair.variation,
                             "angle": angle, "matches": len(matches), "inliers": n_inl})
        return ("ok", (pair.variation, grid, pair_log))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for idx, out in enumerate(pool.map(eval_pair, range(len(pairs)))):
                results[idx] = out
    else:
        for idx in range(len(pairs)):
            results[idx] = eval_pair(idx)

    sums = {}
    counts = {}
    per_pair = []
    for out in results:
        if out[0] == "skip":
            skipped.append(out[1])
            continue
        variation, grid, pair_log = out[1]
        sums.setdefault(variation, np.zeros_like(grid))
        sums[variation] += grid
        counts[variation] = counts.get(variation, 0) + 1
        per_pair.extend(pair_log)
    variation_mma = {tag: (sums[tag] / counts[tag]).tolist() for tag in sorted(sums)}
    metadata = {"seed": seed, "resize": list(resize) if resize else None,
                "use_ransac": use_ransac, "ransac_threshold": ransac_threshold,
                "ransac_iters": ransac_iters, "n_pairs": sum(counts.values()),
                "n_skipped": len(skipped), "skipped": skipped,
                "config_hash": config_hash(protocol),
                "empty_match_mma": 0.0, "pair_weighting": "pairs-equal"}
    return MmaReport(angles, thresholds, variation_mma,
                     {k: counts[k] for k in sorted(counts)}, per_pair, metadata)


# ---------------------------------------------------------------------------
# place recognition
# ---------------------------------------------------------------------------

@dataclass
class VprDatabase:
    queries: list                 # paths, index = position
    references: dict              # variant -> list of (index, path)
    tolerance: int = 2

    def __post_init__(self):
        if not self.queries:
            raise ValueError("place-recognition database has no queries")
        q = len(self.queries)
        for variant, refs in self.references.items():
            idxs = {i for i, _ in refs}
            if not set(range(q)) <= idxs:
                raise ValueError(
                    f"variant {variant!r} reference indices do not cover queries 0..{q - 1}")


def load_vpr_layout(root):
    """Directory layout: queries/<index>.<ext>, references/<variant>/<index>.<ext>."""
    root = Path(root)
    qdir = root / "queries"
    queries = sorted((p for p in qdir.iterdir() if p.is_file()), key=lambda p: int(p.stem))
    references = {}
    for vdir in sorted((root / "references").iterdir()):
        if not vdir.is_dir():
            continue
        refs = sorted((p for p in vdir.iterdir() if p.is_file()), key=lambda p: int(p.stem))
        references[vdir.name] = [(int(p.stem), str(p)) for p in refs]
    return VprDatabase([str(p) for p in queries], references)


@dataclass
class VprReport:
    recall: dict                  # variant -> fraction of correct retrievals
    log: list                     # per (variant, query): retrieved index, inliers
    metadata: dict

    def to_dict(self):
        return {"recall": self.recall, "log": self.log, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d):
        return cls(d["recall"], d["log"], d["metadata"])


def run_vpr(db, extractor, ransac_threshold=3.0, ransac_iters=2000, seed=0, jobs=1,
            extractor_info=None):
    """Most-inliers retrieval over every variant of the reference set.

    Ties in inlier count resolve to the lowest reference index. References
    where RANSAC finds no model score zero inliers.
    """
    protocol = {"ransac_threshold": ransac_threshold, "ransac_iters": ransac_iters,
                "seed": seed, "tolerance": db.tolerance,
                "extractor": extractor_info or {}}
    desc_cache = {}

    def descriptors(path):
        if path not in desc_cache:
            desc_cache[path] = extractor(load_image(path))
        return desc_cache[path]

    recall = {}
    entries = []
    for variant in sorted(db.references):
        refs = db.references[variant]
        jobs_list = list(enumerate(db.queries))

        def eval_query(item, variant=variant, refs=refs):
            qidx, qpath = item
            qset = descriptors(qpath)
            best = (-1, None)  # (inliers, ref index)
            for ridx, rpath in refs:
                rset = descriptors(rpath)
                inliers = 0
                if len(qset) and len(rset):
                    matches = mutual_nn_match(qset, rset)
                    if len(matches) >= 4:
                        try:
                            res, _ = apply_ransac(
                                matches, threshold_px=ransac_threshold,
                                max_iters=ransac_iters,
                                seed=_pair_seed(seed, qidx, ridx))
                            inliers = res.num_inliers
                        except NoModelError:
                            inliers = 0
                if inliers > best[0] or (inliers == best[0] and (best[1] is None or ridx < best[1])):
                    best = (inliers, ridx)
            correct = abs(best[1] - qidx) <= db.tolerance
            return {"variant": variant, "query": qidx, "retrieved": best[1],
                    "inliers": best[0], "correct": bool(correct)}

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                rows = list(pool.map(eval_query, jobs_list))
        else:
            rows = [eval_query(item) for item in jobs_list]
        entries.extend(rows)
        recall[variant] = float(np.mean([r["correct"] for r in rows]))
    metadata = {"seed": seed, "tolerance": db.tolerance,
                "ransac_threshold": ransac_threshold, "ransac_iters": ransac_iters,
                "n_queries": len(db.queries), "config_hash": config_hash(protocol)}
    return VprReport(recall, entries, metadata)


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------

def emit_report(report, path, fmt="json"):
    """Write a report deterministically as JSON or CSV."""
    path = Path(path)
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")
    elif fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as f:
            if isinstance(report, MmaReport):
                f.write("angle,threshold,mma,variation,ransac,n_pairs\n")
                ransac = report.metadata["use_ransac"]
                for tag, grid in report.variation_mma.items():
                    n = report.variation_pairs[tag]
                    for ai, angle in enumerate(report.angles):
                        for ti, thr in enumerate(report.thresholds):
                            f.write(f"{angle},{thr},{grid[ai][ti]!r},{tag},{ransac},{n}\n")
            elif isinstance(report, VprReport):
                f.write("variant,recall,n_queries\n")
                for variant, rec in sorted(report.recall.items()):
                    f.write(f"{variant},{rec!r},{report.metadata['n_queries']}\n")
            else:
                raise TypeError(f"cannot serialize report of type {type(report).__name__}")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def load_report(path):
    with open(path, "r", encoding="utf-8") as f:
        d = json.load(f)
    if "variation_mma" in d:
        d = dict(d)
        d.pop("overall_mma", None)
        return MmaReport.from_dict(d)
    return VprReport.from_dict(d)


# ---------------------------------------------------------------------------
# synthetic dataset fixtures (tests and demos run datasetless)
# ---------------------------------------------------------------------------

def make_scene_fixture(root, n_scenes=2, size=96, seed=0, tag="s"):
    """Write a miniature scene dataset in the evaluation layout."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for s in range(n_scenes):
        scene = root / f"{tag}_synth{s:02d}"
        scene.mkdir(parents=True, exist_ok=True)
        tex = synthetic_texture(size, rng)
        base = T.Tensor(tex[None])
        save_image(base, scene / "1.ppm")
        for k in range(2, 7):
            angle = rng.uniform(-10, 10)
            scale = rng.uniform(0.95, 1.05)
            tx, ty = rng.uniform(-3, 3, 2)
            c = (size - 1) / 2.0
            h = (Homography.translation(tx, ty)
                 @ Homography(np.array([[scale, 0, c * (1 - scale)],
                                        [0, scale, c * (1 - scale)], [0, 0, 1.0]]))
                 @ rotation_homography(angle, size, size))
            warped = T.warp_bilinear(base, h.inverse().matrix)
            save_image(warped, scene / f"{k}.ppm")
            write_homography_text(h, scene / f"H_1_{k}")
    return root


def make_vpr_fixture(root, n_queries=6, variants=(0, 90), size=96, seed=0):
    """Write a miniature place-recognition dataset in the evaluation layout.

    The reference at index i under variant angle v is the rotated copy of
    query i; all other references are unrelated textures at their own
    indices, so perfect retrieval is expected from rotation-robust
    features.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    (root / "queries").mkdir(parents=True, exist_ok=True)
    textures = [synthetic_texture(size, rng) for _ in range(n_queries)]
    for i, tex in enumerate(textures):
        save_image(T.Tensor(tex[None]), root / "queries" / f"{i}.ppm")
    for v in variants:
        vdir = root / "references" / f"{int(v):03d}"
        vdir.mkdir(parents=True, exist_ok=True)
        for i, tex in enumerate(textures):
            rot = T.rotate_bilinear(T.Tensor(tex[None]), float(v))
            save_image(rot, vdir / f"{i}.ppm")
    return root
