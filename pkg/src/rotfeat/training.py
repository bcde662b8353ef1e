"""Self-supervised training on synthetic warped pairs.

Pairs are generated by warping a synthetic texture under a random
homography (uniform rotation, mild scale and translation) plus photometric
jitter. Three losses drive the network, all differentiable through the
tape:

  - repeatability cosine: windowed cosine similarity between one image's
    repeatability map and the other's map warped into its frame
  - peakiness: rewards locally peaked repeatability inside windows
  - average precision: soft-binned differentiable AP of descriptor
    rankings, optionally weighted by the reliability map

Training is plain SGD with momentum and is bit-deterministic for a fixed
(config, seed): reruns produce identical loss series and checkpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .geometry import Homography, rotation_homography
from .network import EquivariantFeatureNet, NetConfig


@dataclass
class TrainPair:
    image_a: T.Tensor
    image_b: T.Tensor
    gt: Homography          # maps a coordinates to b coordinates
    mask: np.ndarray        # a-frame pixels whose correspondent lands inside b


@dataclass
class LossReport:
    step: int
    repeatability_cosim: float
    peakiness: float
    ap_loss: float
    total: float


# ---------------------------------------------------------------------------
# synthetic imagery
# ---------------------------------------------------------------------------

def synthetic_texture(size, rng, num_shapes=5):
    """Multi-scale value noise with a few flat shapes, values in [0, 1]."""
    acc = np.zeros((3, size, size), dtype=np.float64)
    for cell in (4, 8, 16, 32):
        coarse_hw = max(2, size // cell)
        coarse = rng.random((1, 3, coarse_hw, coarse_hw)).astype(np.float32)
        up = T.warp_bilinear(T.Tensor(coarse), np.diag([coarse_hw / size, coarse_hw / size, 1.0]),
                             (size, size)).data[0]
        acc += up * cell
    acc -= acc.min()
    acc /= max(acc.max(), 1e-9)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(num_shapes):
        color = rng.random(3)
        alpha = rng.uniform(0.4, 0.9)
        cy, cx = rng.uniform(0.15, 0.85, 2) * size
        if rng.random() < 0.5:
            hy, hx = rng.uniform(0.04, 0.18, 2) * size
            region = (np.abs(yy - cy) < hy) & (np.abs(xx - cx) < hx)
        else:
            rad = rng.uniform(0.04, 0.15) * size
            region = (yy - cy) ** 2 + (xx - cx) ** 2 < rad * rad
        acc[:, region] = (1 - alpha) * acc[:, region] + alpha * color[:, None]
    return np.clip(acc, 0.0, 1.0).astype(np.float32)


def generate_pair(source, seed=0, rotation_range=(0.0, 360.0), scale_range=(0.9, 1.1),
                  max_translate=0.05, jitter=True):
    """Warp a [1,3,H,W] texture under a random homography into a train pair.

    The ground truth maps a-frame points to b-frame points; the validity
    mask marks a-frame pixels whose correspondent lies inside b.
    """
    if source.shape[2] < 64 or source.shape[3] < 64:
        raise ValueError(f"source must be at least 64x64, got {source.shape}")
    rng = np.random.default_rng(seed)
    _, _, H, W = source.shape
    angle = rng.uniform(*rotation_range)
    scale = rng.uniform(*scale_range)
    tx = rng.uniform(-max_translate, max_translate) * W
    ty = rng.uniform(-max_translate, max_translate) * H
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    rot = rotation_homography(angle, W, H)
    sc = Homography(np.array([[scale, 0, cx * (1 - scale)],
                              [0, scale, cy * (1 - scale)],
                              [0, 0, 1.0]]))
    gt = Homography.translation(tx, ty) @ sc @ rot
    image_b = T.warp_bilinear(source, gt.inverse().matrix)
    data_b = image_b.data
    if jitter:
        contrast = rng.uniform(0.85, 1.15)
        brightness = rng.uniform(-0.08, 0.08)
        data_b = np.clip(contrast * data_b + brightness, 0.0, 1.0).astype(np.float32)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    pts = np.c_[xx.ravel(), yy.ravel()]
    mapped = gt.apply(pts)
    eps = 1e-6  # trig rounding pushes exact-edge points epsilon outside
    mask = ((mapped[:, 0] >= -eps) & (mapped[:, 0] <= W - 1 + eps)
            & (mapped[:, 1] >= -eps) & (mapped[:, 1] <= H - 1 + eps)).reshape(H, W)
    return TrainPair(T.Tensor(source.data.copy()), T.Tensor(data_b), gt, mask)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_repeatability_cosim(rep_a, rep_b, gt, window=16, stride=8, mask=None):
    """1 - mean windowed cosine between rep_a and rep_b warped into a's frame.

    Windows containing pixels without a visible correspondent (outside the
    optional a-frame validity mask) are skipped; with no mask, every window
    counts. Raises when no window overlaps the valid region.
    """
    if rep_a.shape != rep_b.shape:
        raise ValueError(f"repeatability maps differ in shape: {rep_a.shape} vs {rep_b.shape}")
    warped = T.warp_bilinear(rep_b, gt.matrix)
    wa = T.unfold_windows(rep_a, window, stride)
    wb = T.unfold_windows(warped, window, stride)
    dot = T.reduce_sum(T.mul(wa, wb), axis=2)
    na2 = T.reduce_sum(T.mul(wa, wa), axis=2)
    nb2 = T.reduce_sum(T.mul(wb, wb), axis=2)
    cos = T.div(dot, T.sqrt(T.add(T.mul(na2, nb2), 1e-12)))
    if mask is None:
        return T.sub(1.0, T.reduce_mean(cos))
    mwin = T.unfold_windows(T.Tensor(mask[None, None].astype(np.float32)), window, stride)
    valid = (mwin.data.min(axis=2) > 0.5).astype(np.float64)  # [B, nWin]
    count = valid.sum()
    if count == 0:
        raise ValueError("no repeatability window lies fully inside the valid overlap")
    return T.sub(1.0, T.mul(T.reduce_sum(T.mul(cos, valid)), 1.0 / count))


def loss_peakiness(rep, window=16, stride=8):
    """1 - mean over windows of (max - mean); lowest when maps are peaky.

    Values are saturated at 1 first: the repeatability map comes through a
    softplus and is unbounded above, and without saturation the objective
    is unbounded below (training would just inflate the map).
    """
    capped = T.sub(rep, T.relu(T.sub(rep, 1.0)))
    wins = T.unfold_windows(capped, window, stride)
    mx = T.reduce_max(wins, axis=2)
    mn = T.reduce_mean(wins, axis=2)
    return T.sub(1.0, T.reduce_mean(T.sub(mx, mn)))


def _soft_bin_levels(bins):
    return np.linspace(1.0, -1.0, bins)


def exact_average_precision(similarities, is_positive):
    """Plain AP of a ranked list; the oracle the soft version approximates."""
    order = np.argsort(-np.asarray(similarities, dtype=np.float64), kind="stable")
    labels = np.asarray(is_positive, dtype=bool)[order]
    if labels.sum() == 0:
        return 0.0
    hits = 0
    total = 0.0
    for rank, lab in enumerate(labels, start=1):
        if lab:
            hits += 1
            total += hits / rank
    return total / labels.sum()


def soft_average_precision(sims, pos, weight, bins=25):
    """Differentiable AP per query from soft-binned similarities.

    sims: Tensor [Q, N] of cosine similarities; pos/weight: float arrays
    [Q, N] marking positives and considered candidates (weight 0 entries
    are ignored entirely). Returns a Tensor [Q, 1] of AP values.
    """
    Q, N = sims.shape
    levels = _soft_bin_levels(bins).reshape(1, 1, bins)
    delta = 2.0 / (bins - 1)
    s3 = T.reshape(sims, (Q, N, 1))
    w = T.relu(T.sub(1.0, T.mul(T.absolute(T.sub(s3, levels)), 1.0 / delta)))
    p_bins = T.reduce_sum(T.mul(w, pos[:, :, None]), axis=1)       # [Q, bins]
    a_bins = T.reduce_sum(T.mul(w, weight[:, :, None]), axis=1)    # [Q, bins]
    cum_p = T.cumsum(p_bins, axis=1)
    cum_a = T.cumsum(a_bins, axis=1)
    prec = T.div(cum_p, T.add(cum_a, 1e-8))
    tot_p = T.reduce_sum(p_bins, axis=1, keepdims=True)
    return T.div(T.reduce_sum(T.mul(prec, p_bins), axis=1, keepdims=True),
                 T.add(tot_p, 1e-8))


def loss_average_precision(desc_a, desc_b, gt, sample_count=64, seed=0,
                           reliability=None, pos_radius=2.0, neg_radius=8.0,
                           bins=25, grid_stride=2, kappa=0.25):
    """Soft-binned differentiable average precision over sampled queries.

    Queries are pixels of a whose gt correspondent lies inside b. For each
    query, candidate descriptors in b (a stride grid) within pos_radius of
    the correspondent are positives, beyond neg_radius negatives, the band
    between is ignored. Cosine similarities are soft-assigned to triangular
    bins over [-1, 1]; AP is the usual cumulative precision over bins.
    Returns 1 - mean AP, with each query's AP blended against kappa by its
    reliability when a reliability map is given.
    """
    _, D, H, W = desc_a.shape
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    pts = np.c_[xx.ravel(), yy.ravel()]
    mapped = gt.apply(pts)
    ok = ((mapped[:, 0] >= 0) & (mapped[:, 0] <= W - 1)
          & (mapped[:, 1] >= 0) & (mapped[:, 1] <= H - 1))
    valid_idx = np.nonzero(ok)[0]
    if valid_idx.size == 0:
        raise ValueError("no query pixels with a valid ground-truth correspondent")
    take = min(sample_count, valid_idx.size)
    chosen = rng.choice(valid_idx, size=take, replace=False)
    qys = (chosen // W).astype(np.int64)
    qxs = (chosen % W).astype(np.int64)
    q_mapped = mapped[chosen]

    gys, gxs = np.mgrid[0:H:grid_stride, 0:W:grid_stride]
    gys = gys.ravel().astype(np.int64)
    gxs = gxs.ravel().astype(np.int64)
    dx = gxs[None, :] - q_mapped[:, 0:1]
    dy = gys[None, :] - q_mapped[:, 1:2]
    dist = np.sqrt(dx * dx + dy * dy)
    pos = (dist <= pos_radius).astype(np.float64)
    considered = (pos > 0) | (dist > neg_radius)
    weight = considered.astype(np.float64)

    qdesc = T.gather_pixels(desc_a, qys, qxs)            # [Q, D]
    cdesc = T.gather_pixels(desc_b, gys, gxs)            # [N, D]
    sims = T.matmul(qdesc, cdesc, transpose_b=True)      # [Q, N]
    ap = soft_average_precision(sims, pos, weight, bins=bins)      # [Q, 1]
    if reliability is not None:
        rel = T.gather_pixels(reliability, qys, qxs)               # [Q, 1]
        score = T.add(T.mul(ap, rel), T.mul(T.sub(1.0, rel), kappa))
    else:
        score = ap
    return T.sub(1.0, T.reduce_mean(score))


# ---------------------------------------------------------------------------
# the trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    net: NetConfig = field(default_factory=NetConfig)
    image_size: int = 64
    steps_hint: int = 200
    learning_rate: float = 0.03
    momentum: float = 0.9
    weight_cosim: float = 1.0
    weight_peakiness: float = 1.0
    weight_ap: float = 1.0
    window: int = 16
    window_stride: int = 8
    ap_samples: int = 48
    ap_pos_radius: float = 2.0
    ap_neg_radius: float = 8.0
    ap_bins: int = 25
    ap_grid_stride: int = 2
    ap_kappa: float = 0.25
    # at desk scale AP sits below any sensible kappa early on, which would
    # drive reliability to zero and cut the descriptor gradient; weighting
    # stays available for full-scale runs
    ap_use_reliability: bool = False
    rotation_range: tuple = (0.0, 360.0)
    scale_range: tuple = (0.9, 1.1)
    max_translate: float = 0.05
    jitter: bool = True

    def to_dict(self):
        d = asdict(self)
        d["net"] = self.net.to_dict()
        d["rotation_range"] = list(self.rotation_range)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["net"] = NetConfig.from_dict(d["net"])
        d["rotation_range"] = tuple(d["rotation_range"])
        d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


def train(config, steps, seed=0, model=None, on_step=None):
    """Run SGD for `steps` steps; returns (model, [LossReport...]).

    Deterministic for fixed (config, steps, seed). Aborts with a
    RuntimeError naming the offending loss term if anything goes
    non-finite.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if model is None:
        model = EquivariantFeatureNet(config.net, seed=seed)
    velocity = {name: np.zeros_like(p.data) for name, p in model.params.items()}
    reports = []
    ss = np.random.SeedSequence(seed)
    tex_seed, pair_seed, ap_seed = (s.generate_state(1)[0] for s in ss.spawn(3))
    for step in range(steps):
        tex = synthetic_texture(config.image_size, np.random.default_rng([tex_seed, step]))
        pair = generate_pair(T.Tensor(tex[None]), seed=[pair_seed, step],
                             rotation_range=config.rotation_range,
                             scale_range=config.scale_range,
                             max_translate=config.max_translate, jitter=config.jitter)
        model.zero_grad()
        with T.Tape() as tape:
            out_a = model.forward(pair.image_a, training=True)
            out_b = model.forward(pair.image_b, training=True)
            l_cos = loss_repeatability_cosim(out_a.repeatability, out_b.repeatability,
                                             pair.gt, config.window, config.window_stride,
                                             mask=pair.mask)
            l_peak = T.mul(T.add(loss_peakiness(out_a.repeatability, config.window, config.window_stride),
                                 loss_peakiness(out_b.repeatability, config.window, config.window_stride)),
                           0.5)
            l_ap = loss_average_precision(out_a.descriptors, out_b.descriptors, pair.gt,
                                          sample_count=config.ap_samples, seed=[ap_seed, step],
                                          reliability=out_a.reliability if config.ap_use_reliability else None,
                                          pos_radius=config.ap_pos_radius,
                                          neg_radius=config.ap_neg_radius,
                                          bins=config.ap_bins,
                                          grid_stride=config.ap_grid_stride,
                                          kappa=config.ap_kappa)
            total = T.add(T.add(T.mul(l_cos, config.weight_cosim),
                                T.mul(l_peak, config.weight_peakiness)),
                          T.mul(l_ap, config.weight_ap))
        values = {"repeatability_cosim": l_cos.item(), "peakiness": l_peak.item(),
                  "ap_loss": l_ap.item(), "total": total.item()}
        for name, v in values.items():
            if not np.isfinite(v):
                raise RuntimeError(f"training diverged at step {step}: loss term {name} is {v}")
        T.backward(tape, total)
        for name, p in model.params.items():
            g = p.grad if p.grad is not None else 0.0
            velocity[name] = config.momentum * velocity[name] + g
            p.data = (p.data - config.learning_rate * velocity[name]).astype(np.float32)
        model.step += 1
        report = LossReport(step, values["repeatability_cosim"], values["peakiness"],
                            values["ap_loss"], values["total"])
        reports.append(report)
        if on_step is not None:
            on_step(report)
    return model, reports


def write_loss_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", "repeatability_cosim", "peakiness", "ap_loss", "total"])
        for r in reports:
            w.writerow([r.step, repr(r.repeatability_cosim), repr(r.peakiness),
                        repr(r.ap_loss), repr(r.total)])
