"""The equivariant feature network: steerable backbone, group pool, heads.

Five steerable conv layers (each followed by orientation-shared batch norm
and ReLU) lift an RGB image to a regular field, group pooling collapses
orientations, and three heads read the pooled (trivial) features:

  - descriptors: L2-normalized pooled features, one unit vector per pixel
  - reliability: two-layer standard CNN, 2-channel softmax, second channel
  - repeatability: two-layer standard CNN through a softplus

Variants: "pooled" is the default; "unpooled" additionally exposes the
pre-pool regular features (for rotation-prior matching); "post_pool_cnn"
inserts 3 standard size-2 convolutions after pooling, which destroys
rotation equivariance of the descriptors (kept as a diagnostic of why
heads must not touch the pooled descriptors).

Checkpoint format (little-endian): 8-byte magic "REFNETv1", uint64 JSON
header length, UTF-8 JSON header (format version, config, step, tensor
manifest with shapes and byte offsets), then raw float32 payloads.
Round trips are bit exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .steerable import FeatureField, FieldType, GroupSpec, SteerableKernel, gconv_forward, group_pool

CHECKPOINT_MAGIC = b"REFNETv1"
CHECKPOINT_VERSION = 1

VARIANTS = ("pooled", "unpooled", "post_pool_cnn")


class CheckpointError(IOError):
    """Checkpoint file is malformed or incompatible."""


@dataclass(frozen=True)
class NetConfig:
    """Architecture knobs; defaults give a 64-dim descriptor for C_8."""

    group_order: int = 8
    channels: tuple = (32, 64, 128, 256, 512)
    kernel_size: int = 3
    head_width: int = 64
    variant: str = "pooled"
    post_pool_width: int = 64
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.group_order < 1:
            raise ValueError(f"group order must be >= 1, got {self.group_order}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.kernel_size % 2 != 1:
            raise ValueError("backbone kernel size must be odd for same-size output")
        for c in self.channels:
            if c % self.group_order != 0:
                raise ValueError(
                    f"channel count {c} not divisible by group order {self.group_order}")

    @property
    def multiplicities(self):
        return tuple(c // self.group_order for c in self.channels)

    @property
    def descriptor_dim(self):
        return self.channels[-1] // self.group_order

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class NetOutput:
    """Per-pixel network outputs, all spatially aligned with the input."""

    descriptors: T.Tensor    # [B, D, H, W], unit channel vectors
    reliability: T.Tensor    # [B, 1, H, W], in (0, 1)
    repeatability: T.Tensor  # [B, 1, H, W], >= 0
    unpooled: T.Tensor | None = None  # [B, D*n, H, W] pre-pool features


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class EquivariantFeatureNet:
    """Rotation-equivariant local feature extractor.

    A loaded model is immutable for inference and safe to share across
    threads; training mutates parameters between forward passes only.
    """

    def __init__(self, config=None, seed=0):
        self.config = config or NetConfig()
        self.step = 0
        self.params = {}
        self._buffers = {}
        self._build(np.random.default_rng(seed))

    # -- construction -------------------------------------------------

    def _add_param(self, name, value):
        t = T.Tensor(value, requires_grad=True, dtype=np.float32)
        self.params[name] = t
        return t

    def _add_buffer(self, name, value):
        self._buffers[name] = np.asarray(value, dtype=np.float32)

    def _build(self, rng):
        cfg = self.config
        n = cfg.group_order
        k = cfg.kernel_size
        in_ch = 3
        for i, mult in enumerate(cfg.multiplicities):
            self._add_param(f"backbone.{i}.base", _uniform_init(rng, (mult, in_ch, k, k), in_ch * k * k))
            self._add_param(f"backbone.{i}.bias", np.zeros(mult, dtype=np.float32))
            self._add_param(f"backbone.{i}.bn.gamma", np.ones(mult, dtype=np.float32))
            self._add_param(f"backbone.{i}.bn.beta", np.zeros(mult, dtype=np.float32))
            self._add_buffer(f"backbone.{i}.bn.running_mean", np.zeros(mult))
            self._add_buffer(f"backbone.{i}.bn.running_var", np.ones(mult))
            in_ch = mult * n
        d = cfg.descriptor_dim
        head_in = cfg.post_pool_width if cfg.variant == "post_pool_cnn" else d
        if cfg.variant == "post_pool_cnn":
            pin = d
            for i in range(3):
                self._add_param(f"post_pool.{i}.weight",
                                _uniform_init(rng, (cfg.post_pool_width, pin, 2, 2), pin * 4))
                self._add_param(f"post_pool.{i}.bias", np.zeros(cfg.post_pool_width, dtype=np.float32))
                pin = cfg.post_pool_width
        for head, out_ch in (("reliability", 2), ("repeatability", 1)):
            w = cfg.head_width
            self._add_param(f"{head}.0.weight", _uniform_init(rng, (w, head_in, 3, 3), head_in * 9))
            self._add_param(f"{head}.0.bias", np.zeros(w, dtype=np.float32))
            self._add_param(f"{head}.1.weight", _uniform_init(rng, (out_ch, w, 3, 3), w * 9))
            self._add_param(f"{head}.1.bias", np.zeros(out_ch, dtype=np.float32))

    # -- shape bookkeeping ---------------------------------------------

    @property
    def group(self):
        return GroupSpec(self.config.group_order)

    @property
    def receptive_radius(self):
        r = len(self.config.channels) * (self.config.kernel_size // 2)
        if self.config.variant == "post_pool_cnn":
            r += 3
        return r + 2 * 1  # two k=3 head layers

    @property
    def min_image_size(self):
        return 2 * self.receptive_radius + 1

    def parameters(self):
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- forward pieces -------------------------------------------------

    def _batchnorm(self, x, layer, training):
        """Orientation-shared batch norm: one statistic per field.

        Sharing statistics and affine parameters across the n orientation
        channels of a field is required for equivariance.
        """
        cfg = self.config
        n = cfg.group_order
        gamma = self.params[f"{layer}.gamma"]
        beta = self.params[f"{layer}.beta"]
        if not training:
            mean = np.repeat(self._buffers[f"{layer}.running_mean"], n)
            var = np.repeat(self._buffers[f"{layer}.running_var"], n)
            gamma_c = T.repeat_interleave(gamma, n) if n > 1 else gamma
            beta_c = T.repeat_interleave(beta, n) if n > 1 else beta
            return T.batchnorm_infer(x, mean, var, gamma_c, beta_c, cfg.bn_eps)
        B, C, H, W = x.shape
        m = C // n
        r = T.reshape(x, (B, m, n, H, W))
        mu = T.reduce_mean(r, axis=(0, 2, 3, 4), keepdims=True)
        cen = T.sub(r, mu)
        var = T.reduce_mean(T.mul(cen, cen), axis=(0, 2, 3, 4), keepdims=True)
        inv = T.div(1.0, T.sqrt(T.add(var, cfg.bn_eps)))
        xn = T.mul(cen, inv)
        gshape = (1, m, 1, 1, 1)
        out = T.add(T.mul(xn, T.reshape(gamma, gshape)), T.reshape(beta, gshape))
        mom = cfg.bn_momentum
        cnt = B * n * H * W
        batch_mean = mu.data.reshape(m)
        batch_var = var.data.reshape(m) * (cnt / max(1, cnt - 1))
        rm = self._buffers[f"{layer}.running_mean"]
        rv = self._buffers[f"{layer}.running_var"]
        self._buffers[f"{layer}.running_mean"] = ((1 - mom) * rm + mom * batch_mean).astype(np.float32)
        self._buffers[f"{layer}.running_var"] = ((1 - mom) * rv + mom * batch_var).astype(np.float32)
        return T.reshape(out, (B, C, H, W))

    def backbone(self, image, training=False):
        """Image [B,3,H,W] -> regular feature field, same spatial size."""
        cfg = self.config
        g = self.group
        f = FeatureField(image, FieldType(g, "trivial", 3))
        for i, mult in enumerate(cfg.multiplicities):
            kern = SteerableKernel(self.params[f"backbone.{i}.base"], f.field_type, mult)
            f = gconv_forward(f, kern, self.params[f"backbone.{i}.bias"])
            x = self._batchnorm(f.tensor, f"backbone.{i}.bn", training)
            f = FeatureField(T.relu(x), f.field_type)
        return f

    def _head(self, x, head):
        h = T.conv2d(x, self.params[f"{head}.0.weight"], self.params[f"{head}.0.bias"],
                     stride=1, padding=1)
        h = T.relu(h)
        return T.conv2d(h, self.params[f"{head}.1.weight"], self.params[f"{head}.1.bias"],
                        stride=1, padding=1)

    def _post_pool_stack(self, x):
        # size-2 filters with top-left zero pad keep the map size per layer
        for i in range(3):
            x = T.pad2d(x, 1, 0, 1, 0)
            x = T.conv2d(x, self.params[f"post_pool.{i}.weight"], self.params[f"post_pool.{i}.bias"],
                         stride=1, padding=0)
            x = T.relu(x)
        return x

    def forward(self, image, training=False):
        """Run the network; image values are expected in [0, 1]."""
        if image.ndim != 4 or image.shape[1] != 3:
            raise T.ShapeMismatchError(f"expected [B,3,H,W] image, got {image.shape}")
        if min(image.shape[2], image.shape[3]) < self.min_image_size:
            raise ValueError(
                f"image {image.shape[2]}x{image.shape[3]} smaller than the receptive-field "
                f"minimum {self.min_image_size}")
        feats = self.backbone(image, training=training)
        pooled = group_pool(feats).tensor
        if self.config.variant == "post_pool_cnn":
            head_in = self._post_pool_stack(pooled)
            descriptors = T.l2_normalize_channel(head_in)
        else:
            head_in = pooled
            descriptors = T.l2_normalize_channel(pooled)
        rel_logits = self._head(head_in, "reliability")
        reliability = T.take_channels(T.softmax_channel(rel_logits), 1, 2)
        repeatability = T.softplus(self._head(head_in, "repeatability"))
        unpooled = feats.tensor if self.config.variant == "unpooled" else None
        return NetOutput(descriptors, reliability, repeatability, unpooled)

    def __call__(self, image, training=False):
        return self.forward(image, training=training)


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

def save_checkpoint(model, path):
    """Write model parameters and buffers; round trips are bit exact."""
    names = list(model.params.keys()) + list(model._buffers.keys())
    arrays = {n: model.params[n].data if n in model.params else model._buffers[n] for n in names}
    manifest = []
    offset = 0
    for n in names:
        a = arrays[n]
        if a.dtype != np.float32:
            raise CheckpointError(f"checkpoint tensors must be float32, {n} is {a.dtype}")
        nbytes = a.size * 4
        manifest.append({"name": n, "shape": list(a.shape), "offset": offset,
                         "kind": "param" if n in model.params else "buffer"})
        offset += nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "step": model.step,
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes())


def load_checkpoint(path, expected_config=None):
    """Read a checkpoint; optionally insist on a matching configuration."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(
                f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        raw = f.read(8)
        if len(raw) < 8:
            raise CheckpointError(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<Q", raw)
        blob = f.read(hlen)
        if len(blob) < hlen:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable header: {e}") from e
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unknown checkpoint version {header.get('version')}, "
                f"this build reads version {CHECKPOINT_VERSION}")
        config = NetConfig.from_dict(header["config"])
        if expected_config is not None:
            if expected_config.group_order != config.group_order:
                raise CheckpointError(
                    f"{path}: checkpoint was trained for group order {config.group_order} "
                    f"but group order {expected_config.group_order} was requested")
            if expected_config != config:
                raise CheckpointError(f"{path}: checkpoint config {config} does not match "
                                      f"requested config {expected_config}")
        payload = f.read()
    model = EquivariantFeatureNet(config)
    model.step = int(header.get("step", 0))
    for entry in header["tensors"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for tensor {name}")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
        if entry["kind"] == "param":
            if name not in model.params or model.params[name].shape != shape:
                raise CheckpointError(f"{path}: unexpected parameter {name} with shape {shape}")
            model.params[name].data = arr
        else:
            if name not in model._buffers:
                raise CheckpointError(f"{path}: unexpected buffer {name}")
            model._buffers[name] = arr
    return model
