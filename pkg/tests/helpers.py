"""Shared test oracles: naive reference implementations and gradient checks.

Everything here is deliberately independent of the library's fast paths:
the convolution oracle is a 6-nested-loop sum, the gradient oracle is
central finite differences, matching oracles are exhaustive scans.
"""

import numpy as np

from rotfeat import tensor as T


def conv2d_naive(x, w, bias=None, stride=1, padding=0):
    """Direct 6-loop cross-correlation reference."""
    B, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    xp = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((B, Co, Ho, Wo))
    for b in range(B):
        for o in range(Co):
            for y in range(Ho):
                for xo in range(Wo):
                    acc = 0.0
                    for i in range(Ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, i, u, v] * xp[b, i, y * stride + u, xo * stride + v]
                    out[b, o, y, xo] = acc + (bias[o] if bias is not None else 0.0)
    return out


def fd_gradcheck(fn, tensors, h=1e-3, rtol=1e-3, widen_below=1e-4, widen_to=1e-2):
    """Central finite differences vs tape gradients, elementwise.

    fn(*tensors) must return a scalar Tensor. Tensors should be float64
    for a clean comparison. Relative error must stay below rtol, widened
    to widen_to wherever |analytic| < widen_below.
    """
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    with T.Tape() as tape:
        loss = fn(*tensors)
    T.backward(tape, loss)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "no gradient reached a leaf"
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(*tensors).item()
            flat[i] = orig - h
            dn = fn(*tensors).item()
            flat[i] = orig
            fd = (up - dn) / (2 * h)
            a = gflat[i]
            denom = max(abs(a), abs(fd), 1e-12)
            err = abs(a - fd) / denom
            tol = widen_to if abs(a) < widen_below else rtol
            assert err <= tol, f"gradient mismatch at flat index {i}: analytic={a}, fd={fd}, rel={err}"
            worst = max(worst, err)
    return worst


def rand_tensor(rng, shape, scale=1.0, dtype=np.float64):
    return T.Tensor(rng.standard_normal(shape) * scale, dtype=dtype)


def max_abs(a, b=None):
    if b is None:
        return float(np.max(np.abs(a)))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
