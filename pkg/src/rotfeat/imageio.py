"""Image decoding/encoding for the CLI: binary PPM/PGM natively, PNG via PIL.

Images load as [1,3,H,W] float32 tensors scaled to [0,1]; grayscale
sources are replicated across the three channels.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


class ImageFormatError(ValueError):
    """File is not a decodable image."""


def _read_pnm_tokens(buf, count, path):
    """Pull whitespace/comment-separated header tokens from raw bytes."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(buf):
            raise ImageFormatError(f"{path}: truncated header")
        c = buf[i:i + 1]
        if c == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
                j += 1
            tokens.append(buf[i:j])
            i = j
    return tokens, i + 1  # past the single whitespace after the last token


def _load_pnm(raw, path):
    magic = raw[:2]
    channels = 3 if magic == b"P6" else 1
    tokens, offset = _read_pnm_tokens(raw[2:], 3, path)
    width, height, maxval = (int(t) for t in tokens)
    if maxval <= 0 or maxval > 255:
        raise ImageFormatError(f"{path}: unsupported max value {maxval}, only 8-bit supported")
    need = width * height * channels
    data = raw[2 + offset: 2 + offset + need]
    if len(data) < need:
        raise ImageFormatError(f"{path}: truncated pixel data ({len(data)} of {need} bytes)")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width, channels)
    return arr, maxval


def load_image(path):
    """Decode a PNG/PPM/PGM file into a [1,3,H,W] float tensor in [0,1]."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise ImageFormatError(f"{path}: {e}") from e
    if raw[:2] in (b"P5", b"P6"):
        arr, maxval = _load_pnm(raw, path)
        arr = arr.astype(np.float32) / maxval
    else:
        try:
            from PIL import Image
            import io
            with Image.open(io.BytesIO(raw)) as img:
                img = img.convert("RGB") if img.mode not in ("L", "RGB") else img
                arr = np.asarray(img)
        except Exception as e:
            raise ImageFormatError(f"{path}: undecodable image ({e})") from e
        arr = arr.astype(np.float32) / 255.0
        if arr.ndim == 2:
            arr = arr[:, :, None]
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return T.Tensor(arr.transpose(2, 0, 1)[None].copy())


def save_image(tensor, path):
    """Write a [1,3,H,W] or [1,1,H,W] tensor in [0,1] as PPM or PNG."""
    data = tensor.data if isinstance(tensor, T.Tensor) else np.asarray(tensor)
    if data.ndim != 4 or data.shape[0] != 1:
        raise ImageFormatError(f"expected [1,C,H,W], got {data.shape}")
    arr = np.clip(data[0], 0.0, 1.0)
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    img8 = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    path = str(path)
    if path.endswith((".ppm", ".pgm")):
        h, w, _ = img8.shape
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(img8.tobytes())
    else:
        from PIL import Image
        Image.fromarray(img8).save(path)


def resize_image(image, height, width):
    """Bilinear resize using the package's single warp convention.

    The plain axis scaling diag(W/w', H/h') maps output pixels to source
    positions, matching how ground-truth homographies are rescaled.
    """
    _, _, h, w = image.shape
    scale = np.diag([w / width, h / height, 1.0])
    return T.warp_bilinear(image, scale, (height, width))
