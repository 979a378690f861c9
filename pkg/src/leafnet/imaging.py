"""Raster decoding, bilinear resizing and training-time augmentation.

Binary/ASCII PPM (P6/P3) is decoded natively. Other formats go through Pillow
when it is installed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from .errors import ContractError, ImageDecodeError
from .tensor import Tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _ppm_tokens(buf: bytes, count: int, pos: int):
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        tokens.append(buf[start:pos])
    return tokens, pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode P6/P3 bytes to float32 [H, W, 3] in [0, 1]."""
    magic = buf[:2]
    if magic not in (b"P6", b"P3"):
        raise ValueError("not a PPM file")
    (w, h, maxval), pos = _ppm_tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ValueError(f"bad PPM header {w}x{h} maxval {maxval}")
    if magic == b"P6":
        pos += 1  # single whitespace byte before raster
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = w * h * 3 * dtype.itemsize
        raster = buf[pos : pos + need]
        if len(raster) < need:
            raise ValueError("truncated raster")
        arr = np.frombuffer(raster, dtype=dtype).reshape(h, w, 3)
    else:
        values, _ = _ppm_tokens(buf, w * h * 3, pos)
        arr = np.array([int(v) for v in values]).reshape(h, w, 3)
    return arr.astype(np.float32) / np.float32(maxval)


def encode_ppm(rgb: np.ndarray) -> bytes:
    """Encode [H, W, 3] values in [0, 1] (or uint8) as binary P6."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def write_ppm(path, rgb: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(rgb))


def read_rgb(path) -> np.ndarray:
    """Decode any supported raster file to float32 [H, W, 3] in [0, 1]."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise ImageDecodeError(path, exc.strerror or str(exc)) from exc
    if buf[:2] in (b"P6", b"P3"):
        try:
            return decode_ppm(buf)
        except ValueError as exc:
            raise ImageDecodeError(path, str(exc)) from None
    try:
        from PIL import Image
    except ImportError:
        raise ImageDecodeError(path, "only PPM is supported without Pillow") from None
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except Exception as exc:  # Pillow raises a zoo of exception types
        raise ImageDecodeError(path, str(exc)) from None
    return arr / np.float32(255.0)


def _resize_axis(img: np.ndarray, out_size: int, axis: int) -> np.ndarray:
    in_size = img.shape[axis]
    if in_size == out_size:
        return img
    scale = in_size / out_size
    # half-pixel centres, edges clamped
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = (src - lo).astype(img.dtype)
    shape = [1] * img.ndim
    shape[axis] = out_size
    frac = frac.reshape(shape)
    a = np.take(img, lo, axis=axis)
    b = np.take(img, hi, axis=axis)
    return a * (1 - frac) + b * frac


def resize_bilinear(chw: np.ndarray, size: Union[int, Tuple[int, int]]) -> np.ndarray:
    """Bilinear resize of a [C, H, W] array with half-pixel sample centres."""
    oh, ow = (size, size) if isinstance(size, int) else size
    out = _resize_axis(chw, oh, 1)
    return _resize_axis(out, ow, 2)


def load_image(path, target_resolution: Union[int, Tuple[int, int]] = 224) -> Tensor:
    """Decode, scale to [0, 1] and resize to [3, R, R]."""
    rgb = read_rgb(path)
    chw = np.ascontiguousarray(rgb.transpose(2, 0, 1))
    return Tensor(resize_bilinear(chw, target_resolution), dtype=np.float32)


@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.0
    max_rotate_deg: float = 10.0
    brightness_delta: float = 0.2

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0)


def hflip(chw: np.ndarray) -> np.ndarray:
    return chw[:, :, ::-1].copy()


def vflip(chw: np.ndarray) -> np.ndarray:
    return chw[:, ::-1, :].copy()


def rotate(chw: np.ndarray, degrees: float) -> np.ndarray:
    from scipy import ndimage

    out = ndimage.rotate(chw, degrees, axes=(2, 1), reshape=False, order=1, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(chw.dtype, copy=False)


def augment(img, config: AugmentConfig, rng: np.random.Generator):
    """Random flips, small rotation and brightness shift of a [3, H, W] image in [0, 1].

    The brightness shift is a single additive offset in ``[-delta, delta]``
    followed by clipping to [0, 1]. Accepts and returns either ndarray or Tensor.
    """
    as_tensor_out = isinstance(img, Tensor)
    x = img.data if as_tensor_out else np.asarray(img)
    out = x
    # draw every random number unconditionally so the stream position is config-independent
    do_h, do_v = rng.random() < config.hflip_prob, rng.random() < config.vflip_prob
    angle = rng.uniform(-1.0, 1.0) * config.max_rotate_deg
    shift = rng.uniform(-1.0, 1.0) * config.brightness_delta
    if do_h:
        out = hflip(out)
    if do_v:
        out = vflip(out)
    if angle != 0.0:
        out = rotate(out, angle)
    if shift != 0.0:
        out = np.clip(out + np.asarray(shift, dtype=out.dtype), 0.0, 1.0)
    if out is x:
        out = x.copy()
    return Tensor(out, dtype=x.dtype) if as_tensor_out else out


def normalize(img, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Per-channel ``(x - mean) / std`` over a [3, H, W] or [N, 3, H, W] array."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ContractError("normalization std components must be > 0")
    as_tensor_out = isinstance(img, Tensor)
    x = img.data if as_tensor_out else np.asarray(img)
    shape = (-1, 1, 1)
    out = ((x - mean.reshape(shape)) / std.reshape(shape)).astype(x.dtype)
    return Tensor(out, dtype=x.dtype) if as_tensor_out else out
