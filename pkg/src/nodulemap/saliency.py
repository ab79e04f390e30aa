"""Attention maps over the final convolutional features.

Three map families share one output contract (raw map at feature
resolution, min-max normalized bilinear upsample to 32x32):

* ``cam``: weighs each final feature map by the class column of the
  global-average-pool classifier.
* ``sam_map``: same weighting but with the per-channel-head classifier
  weights, valid for the per-channel head with or without the
  high-level branch (sum fusion only; concatenation has no per-map
  weights and raises MapUndefinedError).
* ``gradcam``: weighs maps by the spatial mean of the class logit's
  gradient, then clamps negative evidence with ReLU.

Maps are computed per sample. Export is 8-bit binary PGM (P5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, GraphError, MapUndefinedError, ShapeError
from .model import INPUT_SIZE, Model
from .tensor import Tensor, mul, no_grad, tsum

UPSAMPLED_SIZE = INPUT_SIZE
_FLAT_EPS = 1e-12


@dataclass
class AttentionMap:
    method: str
    class_id: int
    raw: np.ndarray        # feature-resolution map, unnormalized
    upsampled: np.ndarray  # 32x32, values in [0, 1]


# ---------------------------------------------------------------------
# interpolation and normalization
# ---------------------------------------------------------------------


def bilinear_sample(img: np.ndarray, y: float, x: float) -> float:
    """Bilinearly interpolate img at continuous pixel coordinates (y, x)."""
    h, w = img.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(y), int(x)
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return float(top * (1 - fy) + bot * fy)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Endpoint-aligned bilinear resize (corners map to corners)."""
    h, w = img.shape
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.array([(h - 1) / 2.0])
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.array([(w - 1) / 2.0])
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = img[np.ix_(y0, x0)]
    tr = img[np.ix_(y0, x1)]
    bl = img[np.ix_(y1, x0)]
    br = img[np.ix_(y1, x1)]
    return (tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx + bl * fy * (1 - fx) + br * fy * fx)


def normalize_upsample(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize then upsample to 32x32; a flat map becomes all zeros."""
    if raw.ndim != 2:
        raise ShapeError(f"attention map must be 2-D, got shape {raw.shape}")
    raw64 = raw.astype(np.float64)
    span = raw64.max() - raw64.min()
    if not np.isfinite(span):
        raise ShapeError("attention map contains non-finite values")
    if span < _FLAT_EPS:
        return np.zeros((UPSAMPLED_SIZE, UPSAMPLED_SIZE))
    norm = (raw64 - raw64.min()) / span
    up = bilinear_resize(norm, UPSAMPLED_SIZE, UPSAMPLED_SIZE)
    return np.clip(up, 0.0, 1.0)


# ---------------------------------------------------------------------
# map computation
# ---------------------------------------------------------------------


def _single_sample(model: Model, x) -> Tensor:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=model.dtype)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ShapeError(f"attention maps are per-sample; got input shape {arr.shape}")
    return Tensor(arr.astype(model.dtype, copy=False))


def _check_class(class_id: int) -> int:
    if class_id not in (0, 1):
        raise ConfigError(f"class_id must be 0 or 1, got {class_id}")
    return int(class_id)


def _weighted_map(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # features [C,h,w], weights [C]
    return np.tensordot(weights, features, axes=([0], [0]))


def cam(model: Model, x, class_id: int) -> AttentionMap:
    """Class activation map; requires the global-average-pool head."""
    class_id = _check_class(class_id)
    if model.config.head != "cam":
        raise ConfigError(f"cam requires a cam-head model, got head={model.config.head!r}")
    with no_grad():
        fp = model.forward(_single_sample(model, x), training=False)
    raw = _weighted_map(fp.final_features.data[0], model.classifier.w.data[:, class_id])
    return AttentionMap("cam", class_id, raw, normalize_upsample(raw))


def sam_map(model: Model, x, class_id: int) -> AttentionMap:
    """Per-channel-head attention map (sum-fusion weights over final features)."""
    class_id = _check_class(class_id)
    if model.config.head not in ("sam", "hesam"):
        raise ConfigError(f"sam_map requires a sam or hesam head, got {model.config.head!r}")
    weights = model.attention_weights()  # raises MapUndefinedError for concat fusion
    with no_grad():
        fp = model.forward(_single_sample(model, x), training=False)
    raw = _weighted_map(fp.final_features.data[0], weights[:, class_id])
    return AttentionMap("sam", class_id, raw, normalize_upsample(raw))


def gradcam(model: Model, x, class_id: int) -> AttentionMap:
    """Gradient-weighted map: ReLU over maps weighted by mean logit gradients."""
    class_id = _check_class(class_id)
    xt = _single_sample(model, x)
    fp = model.forward(xt, training=False)
    if not fp.logits.requires_grad:
        raise GraphError("gradcam needs gradients; the model is an inference-only snapshot")
    mask = np.zeros(fp.logits.shape, dtype=fp.logits.dtype)
    mask[0, class_id] = 1.0
    tsum(mul(fp.logits, Tensor(mask))).backward()
    alpha = fp.final_features.grad[0].mean(axis=(1, 2))  # spatial mean per channel
    raw = np.maximum(_weighted_map(fp.final_features.data[0], alpha), 0.0)
    model.param_set().zero_grad()  # leave the model reusable for training
    return AttentionMap("gradcam", class_id, raw, normalize_upsample(raw))


def compute_map(model: Model, x, method: str, class_id: int) -> AttentionMap:
    try:
        fn = {"cam": cam, "sam": sam_map, "gradcam": gradcam}[method]
    except KeyError:
        raise ConfigError(f"unknown map method {method!r}; pick cam, sam or gradcam") from None
    return fn(model, x, class_id)


# ---------------------------------------------------------------------
# PGM export
# ---------------------------------------------------------------------


def write_pgm(path, img: np.ndarray) -> None:
    """Write a [0,1] float image as binary PGM (P5, maxval 255)."""
    if img.ndim != 2:
        raise ShapeError(f"PGM image must be 2-D, got shape {img.shape}")
    quant = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = quant.shape
    with open(path, "wb") as fp:
        fp.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fp.write(quant.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by write_pgm back to [0,1] floats."""
    with open(path, "rb") as fp:
        data = fp.read()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise FormatError(f"not a maxval-255 binary PGM: {path}")
    try:
        w, h = (int(v) for v in parts[1].split())
    except ValueError as exc:
        raise FormatError(f"bad PGM dimensions in {path}") from exc
    if w <= 0 or h <= 0:
        raise FormatError(f"bad PGM dimensions {w}x{h} in {path}")
    if len(parts[3]) != h * w:
        raise FormatError(f"PGM payload is {len(parts[3])} bytes, expected {h * w}: {path}")
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    return pixels.reshape(h, w).astype(np.float64) / 255.0


def map_filename(sample: int, method: str, class_id: int) -> str:
    return f"{sample}_{method}_{class_id}.pgm"


def composite(input_slice: np.ndarray, amap: AttentionMap) -> np.ndarray:
    """Side-by-side panel: normalized input slice | white separator | map."""
    if input_slice.shape != (INPUT_SIZE, INPUT_SIZE):
        raise ShapeError(f"input slice must be {INPUT_SIZE}x{INPUT_SIZE}, got {input_slice.shape}")
    lo, hi = float(input_slice.min()), float(input_slice.max())
    left = (input_slice - lo) / (hi - lo) if hi > lo else np.zeros_like(input_slice, dtype=np.float64)
    sep = np.ones((INPUT_SIZE, 1))
    return np.hstack([left, sep, amap.upsampled])
