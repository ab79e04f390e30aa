"""Synthetic lung-nodule patch generator and dataset container.

Each sample is a 21-slice volume of 32x32 patches holding one nodule.
The in-plane outline is a polar radius profile around a jittered
center: benign profiles are smooth low-order lobes (convex up to
sub-voxel wobble), malignant profiles add 6 to 12 narrow radial spikes
and may carve a cavity or switch to a dimmer ground-glass interior.
Slices away from the center shrink along an ellipsoidal z profile.

Class semantics: label 1 is malignant and is treated as the positive
class throughout.

Datasets are stored in a little-endian binary container (magic NODV1):

    magic "NODV1" | u8 version=1 | u32 count | u32 C | u32 H | u32 W
    then per sample: u8 label | C*H*W float32 values, C-major

Sample generation is deterministic: sample ``i`` of a dataset draws
from a generator seeded with ``master_seed ^ (offset + i)``, so train
and test sets never share a stream as long as their offsets differ.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .saliency import bilinear_resize

MAGIC = b"NODV1"
VERSION = 1
_TWO_PI = 2.0 * np.pi
_N_THETA = 720


@dataclass
class PhantomSpec:
    """Tunable geometry and intensity ranges for the generator."""

    size: int = 32
    depth: int = 21
    radius_range: tuple = (5.0, 9.0)
    center_jitter: float = 1.5
    lobe_amp2: float = 0.08
    lobe_amp3: float = 0.04
    spike_count: tuple = (6, 12)
    spike_amp: tuple = (0.30, 0.60)       # relative to the base radius
    spike_width: tuple = (0.12, 0.25)     # radians
    z_radius: tuple = (6.0, 10.0)         # slices
    edge_softness: float = 0.6
    interior_range: tuple = (0.55, 0.70)
    background: float = 0.10
    field_amp: float = 0.05
    cavity_prob: float = 0.45
    ground_glass_prob: float = 0.35
    noise_sigma: float = 0.02


DEFAULT_SPEC = PhantomSpec()


def _radius_profile(label: int, r0: float, rng: np.random.Generator, spec: PhantomSpec) -> np.ndarray:
    theta = np.linspace(0.0, _TWO_PI, _N_THETA, endpoint=False)
    r = np.full(_N_THETA, r0)
    r += r0 * spec.lobe_amp2 * rng.uniform(0.2, 1.0) * np.sin(2 * theta + rng.uniform(0, _TWO_PI))
    r += r0 * spec.lobe_amp3 * rng.uniform(0.0, 1.0) * np.sin(3 * theta + rng.uniform(0, _TWO_PI))
    if label == 1:
        n_spikes = int(rng.integers(spec.spike_count[0], spec.spike_count[1] + 1))
        for _ in range(n_spikes):
            pos = rng.uniform(0, _TWO_PI)
            width = rng.uniform(*spec.spike_width)
            amp = r0 * rng.uniform(*spec.spike_amp)
            diff = np.angle(np.exp(1j * (theta - pos)))  # wrapped angular distance
            r += amp * np.exp(-0.5 * (diff / width) ** 2)
    # keep the outline inside the patch with room for the center jitter
    max_r = spec.size / 2.0 - spec.center_jitter - 1.0
    return np.clip(r, 2.0, max_r)


def generate_phantom(label: int, rng: np.random.Generator, spec: PhantomSpec = DEFAULT_SPEC):
    """Render one labeled volume; returns (volume [depth,size,size], meta)."""
    if label not in (0, 1):
        raise ConfigError(f"label must be 0 or 1, got {label}")
    size, depth = spec.size, spec.depth
    half = (size - 1) / 2.0
    cy = half + rng.uniform(-spec.center_jitter, spec.center_jitter)
    cx = half + rng.uniform(-spec.center_jitter, spec.center_jitter)
    r0 = rng.uniform(*spec.radius_range)
    r_theta = _radius_profile(label, r0, rng, spec)
    zr = rng.uniform(*spec.z_radius)
    interior = rng.uniform(*spec.interior_range)

    ground_glass = bool(label == 1 and rng.uniform() < spec.ground_glass_prob)
    cavity = bool(label == 1 and not ground_glass and rng.uniform() < spec.cavity_prob)
    if ground_glass:
        interior = rng.uniform(0.38, 0.46)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    rho = np.hypot(yy - cy, xx - cx)
    theta = np.mod(np.arctan2(yy - cy, xx - cx), _TWO_PI)
    theta_grid = np.linspace(0.0, _TWO_PI, _N_THETA, endpoint=False)
    r_at = np.interp(theta, theta_grid, r_theta, period=_TWO_PI)

    zc = depth // 2
    z_scale = np.sqrt(np.clip(1.0 - ((np.arange(depth) - zc) / zr) ** 2, 0.0, None))
    sd = rho[None] - r_at[None] * z_scale[:, None, None]
    weight = 1.0 / (1.0 + np.exp(sd / spec.edge_softness))

    base_field = bilinear_resize(rng.normal(0.0, 1.0, (4, 4)), size, size) * spec.field_amp
    vol = spec.background + base_field[None] + rng.normal(0.0, 0.01, (depth, 1, 1))
    vol = vol + (interior - vol) * weight

    if ground_glass:
        vol += rng.normal(0.0, 0.06, (depth, size, size)) * weight
    if cavity:
        cav_r = 0.35 * r0 * np.maximum(z_scale, 0.15)
        bowl = np.exp(-0.5 * (rho[None] / cav_r[:, None, None]) ** 2)
        vol -= (interior - 0.22) * bowl * weight

    vol += rng.normal(0.0, spec.noise_sigma, vol.shape)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    meta = {
        "label": int(label),
        "center": (float(cy), float(cx)),
        "r0": float(r0),
        "r_theta": r_theta,
        "z_radius": float(zr),
        "cavity": cavity,
        "ground_glass": ground_glass,
    }
    return vol, meta


def polar_mask(meta: dict, size: int = 32) -> np.ndarray:
    """Rasterize the analytic central-slice outline to a boolean mask."""
    cy, cx = meta["center"]
    r_theta = meta["r_theta"]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    rho = np.hypot(yy - cy, xx - cx)
    theta = np.mod(np.arctan2(yy - cy, xx - cx), _TWO_PI)
    theta_grid = np.linspace(0.0, _TWO_PI, r_theta.size, endpoint=False)
    return rho <= np.interp(theta, theta_grid, r_theta, period=_TWO_PI)


def compactness(mask: np.ndarray) -> float:
    """Perimeter-squared over 4-pi-area on a digital mask.

    The perimeter counts 4-neighbor boundary edges, which inflates even
    perfect disks by a constant factor, so the value is only meaningful
    comparatively (spiky outlines score much higher than smooth ones).
    """
    m = mask.astype(bool)
    area = int(m.sum())
    if area == 0:
        raise ShapeError("empty mask has no compactness")
    padded = np.pad(m, 1)
    per = 0
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        per += int(np.sum(padded & ~np.roll(padded, shift, axis=axis)))
    return per * per / (4.0 * np.pi * area)


# ---------------------------------------------------------------------
# channel extraction
# ---------------------------------------------------------------------


def make_channels(volume: np.ndarray, meta: dict, in_channels: int) -> np.ndarray:
    """Reduce a full volume to the model input layout for a channel mode.

    21 keeps every slice, 11 the central eleven, 1 the central slice.
    3 builds a multi-scale stack: square crops of two, three and four
    nodule diameters around the center, each resized back to 32x32.
    """
    depth, size = volume.shape[0], volume.shape[1]
    mid = depth // 2
    if in_channels == 21:
        out = volume
    elif in_channels == 11:
        out = volume[mid - 5:mid + 6]
    elif in_channels == 1:
        out = volume[mid:mid + 1]
    elif in_channels == 3:
        cy, cx = meta["center"]
        diameter = 2.0 * meta["r0"]
        planes = []
        for factor in (2.0, 3.0, 4.0):
            s = int(round(factor * diameter))
            s = max(8, min(size, s))
            y0 = int(round(cy - s / 2.0))
            x0 = int(round(cx - s / 2.0))
            y0 = max(0, min(size - s, y0))
            x0 = max(0, min(size - s, x0))
            crop = volume[mid, y0:y0 + s, x0:x0 + s].astype(np.float64)
            planes.append(bilinear_resize(crop, size, size))
        out = np.stack(planes)
    else:
        raise ConfigError(f"unsupported channel mode {in_channels}; pick 1, 3, 11 or 21")
    return np.ascontiguousarray(out, dtype=np.float32)


# ---------------------------------------------------------------------
# dataset container and binary format
# ---------------------------------------------------------------------


@dataclass
class NoduleDataset:
    samples: np.ndarray               # [N, C, H, W] float32
    labels: np.ndarray                # [N] int64, 1 = malignant
    metas: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.samples.ndim != 4:
            raise ShapeError(f"samples must be [N,C,H,W], got shape {self.samples.shape}")
        if self.labels.shape != (self.samples.shape[0],):
            raise ShapeError(
                f"labels shape {self.labels.shape} does not match {self.samples.shape[0]} samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    def subset(self, indices) -> "NoduleDataset":
        idx = np.asarray(indices)
        metas = [self.metas[i] for i in idx] if self.metas is not None else None
        return NoduleDataset(self.samples[idx], self.labels[idx], metas)


def generate_dataset(count: int, in_channels: int, master_seed: int, offset: int = 0,
                     spec: PhantomSpec = DEFAULT_SPEC, keep_metas: bool = False) -> NoduleDataset:
    """Generate ``count`` samples with an exact half/half class split.

    Odd counts give the extra sample to the benign class. ``offset``
    shifts the per-sample seeds, so disjoint offset ranges (for example
    a test set offset by the train count) never reuse a stream.
    """
    if count <= 0:
        raise ConfigError(f"count must be positive, got {count}")
    n_mal = count // 2
    labels = np.array([1] * n_mal + [0] * (count - n_mal), dtype=np.int64)
    order = np.random.default_rng(master_seed ^ 0x5F5F5F5F).permutation(count)
    labels = labels[order]
    samples = np.empty((count, in_channels, spec.size, spec.size), dtype=np.float32)
    metas = [] if keep_metas else None
    for i in range(count):
        rng = np.random.default_rng(master_seed ^ (offset + i))
        vol, meta = generate_phantom(int(labels[i]), rng, spec)
        samples[i] = make_channels(vol, meta, in_channels)
        if keep_metas:
            metas.append(meta)
    return NoduleDataset(samples, labels, metas)


def write_dataset(path, dataset: NoduleDataset) -> None:
    n, c, h, w = dataset.samples.shape
    with open(path, "wb") as fp:
        fp.write(MAGIC)
        fp.write(struct.pack("<BIIII", VERSION, n, c, h, w))
        for i in range(n):
            fp.write(struct.pack("<B", int(dataset.labels[i])))
            fp.write(np.ascontiguousarray(dataset.samples[i], dtype="<f4").tobytes())


def read_dataset(path) -> NoduleDataset:
    with open(path, "rb") as fp:
        blob = fp.read()
    if blob[:5] != MAGIC:
        raise FormatError(f"bad dataset magic in {path}")
    if len(blob) < 5 + 17:
        raise FormatError(f"truncated dataset header in {path}")
    version, n, c, h, w = struct.unpack_from("<BIIII", blob, 5)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    sample_bytes = 1 + 4 * c * h * w
    expected = 5 + 17 + n * sample_bytes
    if len(blob) != expected:
        raise FormatError(
            f"dataset payload is {len(blob)} bytes, expected {expected} for {n} samples")
    samples = np.empty((n, c, h, w), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    pos = 5 + 17
    for i in range(n):
        labels[i] = blob[pos]
        if labels[i] not in (0, 1):
            raise FormatError(f"sample {i} has label {labels[i]}, expected 0 or 1")
        pos += 1
        flat = np.frombuffer(blob, dtype="<f4", count=c * h * w, offset=pos)
        samples[i] = flat.reshape(c, h, w)
        pos += 4 * c * h * w
    return NoduleDataset(samples, labels)


def kfold_split(labels: np.ndarray, k: int, seed: int):
    """Stratified k-fold: per-class shuffle, then deal round-robin.

    Returns a list of (train_indices, val_indices) pairs; fold sizes
    differ by at most one within each class.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if k < 2 or k > n:
        raise ConfigError(f"k must be between 2 and the sample count, got k={k} for n={n}")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        for j, sample in enumerate(idx):
            folds[j % k].append(int(sample))
    out = []
    for j in range(k):
        val = np.sort(np.array(folds[j], dtype=np.int64))
        train = np.sort(np.array([s for m in range(k) if m != j for s in folds[m]], dtype=np.int64))
        out.append((train, val))
    return out
