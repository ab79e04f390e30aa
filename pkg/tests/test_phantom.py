"""Phantom generator properties, the dataset container and NODV1 files."""

import struct

import numpy as np
import numpy.testing as npt
import pytest

from nodulemap.errors import ConfigError, FormatError, ShapeError
from nodulemap.phantom import (NoduleDataset, PhantomSpec, compactness,
                               generate_dataset, generate_phantom,
                               kfold_split, make_channels, polar_mask,
                               read_dataset, write_dataset)


def _dilate(mask: np.ndarray) -> np.ndarray:
    """3x3 dilation without wrap-around."""
    padded = np.pad(mask, 1)
    out = np.zeros_like(mask)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out |= padded[1 + dy:1 + dy + mask.shape[0], 1 + dx:1 + dx + mask.shape[1]]
    return out


# -- single phantoms -----------------------------------------------------


def test_phantom_shape_range_and_meta():
    vol, meta = generate_phantom(1, np.random.default_rng(0))
    assert vol.shape == (21, 32, 32)
    assert vol.dtype == np.float32
    assert vol.min() >= 0.0 and vol.max() <= 1.0
    assert meta["label"] == 1
    assert meta["r_theta"].shape == (720,)
    assert 5.0 <= meta["r0"] <= 9.0
    with pytest.raises(ConfigError):
        generate_phantom(2, np.random.default_rng(0))


def test_phantom_is_deterministic_per_seed():
    for label in (0, 1):
        a, ma = generate_phantom(label, np.random.default_rng(99))
        b, mb = generate_phantom(label, np.random.default_rng(99))
        assert a.tobytes() == b.tobytes()
        npt.assert_array_equal(ma["r_theta"], mb["r_theta"])
        c, _ = generate_phantom(label, np.random.default_rng(100))
        assert a.tobytes() != c.tobytes()


def test_nodule_fades_toward_volume_ends():
    vol, _ = generate_phantom(0, np.random.default_rng(5))
    area = (vol > 0.35).sum(axis=(1, 2))
    mid = 21 // 2
    assert area[mid] > 20
    assert area[0] == 0 and area[-1] == 0


def test_benign_outline_is_convex_within_one_voxel():
    """Midpoints of in-mask pixel pairs must stay inside the dilated mask."""
    pair_rng = np.random.default_rng(123)
    for seed in range(20):
        _, meta = generate_phantom(0, np.random.default_rng(seed))
        mask = polar_mask(meta)
        allowed = _dilate(mask)
        ys, xs = np.nonzero(mask)
        i = pair_rng.integers(0, ys.size, size=400)
        j = pair_rng.integers(0, ys.size, size=400)
        my = np.rint((ys[i] + ys[j]) / 2.0).astype(int)
        mx = np.rint((xs[i] + xs[j]) / 2.0).astype(int)
        bad = (~allowed[my, mx]).sum()
        assert bad == 0, f"benign seed {seed}: {bad} midpoints fall outside the outline"


def test_spiky_outlines_separate_by_compactness():
    scores = {0: [], 1: []}
    for label in (0, 1):
        for seed in range(40):
            _, meta = generate_phantom(label, np.random.default_rng(1000 + seed))
            scores[label].append(compactness(polar_mask(meta)))
    benign = np.array(scores[0])
    malignant = np.array(scores[1])
    assert malignant.mean() > benign.mean()
    # best single threshold on 80 samples must reach at least 90 percent
    values = np.sort(np.concatenate([benign, malignant]))
    cuts = (values[:-1] + values[1:]) / 2.0
    best = max(((benign <= c).sum() + (malignant > c).sum()) / 80.0 for c in cuts)
    assert best >= 0.90, f"compactness stump only reaches {best:.3f}"


def test_compactness_square_arithmetic():
    mask = np.zeros((16, 16), dtype=bool)
    mask[3:13, 3:13] = True  # 10x10 square: 100 px area, 40 boundary edges
    assert compactness(mask) == pytest.approx(40 * 40 / (4 * np.pi * 100))
    with pytest.raises(ShapeError):
        compactness(np.zeros((8, 8), dtype=bool))


def test_polar_mask_circle_case():
    meta = {"center": (15.5, 15.5), "r_theta": np.full(720, 7.0)}
    mask = polar_mask(meta)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    want = np.hypot(yy - 15.5, xx - 15.5) <= 7.0
    npt.assert_array_equal(mask, want)


# -- channel modes -------------------------------------------------------


def test_make_channels_slice_modes():
    vol, meta = generate_phantom(0, np.random.default_rng(7))
    full = make_channels(vol, meta, 21)
    npt.assert_array_equal(full, vol)
    mid = make_channels(vol, meta, 11)
    assert mid.shape == (11, 32, 32)
    npt.assert_array_equal(mid, vol[5:16])
    one = make_channels(vol, meta, 1)
    assert one.shape == (1, 32, 32)
    npt.assert_array_equal(one[0], vol[10])
    with pytest.raises(ConfigError):
        make_channels(vol, meta, 5)


def test_make_channels_multiscale_is_centered():
    vol, meta = generate_phantom(0, np.random.default_rng(8))
    multi = make_channels(vol, meta, 3)
    assert multi.shape == (3, 32, 32)
    assert multi.dtype == np.float32
    # tighter crops magnify the nodule: foreground fraction shrinks with scale
    fracs = [(p > 0.35).mean() for p in multi]
    assert fracs[0] >= fracs[1] >= fracs[2]
    assert fracs[0] > (vol[10] > 0.35).mean()


# -- datasets ------------------------------------------------------------


def test_generate_dataset_counts_and_determinism():
    ds = generate_dataset(10, 1, master_seed=42)
    assert len(ds) == 10
    assert ds.samples.shape == (10, 1, 32, 32)
    assert (ds.labels == 1).sum() == 5
    odd = generate_dataset(11, 1, master_seed=42)
    assert (odd.labels == 1).sum() == 5 and (odd.labels == 0).sum() == 6
    again = generate_dataset(10, 1, master_seed=42)
    assert ds.samples.tobytes() == again.samples.tobytes()
    npt.assert_array_equal(ds.labels, again.labels)
    with pytest.raises(ConfigError):
        generate_dataset(0, 1, master_seed=42)


def test_generate_dataset_offset_changes_stream():
    a = generate_dataset(6, 1, master_seed=7, offset=0)
    b = generate_dataset(6, 1, master_seed=7, offset=6)
    assert a.samples.tobytes() != b.samples.tobytes()


def test_dataset_subset_keeps_alignment():
    ds = generate_dataset(8, 1, master_seed=3, keep_metas=True)
    sub = ds.subset([5, 2])
    npt.assert_array_equal(sub.labels, ds.labels[[5, 2]])
    npt.assert_array_equal(sub.samples, ds.samples[[5, 2]])
    assert sub.metas[0]["r0"] == ds.metas[5]["r0"]
    assert len(sub) == 2


def test_dataset_container_validation():
    with pytest.raises(ShapeError):
        NoduleDataset(np.zeros((4, 32, 32), np.float32), np.zeros(4, np.int64))
    with pytest.raises(ShapeError):
        NoduleDataset(np.zeros((4, 1, 32, 32), np.float32), np.zeros(3, np.int64))


def test_nodv1_roundtrip_is_byte_identical(tmp_path):
    ds = generate_dataset(6, 3, master_seed=11)
    p1 = tmp_path / "a.nod"
    write_dataset(p1, ds)
    back = read_dataset(p1)
    npt.assert_array_equal(back.labels, ds.labels)
    npt.assert_array_equal(back.samples, ds.samples)
    p2 = tmp_path / "b.nod"
    write_dataset(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_nodv1_rejects_malformed_files(tmp_path):
    path = tmp_path / "ds.nod"
    write_dataset(path, generate_dataset(4, 1, master_seed=2))
    blob = bytearray(path.read_bytes())

    bad = tmp_path / "bad.nod"
    bad.write_bytes(b"WRONG" + bytes(blob[5:]))
    with pytest.raises(FormatError):
        read_dataset(bad)

    ver = bytearray(blob)
    ver[5] = 9
    bad.write_bytes(bytes(ver))
    with pytest.raises(FormatError):
        read_dataset(bad)

    bad.write_bytes(bytes(blob[:-7]))
    with pytest.raises(FormatError):
        read_dataset(bad)

    bad.write_bytes(bytes(blob) + b"\x00")
    with pytest.raises(FormatError):
        read_dataset(bad)

    lab = bytearray(blob)
    lab[5 + 17] = 7  # first sample's label byte
    bad.write_bytes(bytes(lab))
    with pytest.raises(FormatError):
        read_dataset(bad)


def test_nodv1_header_layout(tmp_path):
    ds = generate_dataset(3, 1, master_seed=9)
    path = tmp_path / "ds.nod"
    write_dataset(path, ds)
    blob = path.read_bytes()
    assert blob[:5] == b"NODV1"
    version, n, c, h, w = struct.unpack_from("<BIIII", blob, 5)
    assert (version, n, c, h, w) == (1, 3, 1, 32, 32)
    assert len(blob) == 5 + 17 + 3 * (1 + 4 * 32 * 32)


# -- k-fold splitting ----------------------------------------------------


def test_kfold_partitions_and_stratifies():
    rng = np.random.default_rng(0)
    labels = (rng.uniform(size=23) < 0.4).astype(np.int64)
    folds = kfold_split(labels, k=4, seed=1)
    assert len(folds) == 4
    all_val = np.concatenate([val for _, val in folds])
    npt.assert_array_equal(np.sort(all_val), np.arange(23))
    for cls in (0, 1):
        per_fold = [int((labels[val] == cls).sum()) for _, val in folds]
        assert max(per_fold) - min(per_fold) <= 1
    for train, val in folds:
        assert np.intersect1d(train, val).size == 0
        npt.assert_array_equal(np.sort(np.concatenate([train, val])), np.arange(23))


def test_kfold_is_seeded_and_validates_k():
    labels = np.array([0, 1] * 8)
    a = kfold_split(labels, k=3, seed=5)
    b = kfold_split(labels, k=3, seed=5)
    for (ta, va), (tb, vb) in zip(a, b):
        npt.assert_array_equal(ta, tb)
        npt.assert_array_equal(va, vb)
    with pytest.raises(ConfigError):
        kfold_split(labels, k=1, seed=0)
    with pytest.raises(ConfigError):
        kfold_split(labels, k=17, seed=0)
