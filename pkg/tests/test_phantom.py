import json

import numpy as np
import pytest

from ftddm.phantom import (CHANNELS, LR_SIZES, METABOLITES, AugmentConfig, PhantomSpec, augment_sample,
                           generate_dataset, generate_phantom, generate_subject, kspace_truncate, load_dataset,
                           make_splits, normalize_map, read_slice, upscaling_factor, write_slice)


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(PhantomSpec(seed=3, size=32))


def test_same_seed_same_subject():
    a = generate_subject(PhantomSpec(seed=11, size=32, n_slices=3))
    b = generate_subject(PhantomSpec(seed=11, size=32, n_slices=3))
    for x, y in zip(a, b):
        assert np.array_equal(x.stack(), y.stack())
    c = generate_subject(PhantomSpec(seed=12, size=32, n_slices=3))
    assert not np.array_equal(a[1].stack(), c[1].stack())


def test_maps_are_normalised_and_masked(phantom):
    m = phantom.mask
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert m.sum() > 16
    for met in METABOLITES:
        v = phantom.maps[met]
        assert v.min() >= 0 and v.max() <= 1
        assert (v[m == 0] == 0).all()
    assert phantom.stack().shape == (len(CHANNELS), 32, 32)
    assert phantom.stack().dtype == np.float32


def test_metabolites_have_distinct_contrast(phantom):
    maps = [phantom.maps[m][phantom.mask > 0] for m in METABOLITES]
    assert not np.allclose(maps[0], maps[2])


def test_normalize_map_percentile():
    v = np.arange(100, dtype=float).reshape(10, 10)
    mask = np.ones((10, 10))
    out = normalize_map(v, mask)
    assert out.max() == 1.0
    assert out[0, 0] == 0.0


# ------------------------------------------------------------ degradation

def test_kspace_identity_at_full_size(phantom):
    x = phantom.maps["NAA"]
    _, zf = kspace_truncate(x, 32)
    assert np.allclose(zf, x, atol=1e-12)


@pytest.mark.parametrize("L", LR_SIZES[:-4])
def test_kspace_idempotent(L):
    rng = np.random.default_rng(L)
    x = rng.random((32, 32))
    _, once = kspace_truncate(x, L)
    _, twice = kspace_truncate(once, L)
    assert np.allclose(once, twice, atol=1e-12)


def test_kspace_outputs_real_and_energy_bounded():
    x = np.random.default_rng(0).random((32, 32))
    coeffs, zf = kspace_truncate(x, 12)
    assert coeffs.shape == (12, 12)
    assert np.isrealobj(zf)
    assert np.linalg.norm(zf) <= np.linalg.norm(x) + 1e-12


def test_kspace_keeps_low_frequencies():
    yy, xx = np.mgrid[0:32, 0:32]
    low = np.cos(2 * np.pi * 2 * xx / 32) + 0.5
    _, zf = kspace_truncate(low, 8)
    assert np.allclose(zf, low, atol=1e-12)
    high = np.cos(2 * np.pi * 10 * xx / 32)
    _, zf = kspace_truncate(high, 8)
    assert np.allclose(zf, 0, atol=1e-12)


def test_kspace_rejects_bad_sizes():
    for L in (7, 0, 34):
        with pytest.raises(ValueError):
            kspace_truncate(np.zeros((32, 32)), L)


def test_kspace_remask(phantom):
    _, zf = kspace_truncate(phantom.maps["tCr"], 16, phantom.mask)
    assert (zf[phantom.mask == 0] == 0).all()


def test_upscaling_factor_mapping():
    assert upscaling_factor(64, 16) == 4.0
    assert upscaling_factor(64, 32) == 2.0
    assert upscaling_factor(64, 8) == 8.0
    assert LR_SIZES[0] == 8 and LR_SIZES[-1] == 32 and len(LR_SIZES) == 13


# ----------------------------------------------------------- augmentation

def test_augmentation_moves_channels_together():
    rng = np.random.default_rng(0)
    img = np.zeros((3, 16, 16))
    img[:, 2:6, 3:9] = 1.0
    mask = img[0].copy()
    cfg = AugmentConfig(p_flip=1.0, p_rotate=0.0, p_translate=1.0)
    out, m = augment_sample(img, mask, rng, cfg)
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])
    assert np.array_equal(out[0] > 0.5, m > 0.5)
    assert m.sum() > 0


def test_augmentation_disabled_is_identity():
    img = np.random.default_rng(1).random((3, 8, 8))
    cfg = AugmentConfig(p_flip=0.0, p_rotate=0.0, p_translate=0.0)
    out, m = augment_sample(img, img[0], np.random.default_rng(0), cfg)
    assert np.array_equal(out, img) and np.array_equal(m, img[0])


# ------------------------------------------------------------------ splits

@pytest.mark.parametrize("n", [5, 16, 23])
def test_splits_are_disjoint_and_cover(n):
    tests = []
    for fold in range(5):
        train, val, test = make_splits(n, fold)
        assert not (set(train) & set(val)) and not (set(train) & set(test)) and not (set(val) & set(test))
        assert sorted(train + val + test) == list(range(n))
        tests += test
    assert sorted(tests) == list(range(n))


def test_splits_validation():
    with pytest.raises(ValueError):
        make_splits(4, 0)
    with pytest.raises(ValueError):
        make_splits(10, 5)


# --------------------------------------------------------------- disk I/O

def test_slice_round_trip(tmp_path):
    arr = np.random.default_rng(0).random((10, 8, 8)).astype(np.float32)
    write_slice(tmp_path / "s.bin", arr)
    assert np.array_equal(read_slice(tmp_path / "s.bin"), arr)
    raw = (tmp_path / "s.bin").read_bytes()
    assert raw[:8] == b"FTDSLICE"
    (tmp_path / "bad.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError):
        read_slice(tmp_path / "bad.bin")


def test_dataset_generation_and_loading(tmp_path):
    generate_dataset(tmp_path / "d", 3, seed=1, n_slices=2, size=16)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["channels"] == list(CHANNELS)
    ds = load_dataset(tmp_path / "d")
    assert ds.data.shape == (6, 10, 16, 16)
    assert ds.size == 16
    assert len(ds.images([0, 2])) == 4 * len(METABOLITES)
    values, mask, t1, flair = ds.sample(3, 2)
    assert values.shape == mask.shape == t1.shape == flair.shape == (16, 16)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
