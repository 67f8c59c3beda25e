import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from takunet.data import (
    TRANSFORMS,
    AugmentationPolicy,
    ImageCache,
    augment,
    batch_iterator,
    decode_image,
    decode_ppm,
    encode_ppm,
    index_dataset,
    make_placeholder_tree,
    make_synthetic_dataset,
    n_test_for,
    read_manifest,
    resize_bilinear,
    save_image,
    write_manifest,
)
from takunet.tensor import save_tensor
from oracles import naive_bilinear_point

# -- indexing -----------------------------------------------------------------------


@pytest.fixture
def tree100(tmp_path):
    make_placeholder_tree(str(tmp_path), {"collapsed": 100, "fire": 100, "Normal": 100})
    return str(tmp_path)


def test_aider_ratios(tree100):
    idx = index_dataset(tree100, seed=0)
    c = idx.counts()
    assert (c["collapsed"]["train"], c["collapsed"]["test"]) == (70, 30)
    assert (c["fire"]["train"], c["fire"]["test"]) == (70, 30)
    assert (c["Normal"]["train"], c["Normal"]["test"]) == (65, 35)


def test_normal_match_case_sensitive_flag(tree100):
    c = index_dataset(tree100, seed=0, case_sensitive=True).counts()
    assert c["Normal"]["test"] == 30


def test_class_ids_sorted(tree100):
    idx = index_dataset(tree100)
    assert idx.classes == ["Normal", "collapsed", "fire"]
    for r in idx.records:
        assert r.path.split(os.sep)[0] == idx.classes[r.label]


def test_split_deterministic_and_seed_dependent(tree100):
    a = index_dataset(tree100, seed=1).records
    b = index_dataset(tree100, seed=1).records
    c = index_dataset(tree100, seed=2).records
    assert a == b
    assert a != c


def test_split_is_partition(tree100):
    idx = index_dataset(tree100, seed=3)
    paths = [r.path for r in idx.records]
    assert len(paths) == len(set(paths)) == 300
    assert sum(idx.split_totals().values()) == 300


@pytest.mark.parametrize("n,pct,expected", [(100, 30, 30), (511, 30, 154), (10, 35, 4), (7, 30, 3), (1, 30, 1)])
def test_n_test_ceil(n, pct, expected):
    assert n_test_for(n, pct) == expected


def test_index_errors(tmp_path):
    with pytest.raises(ValueError):
        index_dataset(str(tmp_path))
    os.makedirs(tmp_path / "empty")
    with pytest.raises(ValueError):
        index_dataset(str(tmp_path))
    with pytest.raises(ValueError):
        index_dataset(str(tmp_path), mode="bogus")


def test_aiderv2_honors_layout(tmp_path):
    make_placeholder_tree(str(tmp_path), {"train": {"a": 5, "b": 3}, "val": {"a": 2, "b": 1}, "test": {"b": 4}})
    idx = index_dataset(str(tmp_path), mode="aiderv2")
    assert idx.split_totals() == {"train": 8, "val": 3, "test": 4}
    assert idx.counts()["b"] == {"train": 3, "val": 1, "test": 4}


def test_manifest_roundtrip(tree100, tmp_path):
    idx = index_dataset(tree100, seed=0)
    path = tmp_path / "m.csv"
    path.write_text(write_manifest(idx))
    back = read_manifest(str(path), root=tree100)
    assert back.classes == idx.classes and back.records == idx.records


# -- decoding -------------------------------------------------------------------------

def test_white_pixel():
    assert np.array_equal(decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff"), np.ones((3, 1, 1), np.float32))


def test_known_bytes_grid():
    body = bytes([0, 51, 102, 153, 204, 255, 10, 20, 30, 255, 0, 128])
    img = decode_ppm(b"P6\n# comment\n2 2\n255\n" + body)
    px = np.array(list(body), np.float32).reshape(2, 2, 3).transpose(2, 0, 1)
    assert np.array_equal(img, px / np.float32(255))
    assert img[1, 0, 0] == np.float32(51) / np.float32(255)


def test_sixteen_bit_ppm():
    img = decode_ppm(b"P6 1 1 65535\n" + bytes([0xFF, 0xFF, 0x80, 0x00, 0x00, 0x00]))
    assert img[0, 0, 0] == 1.0 and img[2, 0, 0] == 0.0
    assert img[1, 0, 0] == np.float32(0x8000) / np.float32(65535)


def test_ppm_errors():
    with pytest.raises(ValueError):
        decode_ppm(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(EOFError):
        decode_ppm(b"P6\n2 2\n255\n\x00\x00")


def test_raw_tensor_roundtrip(tmp_path, rng):
    x = rng.random((3, 5, 4)).astype(np.float32)
    p = str(tmp_path / "x.tktn")
    save_tensor(p, x)
    assert np.array_equal(decode_image(p), x)


def test_unsupported_format(tmp_path):
    p = tmp_path / "x.ppm"
    p.write_bytes(b"GIF89a")
    with pytest.raises(ValueError):
        decode_image(str(p))


def test_ppm_encode_decode(rng):
    img = rng.integers(0, 256, (3, 4, 6)).astype(np.float32) / 255
    assert np.allclose(decode_ppm(encode_ppm(img)), img, atol=1e-7)


def test_decode_is_pure(tmp_path, rng):
    p = str(tmp_path / "a.ppm")
    save_image(p, rng.random((3, 4, 4)))
    assert np.array_equal(decode_image(p), decode_image(p))


# -- resizing -------------------------------------------------------------------------

def test_resize_upscale_row():
    out = resize_bilinear(np.array([[[0.0, 1.0]]]), 1, 4)
    assert np.allclose(out[0, 0], [0.0, 0.25, 0.75, 1.0])
    assert np.isclose(out[0, 0, 1:3].mean(), 0.5)


def test_resize_constant_and_identity(rng):
    c = np.full((3, 7, 5), 0.3, np.float32)
    assert np.allclose(resize_bilinear(c, 11, 13), 0.3)
    x = rng.random((3, 6, 6)).astype(np.float32)
    y = resize_bilinear(x, 6, 6)
    assert np.array_equal(x, y) and y is not x


@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(0, 1000))
def test_resize_matches_pointwise_oracle(h, w, oh, ow, seed):
    x = np.random.default_rng(seed).random((2, h, w))
    out = resize_bilinear(x, oh, ow)
    for c in range(2):
        for i in range(oh):
            for j in range(ow):
                sy, sx = (i + 0.5) * h / oh - 0.5, (j + 0.5) * w / ow - 0.5
                assert abs(out[c, i, j] - naive_bilinear_point(x[c], sy, sx)) < 1e-12


def test_resize_bad_extent():
    with pytest.raises(ValueError):
        resize_bilinear(np.zeros((3, 2, 2)), 0, 2)


# -- augmentation -----------------------------------------------------------------------

def test_disabled_policy_is_identity(rng):
    x = rng.random((3, 9, 7)).astype(np.float32)
    assert np.array_equal(augment(x, AugmentationPolicy.disabled(), np.random.default_rng(0)), x)


def test_forced_mirror_flips_columns(rng):
    x = rng.random((3, 5, 6)).astype(np.float32)
    forced = {t: 0.0 for t in TRANSFORMS}
    forced["mirror"] = 1.0
    out = augment(x, AugmentationPolicy(forced=forced), np.random.default_rng(0))
    assert np.array_equal(out, x[:, :, ::-1])


def test_augment_deterministic(rng):
    x = rng.random((3, 16, 16)).astype(np.float32)
    pol = AugmentationPolicy(forced={t: 1.0 for t in TRANSFORMS})
    a = augment(x, pol, np.random.default_rng(9))
    b = augment(x, pol, np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, x)


def test_geometric_fill_is_zero():
    x = np.ones((3, 16, 16), np.float32)
    forced = {t: 0.0 for t in TRANSFORMS}
    forced["rotation"] = 1.0
    out = augment(x, AugmentationPolicy(rotation_deg=45.0, forced=forced), np.random.default_rng(1))
    assert out.min() == 0.0 and out[:, 8, 8].min() == 1.0


def test_unknown_forced_transform():
    with pytest.raises(KeyError):
        augment(np.zeros((3, 2, 2)), AugmentationPolicy(forced={"warp": 1.0}), np.random.default_rng(0))


@settings(max_examples=1000)
@given(st.integers(0, 2**32 - 1), st.lists(st.floats(0, 1), min_size=len(TRANSFORMS), max_size=len(TRANSFORMS)),
       st.booleans())
def test_augment_shape_and_range(seed, probs, force):
    r = np.random.default_rng(seed)
    x = r.random((3, 8, 10)).astype(np.float32)
    pol = AugmentationPolicy(forced=dict(zip(TRANSFORMS, probs)) if force else {})
    out = augment(x, pol, r)
    assert out.shape == x.shape and out.dtype == x.dtype
    assert out.min() >= 0.0 and out.max() <= 1.0


# -- batching ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def synth10(tmp_path_factory):
    root = tmp_path_factory.mktemp("s10")
    make_synthetic_dataset(str(root), [4, 3, 3], num_classes=3, size=(12, 12), seed=0)
    return str(root)


def test_batches_keep_partial(synth10):
    idx = index_dataset(synth10, test_pct=0)
    batches = list(batch_iterator(idx, "train", 4, None, None, (8, 8)))
    assert [len(y) for _, y in batches] == [4, 4, 2]
    assert batches[0][0].shape == (4, 3, 8, 8)
    labels = np.concatenate([y for _, y in batches])
    assert labels.tolist() == [r.label for r in idx.split("train")]


def test_epoch_permutations_differ(synth10):
    idx = index_dataset(synth10, test_pct=0)
    order = lambda e: np.concatenate([x[:, 0, 0, 0] for x, _ in batch_iterator(idx, "train", 4, 5, None, (8, 8), e)])
    assert np.array_equal(order(0), order(0))
    assert not np.array_equal(order(0), order(1))


def test_augmentation_only_on_train(synth10):
    idx = index_dataset(synth10, test_pct=50)
    pol = AugmentationPolicy(forced={t: 1.0 for t in TRANSFORMS})
    plain = list(batch_iterator(idx, "test", 8, None, None, (12, 12)))
    aug = list(batch_iterator(idx, "test", 8, None, pol, (12, 12)))
    assert all(np.array_equal(a[0], b[0]) for a, b in zip(plain, aug))
    tplain = next(batch_iterator(idx, "train", 8, None, None, (12, 12)))
    taug = next(batch_iterator(idx, "train", 8, None, pol, (12, 12)))
    assert not np.array_equal(tplain[0], taug[0])


def test_io_error_names_path(tmp_path):
    make_placeholder_tree(str(tmp_path), {"a": 1})
    bad = tmp_path / "a" / "00000.ppm"
    bad.write_bytes(b"P6\n4 4\n255\n")
    idx = index_dataset(str(tmp_path), test_pct=0)
    with pytest.raises(EOFError, match="00000.ppm"):
        list(batch_iterator(idx, "train", 1, cache=ImageCache()))


def test_synthetic_classes_distinguishable(tmp_path):
    make_synthetic_dataset(str(tmp_path), 2, num_classes=5, size=(16, 16), seed=0)
    idx = index_dataset(str(tmp_path), test_pct=0)
    x, y = next(batch_iterator(idx, "train", 10, None, None, (16, 16)))
    means = [x[y == k].mean(axis=(0, 2, 3)) for k in range(5)]
    for a in range(5):
        for b in range(a + 1, 5):
            assert np.abs(means[a] - means[b]).max() > 0.05
