import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paddyforge.data import (Dataset, batch_iterator, count_images, decode_ppm, encode_ppm, gen_synthetic_dataset,
                             load_image_dataset, stratified_split)
from paddyforge.errors import ConfigError, FormatError, LoadError, SplitError
from paddyforge.tensor import Shape2D
from oracles import reference_ppm


# -- PPM -------------------------------------------------------------------------


def test_decode_all_white():
    img = decode_ppm(b"P6\n2 2\n255\n" + bytes([255]) * 12)
    assert img.shape == (3, 2, 2) and np.all(img == 1.0)


def test_decode_normalises_by_maxval():
    img = decode_ppm(b"P6\n1 1\n510\n" + bytes([0, 255]) * 3)
    assert np.allclose(img, 0.5)


def test_decode_layout_and_comments():
    buf = b"P6 # a comment\n# another\n3 1\n# before maxval\n255\n" + bytes(range(9))
    img = decode_ppm(buf)
    assert img.shape == (3, 1, 3)
    assert (img[:, 0, 1] * 255).round().tolist() == [3, 4, 5]


@pytest.mark.parametrize("buf, offset", [
    (b"P5\n1 1\n255\n\0", 0),
    (b"P6\n2 2\n255\n" + bytes(11), 22),
    (b"P6\n1 1\n0\n\0\0\0", 8),
    (b"P6\n1 x\n255\n\0\0\0", 5),
    (b"P6\n1 1\n70000\n" + bytes(6), 12),
])
def test_decode_errors_carry_offsets(buf, offset):
    with pytest.raises(FormatError) as exc:
        decode_ppm(buf)
    assert exc.value.offset == offset
    assert f"byte {offset}" in str(exc.value)


@pytest.mark.parametrize("maxval", [255, 65535])
@settings(max_examples=20, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_codec_matches_reference_encoder(maxval, h, w, seed):
    q = np.random.default_rng(seed).integers(0, maxval + 1, (h, w, 3))
    ref = reference_ppm(q, maxval)
    img = decode_ppm(ref)
    assert np.array_equal(np.rint(img.astype(np.float64) * maxval).astype(int), q.transpose(2, 0, 1))
    assert encode_ppm(img, maxval) == ref


def test_read_errors_name_the_file(tmp_path):
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
    (tmp_path / "a" / "ok.ppm").write_bytes(encode_ppm(np.zeros((3, 2, 2))))
    (tmp_path / "b" / "broken.ppm").write_bytes(b"GIF89a")
    with pytest.raises(LoadError, match="broken.ppm"):
        load_image_dataset(tmp_path)


def test_empty_class_dir_names_the_class(tmp_path):
    (tmp_path / "full").mkdir()
    (tmp_path / "full" / "x.ppm").write_bytes(encode_ppm(np.zeros((3, 2, 2))))
    (tmp_path / "hollow").mkdir()
    with pytest.raises(LoadError, match="hollow"):
        load_image_dataset(tmp_path)


def test_truncated_file_on_access(tmp_path):
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        (tmp_path / name / "x.ppm").write_bytes(encode_ppm(np.zeros((3, 2, 2))))
    (tmp_path / "b" / "x.ppm").write_bytes(b"P6\n2 2\n255\n\0\0")
    ds = load_image_dataset(tmp_path)
    with pytest.raises(LoadError, match="x.ppm"):
        ds.image(1)


# -- datasets --------------------------------------------------------------------


def test_load_sorted_layout(tmp_path):
    for cls in ("zeta", "alpha", "mid"):
        (tmp_path / cls).mkdir()
        for i in (3, 1, 4, 0, 2):
            (tmp_path / cls / f"{i}.ppm").write_bytes(encode_ppm(np.full((3, 2, 2), i / 4)))
    ds = load_image_dataset(tmp_path)
    assert len(ds) == 15 and ds.classes == ["alpha", "mid", "zeta"]
    assert [p.name for p, _ in ds.items[:5]] == ["0.ppm", "1.ppm", "2.ppm", "3.ppm", "4.ppm"]
    assert ds.labels.tolist() == [0] * 5 + [1] * 5 + [2] * 5


def _balanced(n_per_class, k=4):
    imgs = np.zeros((n_per_class * k, 3, 2, 2), np.float32)
    return Dataset.from_arrays(imgs, np.repeat(np.arange(k), n_per_class), [f"c{i}" for i in range(k)])


def _ids(view):
    return {id(item[0]) for item in view.items}


def test_split_counts_and_determinism():
    ds = _balanced(100)
    a = stratified_split(ds, 0.2, seed=1)
    assert np.bincount(a.val.labels).tolist() == [20] * 4
    b = stratified_split(ds, 0.2, seed=1)
    assert _ids(a.val) == _ids(b.val)


def test_different_seeds_rarely_collide():
    ds = _balanced(20, k=2)
    vals = [frozenset(_ids(stratified_split(ds, 0.25, seed=s).val)) for s in range(100)]
    assert len(set(vals)) >= 99


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(2, 30), min_size=2, max_size=5), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_partition_property(sizes, frac, seed):
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(sizes)])
    ds = Dataset.from_arrays(np.zeros((len(labels), 3, 1, 1)), labels, [str(c) for c in range(len(sizes))])
    sp = stratified_split(ds, frac, seed)
    tr, va = _ids(sp.train), _ids(sp.val)
    assert not tr & va and tr | va == _ids(ds)
    per_class = np.bincount(sp.val.labels, minlength=len(sizes))
    for c, n in enumerate(sizes):
        assert abs(per_class[c] - n * frac) <= 1 or per_class[c] in (1, n - 1)


def test_split_holdout_is_disjoint():
    sp = stratified_split(_balanced(50), 0.2, seed=0, holdout_fraction=0.1)
    parts = [_ids(sp.train), _ids(sp.val), _ids(sp.holdout)]
    assert sum(map(len, parts)) == 200 and len(set.union(*parts)) == 200
    assert np.bincount(sp.holdout.labels).tolist() == [5] * 4


def test_split_errors():
    tiny = Dataset.from_arrays(np.zeros((3, 3, 1, 1)), [0, 0, 1], ["a", "b"])
    with pytest.raises(SplitError):
        stratified_split(tiny, 0.5)
    with pytest.raises(SplitError):
        stratified_split(_balanced(4), 1.0)


# -- batching --------------------------------------------------------------------


def test_batches_4_4_2():
    ds = _balanced(5, k=2)
    sizes = [len(x) for x, _ in batch_iterator(ds, 4, seed=0)]
    assert sizes == [4, 4, 2]


def test_epochs_differ_and_reproduce():
    ds = Dataset.from_arrays(np.arange(30, dtype=np.float32).reshape(30, 1, 1, 1).repeat(3, 1), np.arange(30) % 3,
                             ["a", "b", "c"])

    def order(epoch):
        return np.concatenate([x[:, 0, 0, 0] for x, _ in batch_iterator(ds, 7, 5, epoch=epoch)]).tolist()

    assert order(1) != order(2)
    assert order(1) == order(1) and order(2) == order(2)
    assert sorted(order(1)) == list(range(30))


def test_labels_are_one_hot(small_ds):
    for x, y in batch_iterator(small_ds, 5, seed=1, size=Shape2D(8, 8)):
        assert x.shape[1:] == (3, 8, 8) and x.dtype == np.float32
        assert np.all(y.sum(axis=1) == 1) and set(np.unique(y)) <= {0.0, 1.0}


def test_batch_size_must_be_positive(small_ds):
    with pytest.raises(ConfigError):
        next(batch_iterator(small_ds, 0))


# -- synthetic data --------------------------------------------------------------


def test_synthetic_counts(synth_root):
    assert count_images(synth_root) == 1000
    assert sorted(p.name for p in synth_root.iterdir()) == [f"class_{k:02d}" for k in range(4)]


def test_synthetic_is_byte_identical(tmp_path):
    a = gen_synthetic_dataset(tmp_path / "a", classes=3, per_class=4, size=Shape2D(8, 8), seed=9)
    b = gen_synthetic_dataset(tmp_path / "b", classes=3, per_class=4, size=Shape2D(8, 8), seed=9)
    files = sorted(p.relative_to(a) for p in a.rglob("*.ppm"))
    assert len(files) == 12
    assert all((a / f).read_bytes() == (b / f).read_bytes() for f in files)
    c = gen_synthetic_dataset(tmp_path / "c", classes=3, per_class=4, size=Shape2D(8, 8), seed=10)
    assert (a / files[0]).read_bytes() != (c / files[0]).read_bytes()


def test_synthetic_rejects_bad_class_count(tmp_path):
    with pytest.raises(ConfigError):
        gen_synthetic_dataset(tmp_path, classes=11, per_class=1)


def test_synthetic_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        gen_synthetic_dataset(blocker / "sub", classes=2, per_class=1, size=Shape2D(4, 4))


def _logistic_regression(x, y, steps=2000, lr=0.5):
    """Plain gradient-descent logistic regression on standardised features."""
    mu, sd = x.mean(0), x.std(0) + 1e-9
    z = (x - mu) / sd
    w, b = np.zeros(z.shape[1]), 0.0
    for _ in range(steps):
        p = 1 / (1 + np.exp(-(z @ w + b)))
        w -= lr * z.T @ (p - y) / len(y)
        b -= lr * np.mean(p - y)
    return lambda xs: (((xs - mu) / sd) @ w + b > 0).astype(int)


def test_two_class_set_is_separable_on_channel_means(tmp_path):
    root = gen_synthetic_dataset(tmp_path, classes=2, per_class=100, size=Shape2D(32, 32), seed=4)
    ds = load_image_dataset(root)
    feats = np.array([ds.image(i).mean(axis=(1, 2)) for i in range(len(ds))])
    sp = stratified_split(ds, 0.3, seed=0)
    index = {id(item[0]): i for i, item in enumerate(ds.items)}
    tr = [index[id(it[0])] for it in sp.train.items]
    va = [index[id(it[0])] for it in sp.val.items]
    predict = _logistic_regression(feats[tr], ds.labels[tr].astype(float))
    assert np.mean(predict(feats[va]) == ds.labels[va]) > 0.95
