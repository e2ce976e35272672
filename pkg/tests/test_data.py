import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnmamba import data
from nnmamba.data import DatasetSpec, VolumeSample
from nnmamba.errors import ConfigError, FormatError


def rng(seed=0):
    return np.random.default_rng(seed)


def test_seg_sample_nesting_and_classes():
    for seed in range(20):
        s = data.gen_seg_sample(rng(seed))
        m = s.label
        assert s.image.shape == (1, 32, 32, 32) and s.image.dtype == np.float32
        assert m.dtype == np.int8 and set(np.unique(m)) <= {0, 1, 2, 3}
        assert np.all((m >= 3) <= (m >= 2)) and np.all((m >= 2) <= (m >= 1))
        assert (m == 3).sum() > 0


def test_seg_noise_free_is_piecewise_constant():
    s = data.gen_seg_sample(rng(1), noise=0.0)
    assert len(np.unique(s.image)) <= 4
    np.testing.assert_array_equal(s.image[0], np.asarray(data.SEG_INTENSITIES, np.float32)[s.label])


def test_generators_are_deterministic():
    for gen in (data.gen_seg_sample, data.gen_cls_sample, data.gen_landmark_sample):
        a, b = gen(rng(7)), gen(rng(7))
        assert data.dumps_volume(a) == data.dumps_volume(b)


def test_cls_balance_over_1000_seeds():
    labels = [data.gen_cls_sample(data.sample_rng(s, 0), shape=(16, 16, 16)).label for s in range(1000)]
    assert 0.45 <= np.mean(labels) <= 0.55


def test_landmarks_six_inside_volume():
    for seed in range(50):
        s = data.gen_landmark_sample(rng(seed))
        assert s.label.shape == (6, 3)
        vox = s.landmark_voxels()
        assert np.all(vox > 0) and np.all(vox < np.array(s.shape) - 1)
        np.testing.assert_array_equal(vox, np.round(vox))


def test_landmark_pairs_are_axis_extremes():
    s = data.gen_landmark_sample(rng(3), noise=0.0)
    body = s.image[0] > 0.3
    idx = np.argwhere(body)
    for axis in range(3):
        lo, hi = s.landmark_voxels()[2 * axis], s.landmark_voxels()[2 * axis + 1]
        assert lo[axis] == idx[:, axis].min() and hi[axis] == idx[:, axis].max()
        assert body[tuple(lo.astype(int))] and body[tuple(hi.astype(int))]


def test_split_sizes():
    assert data.split_sizes(100) == (70, 10, 20)
    assert data.split_sizes(10) == (7, 1, 2)
    assert data.split_sizes(9) == (7, 1, 1)
    assert data.split_sizes(1) == (1, 0, 0)
    with pytest.raises(ConfigError):
        data.split_sizes(10, (0.5, 0.5, 0.5))


@given(st.integers(1, 300), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_split_disjoint_exhaustive_deterministic(n, seed):
    tr, va, te = data.split(n, seed=seed)
    assert set(tr) | set(va) | set(te) == set(range(n))
    assert len(tr) + len(va) + len(te) == n
    assert data.split(n, seed=seed) == (tr, va, te)


def test_split_of_items():
    items = list("abcdefghij")
    tr, va, te = data.split(items, seed=3)
    assert sorted(tr + va + te) == items


@pytest.mark.parametrize("gen", [data.gen_seg_sample, data.gen_cls_sample, data.gen_landmark_sample])
def test_flip_twice_restores_bit_exact(gen):
    s = gen(rng(2))
    for axes in ([0], [1, 2], [0, 1, 2]):
        back = data.flip(data.flip(s, axes), axes)
        assert data.dumps_volume(back) == data.dumps_volume(s)


def test_flip_moves_image_and_label_together():
    s = data.gen_seg_sample(rng(4), noise=0.0)
    f = data.flip(s, [1])
    np.testing.assert_array_equal(f.image[0], np.asarray(data.SEG_INTENSITIES, np.float32)[f.label])
    lm = data.gen_landmark_sample(rng(4), noise=0.0)
    fl = data.flip(lm, [2])
    body = fl.image[0] > 0.3
    for p in fl.landmark_voxels().astype(int):
        assert body[tuple(p)]


@pytest.mark.parametrize("gen", [data.gen_seg_sample, data.gen_cls_sample, data.gen_landmark_sample])
def test_volume_roundtrip(tmp_path, gen):
    s = gen(rng(5), spacing=(0.5, 1.0, 2.0))
    path = tmp_path / "v.nmv"
    data.write_volume(path, s)
    back = data.read_volume(path)
    assert data.dumps_volume(back) == path.read_bytes()
    np.testing.assert_array_equal(back.image, s.image)
    assert back.spacing == s.spacing and back.task == s.task


def test_volume_header_layout():
    s = VolumeSample(np.zeros((1, 2, 3, 4)), 1, (1.0, 1.0, 1.0), "classification")
    raw = data.dumps_volume(s)
    assert raw[:4] == b"NMV1" and raw[4] == 1 and raw[5] == 1
    assert np.frombuffer(raw[6:18], "<u4").tolist() == [2, 3, 4]
    assert len(raw) == 4 + 2 + 12 + 12 + 4 * 24 + 4


def test_volume_format_errors(tmp_path):
    raw = data.dumps_volume(data.gen_landmark_sample(rng(0), shape=(16, 16, 16)))
    with pytest.raises(FormatError):
        data.loads_volume(raw[:-3])
    with pytest.raises(FormatError):
        data.loads_volume(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        data.loads_volume(raw + b"\0")
    with pytest.raises(FormatError):
        data.loads_volume(raw[:4] + bytes([9]) + raw[5:])


def test_sample_validation():
    with pytest.raises(ConfigError):
        VolumeSample(np.zeros((2, 2, 2)), 0, (1.0, 0.0, 1.0), "classification")
    with pytest.raises(ConfigError):
        VolumeSample(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)), task="segmentation")


def test_dataset_spec_validation():
    with pytest.raises(ConfigError):
        DatasetSpec(ratios=(0.5, 0.2, 0.2)).validate()
    with pytest.raises(ConfigError):
        DatasetSpec(n_samples=0).validate()


def test_generation_is_order_independent():
    spec = DatasetSpec("landmark", 6, (16, 16, 16), seed=11)
    full = data.generate_dataset(spec)
    single = data.generate_sample(spec, 4)
    assert data.dumps_volume(full[4]) == data.dumps_volume(single)


def test_write_dataset_manifest(tmp_path):
    spec = DatasetSpec("cls", 10, (16, 16, 16), seed=2)
    manifest = data.write_dataset(spec, tmp_path)
    loaded = json.loads((tmp_path / "manifest.json").read_text())
    assert len(loaded["entries"]) == 10
    assert [len(manifest.paths(w)) for w in ("train", "val", "test")] == [7, 1, 2]
    test = data.load_split(tmp_path / "manifest.json", "test")
    assert all(s.task == "classification" for s in test)


def test_bad_manifest(tmp_path):
    p = tmp_path / "m.json"
    p.write_text('{"task": "seg"}')
    with pytest.raises(FormatError):
        data.load_manifest(p)
