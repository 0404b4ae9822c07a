import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfuda3d.data import (
    LabelMap,
    Manifest,
    ManifestEntry,
    PhantomSpec,
    Volume,
    augment,
    axis_origins,
    crop_grid,
    gen_phantom,
    percentile_nearest_rank,
    preprocess,
    random_crop,
    read_volume,
    write_volume,
)
from sfuda3d.data.augment import TRANSFORMS, elastic, flip, rescale, rotate90
from sfuda3d.data.dataset import MANIFEST_NAME, generate_dataset
from sfuda3d.data.preprocess import foreground_bbox, resample
from sfuda3d.exceptions import ChecksumError, DataError, DimensionError, EmptyForegroundError, FormatError, ParameterError


# crop grids

@pytest.mark.parametrize("dims,patch,stride,count", [
    ((64, 64, 64), 32, (32, 32, 32), 8),
    ((64, 64, 64), 32, (8, 8, 8), 125),
    ((64, 64, 64), 32, (16, 16, 16), 27),
    ((70, 64, 64), 32, (32, 32, 32), 3 * 2 * 2),
    ((70, 64, 64), 32, (16, 16, 16), 36),
    ((32, 32, 32), 32, (4, 4, 4), 1),
])
def test_crop_grid_counts(dims, patch, stride, count):
    assert len(crop_grid(dims, patch, stride)) == count


def test_axis_origins_clamp_last_window():
    assert axis_origins(70, 32, 32) == [0, 32, 38]
    assert axis_origins(64, 32, 32) == [0, 32]


@settings(max_examples=60, deadline=None)
@given(st.integers(32, 90), st.integers(1, 32))
def test_crop_grid_covers_every_voxel(length, stride):
    covered = np.zeros(length, bool)
    for o in axis_origins(length, 32, stride):
        assert 0 <= o <= length - 32
        covered[o:o + 32] = True
    assert covered.all()


def test_crop_grid_errors():
    with pytest.raises(ParameterError):
        crop_grid((64, 64, 64), 32, (0, 8, 8))
    with pytest.raises(ParameterError):
        crop_grid((16, 64, 64), 32, 8)
    with pytest.raises(ParameterError):
        random_crop((16, 64, 64), 32, np.random.default_rng(0))


def test_random_crop_in_bounds():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = random_crop((40, 50, 33), 32, rng)
        assert all(0 <= o <= d - 32 for o, d in zip(c.origin, (40, 50, 33)))


# preprocessing

@pytest.mark.parametrize("seed", range(5))
def test_percentile_nearest_rank_matches_sorted_definition(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=int(rng.integers(1, 500)))
    s = sorted(x)
    for q in (0, 1, 50, 98, 100):
        rank = max(math.ceil(q / 100 * len(s)), 1)
        assert percentile_nearest_rank(x, q) == s[rank - 1]


def test_foreground_bbox_and_empty():
    lab = np.zeros((20, 20, 20), np.uint8)
    lab[5:8, 10, 2] = 1
    assert foreground_bbox(lab, margin=2) == (slice(3, 10), slice(8, 13), slice(0, 5))
    with pytest.raises(EmptyForegroundError):
        foreground_bbox(np.zeros((4, 4, 4), np.uint8))


def test_resample_identity_and_shape():
    x = np.random.default_rng(0).normal(size=(10, 12, 8))
    np.testing.assert_array_equal(resample(x, (1, 1, 1)), x)
    assert resample(x, (2.0, 1.0, 0.5)).shape == (20, 12, 4)
    lab = np.random.default_rng(1).integers(0, 5, (10, 12, 8))
    out = resample(lab, (1.5, 1.5, 1.5), order=0)
    assert set(np.unique(out)) <= set(np.unique(lab))


def phantom(seed=3, modality="A", **kw):
    return gen_phantom(PhantomSpec(seed=seed, modality=modality, **kw))


def test_preprocess_normalises_and_keeps_foreground():
    vol, lab = preprocess(*phantom())
    assert vol.values.dtype == np.float32 and lab.values.dtype == np.uint8
    assert vol.values.shape == lab.values.shape
    assert abs(float(vol.values.mean())) < 1e-4
    assert abs(float(vol.values.std()) - 1.0) < 1e-4
    assert set(np.unique(lab.values)) == {0, 1, 2, 3, 4}
    assert vol.spacing == (1.0, 1.0, 1.0)


def test_preprocess_clips_top_two_percent():
    vol, lab = phantom()
    box = foreground_bbox(lab.values)
    vol.values[box][5, 5, 5] = 1e6
    out, _ = preprocess(vol, lab)
    cropped = vol.values[box].astype(np.float64)
    cap = np.sort(cropped.ravel())[math.ceil(0.98 * cropped.size) - 1]
    clipped = np.minimum(cropped, cap)
    assert out.values.max() == pytest.approx((cap - clipped.mean()) / clipped.std(), rel=1e-5)


def test_preprocess_is_idempotent():
    vol, lab = preprocess(*phantom(4))
    again, again_lab = preprocess(vol, lab)
    np.testing.assert_array_equal(again_lab.values, lab.values)
    np.testing.assert_allclose(again.values, vol.values, atol=1e-4)


def test_preprocess_resamples_anisotropic_input():
    vol, lab = phantom(spacing=(1.0, 1.0, 2.0))
    out, out_lab = preprocess(vol, lab)
    box = foreground_bbox(lab.values)
    assert out.dims[2] == 2 * (box[2].stop - box[2].start)
    assert out.dims == out_lab.dims


def test_preprocess_dim_mismatch():
    vol, lab = phantom()
    with pytest.raises(DimensionError):
        preprocess(vol, LabelMap(lab.values[:-1]))


# phantoms

def test_phantom_modalities_share_anatomy():
    (_, la), (_, lb) = phantom(7, "A"), phantom(7, "B")
    np.testing.assert_array_equal(la.values, lb.values)


def test_phantom_deterministic_and_seed_dependent():
    a1, a2, b = phantom(5)[0].values, phantom(5)[0].values, phantom(6)[0].values
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, b)


def test_phantom_unknown_modality():
    with pytest.raises(ParameterError):
        phantom(0, "Z")


# augmentation

def patch_pair(seed=0):
    rng = np.random.default_rng(seed)
    image = rng.normal(size=(32, 32, 32)).astype(np.float32)
    labels = rng.integers(0, 5, (32, 32, 32)).astype(np.uint8)
    return image, labels


@pytest.mark.parametrize("transform", [flip, rotate90])
def test_rigid_transforms_carry_labels_with_intensities(transform):
    image, _ = patch_pair()
    labels = (np.arange(32 ** 3) % 251).reshape(32, 32, 32).astype(np.uint8)
    out_i, out_l = transform(image, labels, np.random.default_rng(1))
    # voxel values move together: the (label, intensity) pairs are preserved as a multiset
    before = sorted(zip(labels.ravel().tolist(), image.ravel().tolist()))
    after = sorted(zip(out_l.ravel().tolist(), out_i.ravel().tolist()))
    assert before == after


@pytest.mark.parametrize("transform", [rescale, elastic])
def test_warps_keep_label_set(transform):
    image, labels = patch_pair()
    out_i, out_l = transform(image, labels, np.random.default_rng(2))
    assert out_i.shape == image.shape and out_l.dtype == np.uint8
    assert set(np.unique(out_l)) <= set(np.unique(labels))


def test_augment_is_deterministic_and_shape_preserving():
    image, labels = patch_pair()
    a = augment(image, labels, np.random.default_rng(9), p=1.0)
    b = augment(image, labels, np.random.default_rng(9), p=1.0)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert a[0].shape == image.shape


def test_double_flip_is_identity():
    image, labels = patch_pair()
    # replaying the same generator state flips the same axes again
    back = flip(*flip(image, labels, np.random.default_rng(5)), np.random.default_rng(5))
    np.testing.assert_array_equal(back[0], image)
    np.testing.assert_array_equal(back[1], labels)


def test_augment_with_zero_probability_is_identity():
    image, labels = patch_pair()
    out_i, out_l = augment(image, labels, np.random.default_rng(0), p=0.0)
    np.testing.assert_array_equal(out_i, image)
    np.testing.assert_array_equal(out_l, labels)
    assert len(TRANSFORMS) == 5


# volume files and manifests

def test_volume_round_trip_bit_exact(tmp_path):
    vol, lab = phantom()
    for obj, name in ((vol, "img.svol"), (lab, "lab.svol")):
        write_volume(tmp_path / name, obj)
        back = read_volume(tmp_path / name)
        assert type(back) is type(obj) and back.spacing == obj.spacing
        np.testing.assert_array_equal(back.values, obj.values)
        write_volume(tmp_path / ("again_" + name), back)
        assert (tmp_path / name).read_bytes() == (tmp_path / ("again_" + name)).read_bytes()


def test_volume_rejects_corruption(tmp_path):
    path = tmp_path / "v.svol"
    write_volume(path, Volume(np.ones((4, 5, 6))))
    raw = bytearray(path.read_bytes())
    raw[40] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        read_volume(path)


def test_volume_rejects_malformed(tmp_path):
    path = tmp_path / "v.svol"
    write_volume(path, Volume(np.ones((4, 5, 6))))
    raw = path.read_bytes()
    for name, data in (("magic", b"NOPE" + raw[4:]), ("short", raw[:10]), ("trunc", raw[:-20])):
        (tmp_path / name).write_bytes(data)
        with pytest.raises(FormatError):
            read_volume(tmp_path / name)


def test_manifest_round_trip(tmp_path):
    entries = [ManifestEntry("a", "A", tmp_path / "a_i.svol", tmp_path / "a_l.svol", "train"),
               ManifestEntry("b", "B", tmp_path / "b_i.svol", tmp_path / "b_l.svol", "test")]
    Manifest(entries).write(tmp_path / "m.json")
    back = Manifest.read(tmp_path / "m.json")
    assert [e.id for e in back.select("B", "test")] == ["b"]
    assert back.entries[0].image_path.resolve() == entries[0].image_path.resolve()
    (tmp_path / "bad.json").write_text("[{}]")
    with pytest.raises(DataError):
        Manifest.read(tmp_path / "bad.json")


def test_generate_dataset_deterministic(tmp_path):
    m1 = generate_dataset(tmp_path / "one", seed=3, n_train=2, n_test=1)
    generate_dataset(tmp_path / "two", seed=3, n_train=2, n_test=1)
    assert len(m1.entries) == 2 * (2 + 1)
    for e in m1.entries:
        for p in (e.image_path, e.label_path):
            assert p.read_bytes() == (tmp_path / "two" / p.name).read_bytes()
    assert (tmp_path / "one" / MANIFEST_NAME).read_text() == (tmp_path / "two" / MANIFEST_NAME).read_text()
    # test anatomy is paired across modalities, training anatomy is not
    a = read_volume(m1.select("A", "test")[0].label_path).values
    b = read_volume(m1.select("B", "test")[0].label_path).values
    np.testing.assert_array_equal(a, b)
    a = read_volume(m1.select("A", "train")[0].label_path).values
    b = read_volume(m1.select("B", "train")[0].label_path).values
    assert a.shape != b.shape or not np.array_equal(a, b)
