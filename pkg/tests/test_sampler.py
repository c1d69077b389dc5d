import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rockssl.errors import EdgeTooLarge, EmptyInput, InvalidSplit, MissingLabels
from rockssl.sampler import (
    MaskSpec,
    SubCube,
    apply_mask,
    build_ssl_dataset,
    build_supervised_dataset,
    load_dataset,
    sample_subcubes,
    save_dataset,
)
from rockssl.voxel import CoreLabels, SynthSpec, generate_synthetic


@pytest.fixture(scope="module")
def vol32():
    return generate_synthetic(SynthSpec((32, 32, 32), 1.0, 0.25, seed=1))[0]


def test_origins_in_bounds(vol32):
    cubes = sample_subcubes(vol32, 500, 10, seed=0)
    origins = np.array([c.origin for c in cubes])
    assert origins.min() >= 0 and origins.max() <= 22
    assert all(c.values.shape == (1000,) for c in cubes)


def test_zero_count(vol32):
    assert sample_subcubes(vol32, 0, 10, seed=0) == []


def test_sampling_is_deterministic(vol32):
    a = [c.origin for c in sample_subcubes(vol32, 20, 10, seed=5)]
    b = [c.origin for c in sample_subcubes(vol32, 20, 10, seed=5)]
    assert a == b


def test_edge_too_large(vol32):
    with pytest.raises(EdgeTooLarge):
        sample_subcubes(vol32, 1, 33)


def test_subcube_values_match_source():
    vol = generate_synthetic(SynthSpec((9, 10, 11), 0.0, 0.5, seed=4))[0]
    d = vol.data
    for cube in sample_subcubes(vol, 30, 4, seed=2):
        x0, y0, z0 = cube.origin
        expected = [d[z0 + k, y0 + j, x0 + i] for k in range(4) for j in range(4) for i in range(4)]
        assert cube.values.tolist() == expected


def check_masked(sample, spec, edge):
    n = edge**3
    quota = int(np.floor(spec.rate * n + 0.5))
    assert len(sample.mask) == quota == len(set(sample.mask.tolist()))
    on = np.zeros(n, dtype=bool)
    on[sample.mask] = True
    assert np.all(sample.input[~on] == sample.target[~on])
    assert np.all(sample.input[on] == np.float32(spec.mask_value))


def test_mask_examples():
    cube = SubCube(np.random.default_rng(0).random(1000).astype(np.float32), (0, 0, 0))
    s0 = apply_mask(cube, MaskSpec(rate=0.0))
    assert len(s0.mask) == 0 and np.array_equal(s0.input, s0.target)
    s2 = apply_mask(cube, MaskSpec(rate=0.2))
    assert len(s2.mask) == 200
    s1 = apply_mask(cube, MaskSpec(rate=1.0))
    assert len(s1.mask) == 1000 and np.all(s1.input == 0.5)


@given(st.floats(0.0, 1.0), st.sampled_from(["voxel", "patch"]), st.integers(2, 10),
       st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_mask_invariants(rate, mode, edge, fill, seed):
    rng = np.random.default_rng(seed)
    cube = SubCube((rng.random(edge**3) < 0.5).astype(np.float32), (0, 0, 0), edge)
    spec = MaskSpec(rate, mode, np.float32(fill).item(), seed)
    check_masked(apply_mask(cube, spec), spec, edge)


def test_patch_mask_hides_slice_regions():
    cube = SubCube(np.zeros(1000, dtype=np.float32), (0, 0, 0))
    s = apply_mask(cube, MaskSpec(0.2, "patch", seed=3))
    z = s.mask // 100
    # rectangles live on slices, so few slices carry most of the mask
    assert len(np.unique(z)) < 10 or np.bincount(z).max() > 20


def test_ssl_split_equal(vol32):
    train, test = build_ssl_dataset([vol32], 100, MaskSpec(), split=0.5, seed=0)
    assert (len(train), len(test)) == (50, 50)
    for i in range(len(train)):
        check_masked(train[i], MaskSpec(), 10)


def test_ssl_split_all_train(vol32):
    train, test = build_ssl_dataset([vol32], 40, MaskSpec(), split=1.0, seed=0)
    assert (len(train), len(test)) == (40, 0)


def test_ssl_empty_input(vol32):
    with pytest.raises(EmptyInput):
        build_ssl_dataset([vol32], 0, MaskSpec())
    with pytest.raises(EmptyInput):
        build_ssl_dataset([], 10, MaskSpec())


def test_ssl_builder_is_pure(vol32):
    a, _ = build_ssl_dataset([vol32, vol32], 30, MaskSpec(), 0.5, seed=9)
    b, _ = build_ssl_dataset([vol32, vol32], 30, MaskSpec(), 0.5, seed=9)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.masks, b.masks)


@pytest.fixture(scope="module")
def eleven_cores():
    cores = []
    for i in range(11):
        vol, lab = generate_synthetic(SynthSpec((12, 12, 12), 0.5, 0.15 + 0.01 * i, seed=i))
        cores.append((vol, lab))
    return cores


def test_first_k_split(eleven_cores):
    train, test = build_supervised_dataset(eleven_cores, 100, "first:6", seed=0)
    assert len(train) + len(test) == 1100
    assert set(train.core_ids.tolist()) == set(range(6))
    assert set(test.core_ids.tolist()) == set(range(6, 11))
    train_labels = {tuple(lab.as_tuple()) for _, lab in eleven_cores[:6]}
    assert {tuple(t) for t in train.targets.tolist()} == train_labels


def test_every_subcube_carries_its_core_label(eleven_cores):
    train, test = build_supervised_dataset(eleven_cores, 20, "random:0.5", seed=1)
    for ds in (train, test):
        for i in range(len(ds)):
            s = ds[i]
            assert s.target == eleven_cores[s.core_id][1].as_tuple()


def test_invalid_first_k(eleven_cores):
    with pytest.raises(InvalidSplit):
        build_supervised_dataset(eleven_cores, 10, "first:11")


def test_missing_labels(eleven_cores):
    with pytest.raises(MissingLabels):
        build_supervised_dataset([(eleven_cores[0][0], None)], 10, "random:0.5")


@given(st.integers(1, 10), st.integers(0, 1000))
def test_first_k_core_sets_disjoint(eleven_cores, k, seed):
    train, test = build_supervised_dataset(eleven_cores, 3, f"first:{k}", seed=seed)
    assert not set(train.core_ids.tolist()) & set(test.core_ids.tolist())


def test_dataset_cache_round_trip(tmp_path, vol32, eleven_cores):
    ssl, _ = build_ssl_dataset([vol32], 12, MaskSpec(), split=1.0, seed=0)
    save_dataset(ssl, tmp_path / "ssl.ctds")
    raw = (tmp_path / "ssl.ctds").read_bytes()
    assert raw[:4] == b"CTDS"
    back = load_dataset(tmp_path / "ssl.ctds")
    assert np.array_equal(back.inputs, ssl.inputs)
    assert np.array_equal(back.targets, ssl.targets)
    assert np.array_equal(back.masks, ssl.masks)

    sup, _ = build_supervised_dataset(eleven_cores, 5, "random:1.0", seed=0)
    save_dataset(sup, tmp_path / "sup.ctds")
    back = load_dataset(tmp_path / "sup.ctds")
    assert np.array_equal(back.inputs, sup.inputs)
    np.testing.assert_allclose(back.targets, sup.targets, rtol=1e-6)
    assert np.array_equal(back.core_ids, sup.core_ids)
