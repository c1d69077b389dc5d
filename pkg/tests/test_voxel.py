import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rockssl.errors import FileSizeMismatch, InvalidPorosity, InvalidSpec, NotBinary, ZeroSurface
from rockssl.voxel import (
    SynthSpec,
    Volume3D,
    generate_synthetic,
    kozeny_carman,
    load_raw_volume,
    load_volume,
    porosity,
    save_volume,
    specific_surface,
    write_raw_volume,
)

from conftest import binary_volume


def brute_force_faces(data):
    """Count solid/pore pairs between each voxel and its +x,+y,+z neighbour, wrapping around."""
    nz, ny, nx = data.shape
    faces = 0
    for z, y, x in itertools.product(range(nz), range(ny), range(nx)):
        for dz, dy, dx in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
            if data[z, y, x] != data[(z + dz) % nz, (y + dy) % ny, (x + dx) % nx]:
                faces += 1
    return faces


binary_cubes = arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
                      elements=st.sampled_from([0.0, 1.0]))


def test_load_binary_alternating(tmp_path):
    path = tmp_path / "v.raw"
    path.write_bytes(bytes([0, 255, 0, 255, 0, 255, 0, 255]))
    vol = load_raw_volume(path, (2, 2, 2), "u8_binary")
    assert vol.data.ravel().tolist() == [0.0, 1.0] * 4
    assert porosity(vol) == 0.5


def test_load_grayscale_mapping(tmp_path):
    path = tmp_path / "g.raw"
    path.write_bytes(bytes([128] * 8))
    vol = load_raw_volume(path, (2, 2, 2), "u8_grayscale")
    assert vol.kind == "grayscale"
    np.testing.assert_allclose(vol.data, 128 / 255, rtol=1e-6)
    assert abs(float(vol.data[0, 0, 0]) - 0.50196) < 1e-5


def test_size_mismatch(tmp_path):
    path = tmp_path / "short.raw"
    path.write_bytes(bytes(7))
    with pytest.raises(FileSizeMismatch):
        load_raw_volume(path, (2, 2, 2))


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(OSError):
        load_raw_volume(tmp_path / "nope.raw", (2, 2, 2))


def test_voxel_order_is_x_fastest(tmp_path):
    path = tmp_path / "o.raw"
    raw = np.zeros(2 * 3 * 4, dtype=np.uint8)
    raw[1] = 255  # second byte: x=1, y=0, z=0
    raw[4] = 255  # x=0, y=1, z=0 with nx=4
    raw.tofile(path)
    vol = load_raw_volume(path, (4, 3, 2))
    assert vol.dims == (4, 3, 2)
    assert vol.data[0, 0, 1] == 1.0 and vol.data[0, 1, 0] == 1.0
    assert vol.data.sum() == 2


def test_invert_swaps_phases(tmp_path):
    path = tmp_path / "i.raw"
    path.write_bytes(bytes([0, 0, 0, 255, 0, 0, 0, 0]))
    assert porosity(load_raw_volume(path, 2, invert=True)) == 7 / 8


@given(binary_cubes)
def test_write_then_load_is_identity(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("rt") / "v.raw"
    vol = binary_volume(arr)
    write_raw_volume(vol, path)
    back = load_raw_volume(path, vol.dims)
    np.testing.assert_array_equal(back.data, vol.data)


def test_porosity_examples():
    assert porosity(binary_volume(np.ones((3, 3, 3)))) == 1.0
    assert porosity(binary_volume(np.zeros((3, 3, 3)))) == 0.0
    d = np.zeros((2, 2, 2))
    d[0, 0, 0] = d[1, 1, 1] = 1
    assert porosity(binary_volume(d)) == 0.25


def test_porosity_needs_binary():
    with pytest.raises(NotBinary):
        porosity(Volume3D(np.full((2, 2, 2), 0.5), kind="grayscale"))


def test_binary_volume_rejects_other_values():
    with pytest.raises(NotBinary):
        Volume3D(np.full((2, 2, 2), 0.5), kind="binary")


def test_volume_data_is_read_only():
    vol = binary_volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1.0


def test_specific_surface_examples():
    assert specific_surface(binary_volume(np.ones((3, 3, 3)))) == 0.0
    one = np.ones((3, 3, 3))
    one[1, 1, 1] = 0
    assert brute_force_faces(one) == 6
    assert specific_surface(binary_volume(one)) == pytest.approx(6 / 27)
    two = np.ones((3, 3, 3))
    two[1, 1, 1] = two[1, 1, 2] = 0
    assert brute_force_faces(two) == 10
    assert specific_surface(binary_volume(two)) == pytest.approx(10 / 27)


@given(binary_cubes)
def test_specific_surface_matches_brute_force(arr):
    assert specific_surface(binary_volume(arr)) == pytest.approx(brute_force_faces(arr) / arr.size)


@given(binary_cubes, st.permutations([0, 1, 2]))
def test_axis_permutation_invariance(arr, perm):
    a, b = binary_volume(arr), binary_volume(np.transpose(arr, perm))
    assert porosity(a) == porosity(b)
    assert specific_surface(a) == pytest.approx(specific_surface(b))


@given(binary_cubes)
def test_surface_invariant_under_phase_swap(arr):
    assert specific_surface(binary_volume(arr)) == specific_surface(binary_volume(1.0 - arr))


def test_kozeny_carman_examples():
    assert kozeny_carman(0.0, 0.3) == 0.0
    # 0.2^3 / (5 * 0.1^2 * 0.8^2) = 0.008 / 0.032
    assert kozeny_carman(0.2, 0.1, 5.0) == pytest.approx(0.25)
    with pytest.raises(ZeroSurface):
        kozeny_carman(0.5, 0.0)
    with pytest.raises(InvalidPorosity):
        kozeny_carman(1.0, 0.1)


def test_kozeny_carman_increasing_in_porosity():
    phis = np.linspace(0.01, 0.99, 99)
    for s in (0.05, 0.3, 1.0):
        for c in (1.0, 5.0):
            k = [kozeny_carman(p, s, c) for p in phis]
            assert all(b > a for a, b in zip(k, k[1:]))


def test_synthetic_hits_target():
    vol, labels = generate_synthetic(SynthSpec((32, 32, 32), 2.0, 0.25, seed=7))
    assert vol.kind == "binary"
    assert abs(porosity(vol) - 0.25) <= 0.01
    assert labels.porosity == porosity(vol)
    assert labels.permeability > 0


@given(st.floats(0.05, 0.95), st.floats(0.0, 3.0), st.integers(0, 2**32 - 1))
def test_synthetic_porosity_exact_up_to_rounding(target, corr, seed):
    vol, labels = generate_synthetic(SynthSpec((8, 9, 10), corr, target, seed=seed))
    assert abs(porosity(vol) - target) <= 0.5 / vol.n_voxels + 1e-12
    assert labels.porosity == porosity(vol)


def test_white_noise_still_matches_target():
    vol, _ = generate_synthetic(SynthSpec((16, 16, 16), 0.0, 0.4, seed=1))
    assert abs(porosity(vol) - 0.4) <= 1 / vol.n_voxels


def test_synthetic_is_deterministic():
    spec = SynthSpec((16, 16, 16), 1.5, 0.3, seed=11)
    a, la = generate_synthetic(spec)
    b, lb = generate_synthetic(spec)
    assert a.data.tobytes() == b.data.tobytes()
    assert la == lb


def test_correlation_length_smooths_the_medium():
    rough, _ = generate_synthetic(SynthSpec((24, 24, 24), 0.0, 0.3, seed=2))
    smooth, _ = generate_synthetic(SynthSpec((24, 24, 24), 2.0, 0.3, seed=2))
    assert specific_surface(smooth) < specific_surface(rough)


@pytest.mark.parametrize("spec", [
    SynthSpec((4, 16, 16)),
    SynthSpec(target_porosity=0.0),
    SynthSpec(target_porosity=1.0),
    SynthSpec(correlation_length=-1.0),
])
def test_invalid_synth_spec(spec):
    with pytest.raises(InvalidSpec):
        generate_synthetic(spec)


def test_sidecar_round_trip(tmp_path):
    spec = SynthSpec((12, 10, 8), 1.0, 0.3, seed=5)
    vol, labels = generate_synthetic(spec)
    raw, side = save_volume(tmp_path / "core", vol, labels, spec)
    assert raw.name == "core.raw" and side.name == "core.json"
    rec = load_volume(raw)
    np.testing.assert_array_equal(rec.volume.data, vol.data)
    assert rec.labels == labels
    assert rec.meta["generator"]["seed"] == 5
