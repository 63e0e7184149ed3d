import struct

import numpy as np
import pytest

from mhc_hsi.dataio import HsiCube, SplitSpec, read_container, stratified_split, synth_cube, write_container
from mhc_hsi.exceptions import ConfigError, DataError, FormatError
from mhc_hsi.streams import split_bands


def random_cube(rng, h=4, w=4, c=6, k=3):
    wl = np.sort(rng.uniform(400, 2500, size=c)).astype(np.float32)
    labels = rng.integers(0, k + 1, size=(h, w)).astype(np.uint16)
    refl = rng.uniform(size=(h, w, c)).astype(np.float32)
    return HsiCube(refl, wl, labels, [f"c{i}" for i in range(k)])


def test_round_trip_is_bit_identical(rng, tmp_path):
    cube = random_cube(rng)
    path = tmp_path / "a.hsic"
    write_container(cube, path)
    back = read_container(path)
    assert back.reflectance.tobytes() == cube.reflectance.tobytes()
    assert back.wavelengths.tobytes() == cube.wavelengths.tobytes()
    assert back.labels.tobytes() == cube.labels.tobytes()
    assert back.class_names == cube.class_names
    write_container(back, tmp_path / "b.hsic")
    assert (tmp_path / "b.hsic").read_bytes() == path.read_bytes()


def test_layout_header(rng, tmp_path):
    cube = random_cube(rng, 2, 3, 5, 2)
    write_container(cube, tmp_path / "a.hsic")
    buf = (tmp_path / "a.hsic").read_bytes()
    assert buf[:4] == b"HSIC"
    assert struct.unpack_from("<H3I", buf, 4) == (1, 2, 3, 5)
    size = 4 + 2 + 12 + 4 * 5 + 4 * 30 + 2 * 6 + 2 + sum(2 + len(n.encode()) for n in cube.class_names)
    assert len(buf) == size


def test_truncation_reports_offset(rng, tmp_path):
    cube = random_cube(rng)
    write_container(cube, tmp_path / "a.hsic")
    buf = (tmp_path / "a.hsic").read_bytes()
    # cut inside the reflectance block
    cut = 4 + 2 + 12 + 4 * 6 + 10
    (tmp_path / "t.hsic").write_bytes(buf[:cut])
    with pytest.raises(FormatError, match=r"offset %d" % (4 + 2 + 12 + 4 * 6)):
        read_container(tmp_path / "t.hsic")


def test_bad_magic_and_trailing_bytes(rng, tmp_path):
    cube = random_cube(rng)
    write_container(cube, tmp_path / "a.hsic")
    buf = (tmp_path / "a.hsic").read_bytes()
    (tmp_path / "m.hsic").write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError, match="offset 0"):
        read_container(tmp_path / "m.hsic")
    (tmp_path / "p.hsic").write_bytes(buf + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_container(tmp_path / "p.hsic")


def test_non_increasing_wavelengths_rejected(rng, tmp_path):
    cube = random_cube(rng, c=2)
    write_container(cube, tmp_path / "a.hsic")
    buf = bytearray((tmp_path / "a.hsic").read_bytes())
    struct.pack_into("<2f", buf, 18, 500.0, 500.0)
    (tmp_path / "w.hsic").write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="offset"):
        read_container(tmp_path / "w.hsic")
    with pytest.raises(ConfigError):
        HsiCube(np.zeros((1, 1, 2)), [500, 500], np.zeros((1, 1)), [])


# splits ---------------------------------------------------------------------


def test_small_class_split_counts():
    labels = np.zeros(100, dtype=np.uint16)
    labels[:46] = 1
    labels[46:] = 2
    train, test = stratified_split(labels, SplitSpec(0.10, seed=3))
    assert train[:46].sum() == 5 and test[:46].sum() == 41
    assert train[46:].sum() == 5 and test[46:].sum() == 49


def test_masks_partition_labeled_pixels(rng):
    labels = rng.integers(0, 4, size=(12, 12))
    labels[0, :3] = [1, 2, 3]
    train, test = stratified_split(labels, SplitSpec(0.2, seed=1))
    assert not np.any(train & test)
    np.testing.assert_array_equal(train | test, labels > 0)


def test_seeds_change_masks_not_counts(rng):
    labels = rng.integers(1, 4, size=200)
    a, _ = stratified_split(labels, SplitSpec(0.1, seed=0))
    b, _ = stratified_split(labels, SplitSpec(0.1, seed=1))
    assert not np.array_equal(a, b)
    for c in range(1, 4):
        assert a[labels == c].sum() == b[labels == c].sum()
    c2, _ = stratified_split(labels, SplitSpec(0.1, seed=0))
    np.testing.assert_array_equal(a, c2)


def test_split_errors():
    labels = np.array([1, 1, 1, 3, 3])
    with pytest.raises(DataError, match=r"\[2\]"):
        stratified_split(labels, SplitSpec(0.5))
    with pytest.raises(DataError, match="test"):
        stratified_split(np.array([1, 1, 2, 2]), SplitSpec(1.0))


def test_explicit_counts():
    labels = np.repeat([1, 2], 10)
    train, _ = stratified_split(labels, SplitSpec(counts={1: 2, 2: 7}))
    assert train[:10].sum() == 2 and train[10:].sum() == 7


# synthetic scenes --------------------------------------------------------------


def test_noiseless_two_class_scene_is_piecewise_constant():
    cube = synth_cube(8, 9, 2, 12, seed=5, noise=0.0)
    for c in (1, 2):
        px = cube.reflectance[cube.labels == c]
        assert px.shape[0] > 0 and np.all(px == px[0])
    assert not np.array_equal(cube.reflectance[cube.labels == 1][0], cube.reflectance[cube.labels == 2][0])


def test_wavelengths_cover_every_stream():
    cube = synth_cube(4, 4, 2, 20)
    specs = split_bands(cube.wavelengths)
    assert all(s.n_bands > 0 for s in specs)


def test_nearest_centroid_separability():
    cube = synth_cube(24, 24, 5, 20, seed=0)
    x = cube.reflectance.reshape(-1, 20).astype(np.float64)
    y = cube.labels.reshape(-1)
    train, test = stratified_split(cube.labels, SplitSpec(0.10, seed=0))
    train, test = train.reshape(-1), test.reshape(-1)
    centroids = np.stack([x[train & (y == c)].mean(axis=0) for c in range(1, 6)])
    pred = np.argmin(((x[test, None, :] - centroids[None]) ** 2).sum(-1), axis=1) + 1
    assert np.mean(pred == y[test]) >= 0.99


def test_synth_errors():
    with pytest.raises(ConfigError):
        synth_cube(4, 4, 2, 6)
    with pytest.raises(ConfigError):
        synth_cube(2, 2, 5, 10)
