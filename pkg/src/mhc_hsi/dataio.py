"""HSIC cube container, stratified splits and a synthetic scene generator.

HSIC layout (all integers little-endian)::

    offset  size        field
    0       4           magic b"HSIC"
    4       2           version (u16, currently 1)
    6       4 * 3       H, W, C (u32)
    18      4 * C       wavelengths in nm (f32), strictly increasing
    ...     4 * H*W*C   reflectance (f32), band-interleaved-by-pixel
    ...     2 * H*W     labels (u16), 0 = unlabeled, 1..K = classes
    ...     2           K (u16)
    ...                 K x (u16 byte length + UTF-8 class name)

Readers are strict: any trailing byte is an error.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DataError, FormatError
from .streams import check_wavelengths

MAGIC = b"HSIC"
VERSION = 1


@dataclass
class HsiCube:
    """Reflectance cube ``[H, W, C]`` with wavelengths and a label mask."""

    reflectance: np.ndarray
    wavelengths: np.ndarray
    labels: np.ndarray
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.reflectance = np.asarray(self.reflectance, dtype=np.float32)
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.reflectance.ndim != 3:
            raise FormatError(f"reflectance must be [H, W, C], got {self.reflectance.shape}")
        h, w, c = self.reflectance.shape
        if self.wavelengths.shape != (c,):
            raise FormatError(f"expected {c} wavelengths, got {self.wavelengths.shape}")
        check_wavelengths(self.wavelengths)
        if self.labels.shape != (h, w):
            raise FormatError(f"labels must be [{h}, {w}], got {self.labels.shape}")
        if not self.class_names:
            k = int(self.labels.max()) if self.labels.size else 0
            self.class_names = [f"class{i}" for i in range(1, k + 1)]
        if self.labels.size and int(self.labels.max()) > len(self.class_names):
            raise FormatError(f"label {int(self.labels.max())} exceeds class count {len(self.class_names)}")

    @property
    def shape(self):
        return self.reflectance.shape

    @property
    def n_pixels(self):
        return self.shape[0] * self.shape[1]

    @property
    def n_classes(self):
        return len(self.class_names)


def write_container(cube, path):
    h, w, c = cube.shape
    names = [n.encode("utf-8") for n in cube.class_names]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HIII", VERSION, h, w, c))
        fh.write(cube.wavelengths.astype("<f4").tobytes())
        fh.write(cube.reflectance.astype("<f4").tobytes())
        fh.write(cube.labels.astype("<u2").tobytes())
        fh.write(struct.pack("<H", len(names)))
        for raw in names:
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated payload reading {what} at offset {self.pos}: "
                f"need {n} bytes, {len(self.buf) - self.pos} available"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def read_container(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    rd = _Reader(buf)
    magic = rd.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version, h, w, c = struct.unpack("<HIII", rd.take(14, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    wl_offset = rd.pos
    wl = np.frombuffer(rd.take(4 * c, "wavelengths"), dtype="<f4")
    if np.any(np.diff(wl) <= 0):
        bad = int(np.argmax(np.diff(wl) <= 0)) + 1
        raise FormatError(f"wavelengths not strictly increasing at offset {wl_offset + 4 * bad}")
    refl = np.frombuffer(rd.take(4 * h * w * c, "reflectance"), dtype="<f4").reshape(h, w, c)
    labels = np.frombuffer(rd.take(2 * h * w, "labels"), dtype="<u2").reshape(h, w)
    (k,) = struct.unpack("<H", rd.take(2, "class count"))
    names = []
    for i in range(k):
        (n,) = struct.unpack("<H", rd.take(2, f"class name {i} length"))
        names.append(rd.take(n, f"class name {i}").decode("utf-8"))
    if rd.pos != len(buf):
        raise FormatError(f"{len(buf) - rd.pos} trailing bytes at offset {rd.pos}")
    return HsiCube(refl.astype(np.float32), wl.astype(np.float32), labels.astype(np.uint16), names)


@dataclass(frozen=True)
class SplitSpec:
    """Per-class training share: ``fraction`` or explicit ``counts`` (class label -> n)."""

    fraction: float = 0.10
    counts: dict = None
    seed: int = 0

    def __post_init__(self):
        if self.counts is None and not 0 < self.fraction <= 1:
            raise ConfigError(f"training fraction must be in (0, 1], got {self.fraction}")


def stratified_split(labels, spec=SplitSpec(), n_classes=None):
    """Boolean ``(train_mask, test_mask)`` over a label mask (0 = unlabeled).

    Class c with N_c pixels gets ``max(1, round(fraction * N_c))`` training
    pixels, chosen by a seeded shuffle; the rest are test pixels.
    """
    labels = np.asarray(labels)
    flat = labels.reshape(-1)
    k = int(flat.max()) if n_classes is None else int(n_classes)
    rng = np.random.default_rng(spec.seed)
    train = np.zeros(flat.shape, dtype=bool)
    test = np.zeros(flat.shape, dtype=bool)
    empty = [c for c in range(1, k + 1) if not np.any(flat == c)]
    if empty:
        raise DataError(f"classes without labeled pixels: {empty}")
    for c in range(1, k + 1):
        idx = np.flatnonzero(flat == c)
        if spec.counts is not None:
            n_train = int(spec.counts[c])
        else:
            n_train = max(1, int(np.floor(spec.fraction * idx.size + 0.5)))
        if n_train >= idx.size:
            raise DataError(f"class {c} has {idx.size} pixels; {n_train} for training leaves no test data")
        chosen = rng.permutation(idx)
        train[chosen[:n_train]] = True
        test[chosen[n_train:]] = True
    return train.reshape(labels.shape), test.reshape(labels.shape)


def synth_cube(height, width, n_classes, n_bands, seed=0, noise=0.01, require_streams=True):
    """Voronoi scene with one smooth Gaussian-bump spectrum per class.

    Wavelengths are spaced evenly over 400-2500 nm, so all four physical
    stream ranges hold bands once ``n_bands >= 8``.
    """
    if n_classes < 1 or n_classes > height * width:
        raise ConfigError(f"need 1 <= K <= H*W, got K={n_classes} for {height}x{width}")
    if require_streams and n_bands < 8:
        raise ConfigError(f"spectrum-split streams need at least 8 bands, got {n_bands}")
    rng = np.random.default_rng(seed)
    wl = np.linspace(400.0, 2500.0, n_bands)

    seeds = rng.choice(height * width, size=n_classes, replace=False)
    sy, sx = np.divmod(seeds, width)
    yy, xx = np.mgrid[0:height, 0:width]
    d2 = (yy[..., None] - sy) ** 2 + (xx[..., None] - sx) ** 2
    labels = (np.argmin(d2, axis=-1) + 1).astype(np.uint16)

    spectra = np.empty((n_classes, n_bands))
    for k in range(n_classes):
        centers = rng.uniform(400.0, 2500.0, size=3)
        widths = rng.uniform(100.0, 350.0, size=3)
        amps = rng.uniform(0.2, 0.7, size=3)
        base = rng.uniform(0.05, 0.25)
        bumps = amps[:, None] * np.exp(-0.5 * ((wl[None, :] - centers[:, None]) / widths[:, None]) ** 2)
        spectra[k] = base + bumps.sum(axis=0)
    refl = spectra[labels.astype(np.intp) - 1]
    if noise:
        refl = refl + rng.normal(0.0, noise, size=refl.shape)
    names = [f"synthetic{k + 1}" for k in range(n_classes)]
    return HsiCube(refl.astype(np.float32), wl.astype(np.float32), labels, names)


def cube_from_mat(data_path, data_key, gt_path, gt_key, wavelengths, class_names=None):
    """Build an :class:`HsiCube` from MATLAB files (e.g. the Indian Pines release).

    Needs scipy. Typical use::

        cube = cube_from_mat("Indian_pines_corrected.mat", "indian_pines_corrected",
                             "Indian_pines_gt.mat", "indian_pines_gt",
                             wavelengths=np.linspace(400, 2500, 200))
        write_container(cube, "indian_pines.hsic")

    Reflectance is scaled to [0, 1] by its global maximum.
    """
    from scipy.io import loadmat

    data = np.asarray(loadmat(data_path)[data_key], dtype=np.float64)
    gt = np.asarray(loadmat(gt_path)[gt_key])
    data = data / max(float(data.max()), 1e-12)
    check_wavelengths(wavelengths)
    return HsiCube(data, wavelengths, gt, list(class_names or []))
