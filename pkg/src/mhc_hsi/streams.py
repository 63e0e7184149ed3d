"""Spectrum-aware residual streams: band grouping, embedding, positional encoding."""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, DimensionError

STREAM_ORDER = ("FULL", "VIS", "NIR", "SWIR1", "SWIR2")

# [lo, hi) in nm; SWIR2's upper bound is closed
DEFAULT_RANGES = {
    "VIS": (400.0, 700.0),
    "NIR": (700.0, 1000.0),
    "SWIR1": (1000.0, 1800.0),
    "SWIR2": (1800.0, 2500.0),
}


@dataclass(frozen=True)
class StreamSpec:
    name: str
    band_indices: tuple

    @property
    def n_bands(self):
        return len(self.band_indices)


def check_wavelengths(wavelengths):
    """Validate a per-band wavelength table and return it as float64."""
    wl = np.asarray(wavelengths, dtype=np.float64)
    if wl.ndim != 1 or wl.size == 0:
        raise ConfigError(f"wavelength table must be a non-empty 1-D list, got shape {wl.shape}")
    if not np.all(np.isfinite(wl)) or np.any(wl <= 0) or np.any(wl >= 20000):
        raise ConfigError("wavelengths must lie in (0, 20000) nm")
    if np.any(np.diff(wl) <= 0):
        raise ConfigError("wavelengths must be strictly increasing")
    return wl


def _assign_group(nm, ranges):
    names = list(ranges)
    for name in names:
        lo, hi = ranges[name]
        if lo <= nm < hi:
            return name
    last = names[-1]
    if nm == ranges[last][1]:
        return last
    # outside every range: nearest range edge wins
    dist = [min(abs(nm - ranges[n][0]), abs(nm - ranges[n][1])) for n in names]
    return names[int(np.argmin(dist))]


def split_bands(wavelengths, ranges=None, band_indices=None):
    """Group bands into the five streams ``FULL, VIS, NIR, SWIR1, SWIR2``.

    ``ranges`` overrides the nm intervals of the four physical groups;
    ``band_indices`` maps group names to explicit index lists and takes
    precedence over wavelength ranges for the groups it names.
    """
    wl = check_wavelengths(wavelengths)
    ranges = dict(DEFAULT_RANGES if ranges is None else ranges)
    if sorted(ranges) != sorted(DEFAULT_RANGES):
        raise ConfigError(f"ranges must name exactly {sorted(DEFAULT_RANGES)}")
    ranges = {k: tuple(ranges[k]) for k in STREAM_ORDER[1:]}
    groups = {name: [] for name in STREAM_ORDER[1:]}
    for i, nm in enumerate(wl):
        groups[_assign_group(nm, ranges)].append(i)
    for name, idx in (band_indices or {}).items():
        if name not in groups:
            raise ConfigError(f"unknown stream {name!r} in band_indices")
        idx = [int(i) for i in idx]
        if any(i < 0 or i >= wl.size for i in idx):
            raise ConfigError(f"band_indices[{name!r}] out of range [0, {wl.size})")
        groups[name] = idx
    for name, idx in groups.items():
        if not idx:
            raise ConfigError(
                f"stream {name} has no bands; supply explicit band_indices for sensors without this range"
            )
    specs = [StreamSpec("FULL", tuple(range(wl.size)))]
    specs += [StreamSpec(name, tuple(groups[name])) for name in STREAM_ORDER[1:]]
    return specs


def duplicate_streams(n_bands, n):
    """``n`` copies of the full band set, for the expansion-rate ablation."""
    full = tuple(range(n_bands))
    return [StreamSpec("FULL" if i == 0 else f"DUP{i}", full) for i in range(n)]


def positional_encoding(height, width, dim):
    """Fixed 2-D sinusoidal table of shape ``[height * width, dim]``.

    The first half encodes the row index, the second half the column index;
    each half is ``[sin(p * f), cos(p * f)]`` over ``dim // 4`` geometric
    frequencies ``f = 10000 ** (-i / (dim // 4))``.
    """
    if dim % 4:
        raise ConfigError(f"positional encoding width must be divisible by 4, got {dim}")
    quarter = dim // 4
    freqs = 10000.0 ** (-np.arange(quarter) / quarter)

    def encode(pos):
        ang = pos[:, None] * freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    rows = encode(np.arange(height, dtype=np.float64))
    cols = encode(np.arange(width, dtype=np.float64))
    table = np.concatenate(
        [np.repeat(rows, width, axis=0), np.tile(cols, (height, 1))], axis=1
    )
    return table


class StreamEmbedding(nx.Module):
    """One linear band-to-hidden map per stream; stream 0 gets the position table."""

    def __init__(self, specs, dim, rng=None, tie_init=False):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.specs = list(specs)
        self.dim = dim
        self.weights = []
        self.biases = []
        first = None
        for spec in self.specs:
            if tie_init and first is not None:
                init = first.copy()
            else:
                init = rng.normal(0.0, 1.0 / np.sqrt(spec.n_bands), size=(spec.n_bands, dim))
                first = init if first is None else first
            w = nx.Parameter(init, f"embed.{spec.name}.weight")
            b = nx.Parameter(np.zeros(dim), f"embed.{spec.name}.bias")
            self._params[f"{spec.name}.weight"] = w
            self._params[f"{spec.name}.bias"] = b
            self.weights.append(w)
            self.biases.append(b)

    def forward(self, reflectance, pos_table=None):
        """``reflectance: [H, W, C]`` array -> stream state ``[L, n, D]``."""
        cube = np.asarray(reflectance, dtype=np.float64)
        if cube.ndim != 3:
            raise DimensionError(f"cube must be [H, W, C], got {cube.shape}")
        h, w, c = cube.shape
        flat = cube.reshape(h * w, c)
        if pos_table is None:
            pos_table = positional_encoding(h, w, self.dim)
        streams = []
        for i, (spec, weight, bias) in enumerate(zip(self.specs, self.weights, self.biases)):
            if max(spec.band_indices) >= c:
                raise DimensionError(f"stream {spec.name} needs band {max(spec.band_indices)}, cube has {c}")
            if weight.shape[0] != spec.n_bands:
                raise DimensionError(f"stream {spec.name} weight rows {weight.shape[0]} != {spec.n_bands} bands")
            feat = nx.Tensor(flat[:, list(spec.band_indices)]) @ weight + bias
            if i == 0:
                feat = feat + pos_table
            streams.append(feat)
        return nx.stack(streams, axis=1)


def embed_streams(cube, specs, embedding, pos_table=None):
    """Stack per-stream embeddings of ``cube`` (an ``HsiCube`` or ``[H, W, C]`` array)."""
    reflectance = getattr(cube, "reflectance", cube)
    if list(specs) != embedding.specs:
        raise DimensionError("stream specs do not match the embedding")
    return embedding(reflectance, pos_table)
