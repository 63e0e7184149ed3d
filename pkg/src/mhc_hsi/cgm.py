"""Clustering-guided Mamba: spectral group scan, then cluster-wise spatial scans.

Every entry ``(i, j)`` of the per-pixel residual mixing matrix is read as a
soft membership map over the image. For each map the ``k`` highest-scoring
pixels form a token sequence (descending score, ties by ascending pixel
index), an independent selective scan processes it, and the processed
tokens are added back at their source pixels.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, ContractError, DimensionError
from .ssm import SelectiveScan


@dataclass(frozen=True)
class ClusterSelection:
    cluster: tuple
    indices: np.ndarray
    scores: np.ndarray


def top_k_count(rho, n_pixels):
    if not 0 < rho <= 1:
        raise ConfigError("rho must be in (0,1]")
    return max(1, int(np.floor(rho * n_pixels)))


def _ranked(scores, k):
    """Indices of the k largest scores per row; ties by ascending index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def select_topk(spec_out, hres, cluster, k):
    """Top-k pixels of membership map ``hres[:, i, j]`` and their gathered rows."""
    hres = nx._as_array(hres)
    n_pixels = hres.shape[0]
    if not 1 <= k <= n_pixels:
        raise ContractError(f"k must lie in [1, {n_pixels}], got {k}")
    i, j = cluster
    scores = hres[:, i, j]
    idx = _ranked(scores, k)
    sel = ClusterSelection((i, j), idx, scores[idx])
    return sel, nx.gather_rows(spec_out, idx)


def cluster_indices(hres, k):
    """``[n*n, k]`` selections for every map, row-major over ``(i, j)``."""
    hres = nx._as_array(hres)
    n_pixels, n, _ = hres.shape
    if not 1 <= k <= n_pixels:
        raise ContractError(f"k must lie in [1, {n_pixels}], got {k}")
    scores = hres.reshape(n_pixels, n * n).T
    return _ranked(scores, k)


def cluster_scan_and_remap(spec_out, hres, scan, k):
    """Scan each cluster's tokens and add the results back at their pixels.

    ``scan`` maps ``[n*n, k, D]`` token sequences to the same shape; in the
    model it is a :class:`SelectiveScan` with ``n*n`` parameter copies.
    Pixels picked by several clusters receive every contribution.
    """
    idx = cluster_indices(hres, k)
    tokens = nx.gather_rows(spec_out, idx)
    processed = scan(tokens)
    if processed.shape != tokens.shape:
        raise DimensionError(f"cluster scan returned {processed.shape}, expected {tokens.shape}")
    return nx.scatter_add_rows(spec_out, idx, processed)


class CGM(nx.Module):
    """Feature function of the first sublayer: ``[L, D] -> [L, D]``."""

    def __init__(self, dim, n_streams, groups=4, state_size=8, rho=0.25, rng=None):
        super().__init__()
        if dim % groups:
            raise ConfigError(f"hidden width {dim} is not divisible by {groups} spectral groups")
        top_k_count(rho, 1)
        rng = np.random.default_rng(0) if rng is None else rng
        self.dim = dim
        self.groups = groups
        self.rho = rho
        self.n_streams = n_streams
        self.spectral = SelectiveScan(dim // groups, state_size, rng=rng, name="spectral")
        self.spatial = SelectiveScan(dim, state_size, copies=n_streams * n_streams, rng=rng, name="spatial")

    def spectral_mamba(self, x):
        n_pixels = x.shape[0]
        tokens = x.reshape(n_pixels, self.groups, self.dim // self.groups)
        return x + self.spectral(tokens).reshape(n_pixels, self.dim)

    def forward(self, x_agg, hres):
        if x_agg.ndim != 2 or x_agg.shape[1] != self.dim:
            raise DimensionError(f"CGM expects [L, {self.dim}] input, got {x_agg.shape}")
        hres = nx._as_array(hres)
        if hres.shape != (x_agg.shape[0], self.n_streams, self.n_streams):
            raise DimensionError(f"cluster maps {hres.shape} do not match input {x_agg.shape}")
        spec = self.spectral_mamba(x_agg)
        k = top_k_count(self.rho, x_agg.shape[0])
        return cluster_scan_and_remap(spec, hres, self.spatial, k)


def spectral_mamba(x, cgm):
    return cgm.spectral_mamba(x)


def cgm_forward(x_agg, hres, cgm):
    return cgm(x_agg, hres)
