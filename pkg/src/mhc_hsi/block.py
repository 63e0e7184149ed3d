"""Manifold-constrained hyper-connection block.

A block holds two sublayers. Each sublayer normalizes the ``[L, n, D]``
stream state, derives per-pixel aggregation (pre), expansion (post) and
doubly stochastic mixing (res) matrices from it, and updates::

    R' = H_res @ R + H_post^T F(H_pre @ RMSNorm(R))

The first sublayer's ``F`` is the clustering-guided Mamba, which also reads
that sublayer's ``H_res`` as cluster maps; the second is a feed-forward net.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .cgm import CGM
from .exceptions import DimensionError
from .sinkhorn import SinkhornConfig, sinkhorn_project


@dataclass
class MappingSet:
    pre: nx.Tensor   # [L, n]
    post: nx.Tensor  # [L, n]
    res: nx.Tensor   # [L, n, n]


class MappingGenerator(nx.Module):
    """``alpha * tanh(sum_streams(R_norm @ theta)) + b`` for pre, post and res."""

    def __init__(self, dim, n_streams, alpha_init=0.01, res_diag_bias=2.0, name="maps"):
        super().__init__()
        self.dim = dim
        self.n = n_streams
        n = n_streams
        self.theta_pre = nx.Parameter(np.zeros((dim, n)), f"{name}.theta_pre")
        self.theta_post = nx.Parameter(np.zeros((dim, n)), f"{name}.theta_post")
        self.theta_res = nx.Parameter(np.zeros((dim, n * n)), f"{name}.theta_res")
        self.alpha_pre = nx.Parameter(np.array(alpha_init), f"{name}.alpha_pre")
        self.alpha_post = nx.Parameter(np.array(alpha_init), f"{name}.alpha_post")
        self.alpha_res = nx.Parameter(np.array(alpha_init), f"{name}.alpha_res")
        self.b_pre = nx.Parameter(np.zeros(n), f"{name}.b_pre")
        self.b_post = nx.Parameter(np.zeros(n), f"{name}.b_post")
        self.b_res = nx.Parameter((res_diag_bias * np.eye(n)).reshape(n * n), f"{name}.b_res")

    @staticmethod
    def _pre_activation(rn, theta, alpha, bias):
        return alpha * nx.tanh((rn @ theta).sum(axis=1)) + bias

    def forward(self, rn, sinkhorn=SinkhornConfig()):
        if rn.ndim != 3 or rn.shape[1:] != (self.n, self.dim):
            raise DimensionError(f"mapping generator expects [L, {self.n}, {self.dim}], got {rn.shape}")
        n_pixels = rn.shape[0]
        pre = nx.sigmoid(self._pre_activation(rn, self.theta_pre, self.alpha_pre, self.b_pre))
        post = 2.0 * nx.sigmoid(self._pre_activation(rn, self.theta_post, self.alpha_post, self.b_post))
        res_logits = self._pre_activation(rn, self.theta_res, self.alpha_res, self.b_res)
        res = sinkhorn_project(res_logits.reshape(n_pixels, self.n, self.n), sinkhorn)
        return MappingSet(pre, post, res)


def generate_mappings(rn, generator, sinkhorn=SinkhornConfig()):
    return generator(rn, sinkhorn)


class FFN(nx.Module):
    def __init__(self, dim, hidden=None, rng=None, name="ffn"):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = 4 * dim if hidden is None else hidden
        self.w1 = nx.Parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, hidden)), f"{name}.w1")
        self.b1 = nx.Parameter(np.zeros(hidden), f"{name}.b1")
        self.w2 = nx.Parameter(rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, dim)), f"{name}.w2")
        self.b2 = nx.Parameter(np.zeros(dim), f"{name}.b2")

    def forward(self, x):
        return nx.gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2


def sublayer(r_in, feature_fn, generator, gain, sinkhorn=SinkhornConfig(), uses_maps=False, trace=None):
    """One hyper-connection update of ``r_in: [L, n, D]``.

    ``feature_fn`` maps ``[L, D] -> [L, D]``; with ``uses_maps`` it is
    called as ``feature_fn(x, H_res)``. Mappings are appended to ``trace``
    when given.
    """
    rn = nx.rms_norm(r_in, gain)
    maps = generator(rn, sinkhorn)
    if trace is not None:
        trace.append(maps)
    n_pixels, n, dim = r_in.shape
    x_agg = (maps.pre.reshape(n_pixels, n, 1) * rn).sum(axis=1)
    y = feature_fn(x_agg, maps.res.data) if uses_maps else feature_fn(x_agg)
    mixed = nx.matmul(maps.res, r_in)
    return mixed + maps.post.reshape(n_pixels, n, 1) * y.reshape(n_pixels, 1, dim)


class MHCBlock(nx.Module):
    def __init__(self, dim, n_streams, groups=4, state_size=8, rho=0.25,
                 sinkhorn=SinkhornConfig(), rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.sinkhorn = sinkhorn
        self.norm1 = nx.Parameter(np.ones(dim), "norm1")
        self.maps1 = MappingGenerator(dim, n_streams, name="maps1")
        self.cgm = CGM(dim, n_streams, groups, state_size, rho, rng=rng)
        self.norm2 = nx.Parameter(np.ones(dim), "norm2")
        self.maps2 = MappingGenerator(dim, n_streams, name="maps2")
        self.ffn = FFN(dim, rng=rng)

    def forward(self, r, trace=None):
        r_hat = sublayer(r, self.cgm, self.maps1, self.norm1, self.sinkhorn, uses_maps=True, trace=trace)
        return sublayer(r_hat, self.ffn, self.maps2, self.norm2, self.sinkhorn, trace=trace)


def block_forward(r, block, trace=None):
    return block(r, trace)
