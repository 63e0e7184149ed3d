"""Differentiable Sinkhorn-Knopp projection onto doubly stochastic matrices."""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, DimensionError, NumericError


@dataclass(frozen=True)
class SinkhornConfig:
    """Unrolled projection settings.

    ``tolerance`` only feeds :func:`marginal_error` diagnostics; the number of
    passes is always exactly ``iterations``.
    """

    iterations: int = 10
    temperature: float = 1.0
    tolerance: float = 1e-6

    def __post_init__(self):
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ConfigError(f"sinkhorn iterations must be a positive integer, got {self.iterations}")
        if not self.temperature > 0:
            raise ConfigError(f"sinkhorn temperature must be > 0, got {self.temperature}")


def _check_logits(logits):
    if logits.ndim < 2 or logits.shape[-1] != logits.shape[-2]:
        raise DimensionError(f"sinkhorn needs [..., n, n] input, got {logits.shape}")
    if logits.shape[-1] < 1:
        raise DimensionError("sinkhorn needs n >= 1")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("sinkhorn input contains non-finite entries")


def sinkhorn_project(logits, cfg=SinkhornConfig()):
    """Map ``[..., n, n]`` logits to (approximately) doubly stochastic matrices.

    Entries are lifted with ``exp(logits / temperature)`` and then rows and
    columns are normalized alternately, rows first, for ``cfg.iterations``
    passes. Column sums are exact to round-off; row sums converge.
    Backward runs through every pass.
    """
    logits = nx._lift(logits)
    _check_logits(logits)
    m = np.exp(logits.data / cfg.temperature)
    history = []
    for _ in range(cfg.iterations):
        rows = m.sum(axis=-1, keepdims=True)
        m = m / rows
        cols = m.sum(axis=-2, keepdims=True)
        history.append((rows, m, cols))
        m = m / cols
    out = m
    lifted = np.exp(logits.data / cfg.temperature)

    def backward(g):
        y = out
        for rows, mid, cols in reversed(history):
            # y = mid / cols (column pass), mid = prev / rows (row pass)
            g = (g - (g * y).sum(axis=-2, keepdims=True)) / cols
            g = (g - (g * mid).sum(axis=-1, keepdims=True)) / rows
            y = mid * rows
        return (g * lifted / cfg.temperature,)

    return nx.Tensor._make(out, (logits,), backward)


def sinkhorn_reference(logits, cfg=SinkhornConfig()):
    """The same projection composed from generic tape ops."""
    logits = nx._lift(logits)
    _check_logits(logits)
    m = nx.exp(nx.scale(logits, 1.0 / cfg.temperature))
    for _ in range(cfg.iterations):
        m = m / m.sum(axis=-1, keepdims=True)
        m = m / m.sum(axis=-2, keepdims=True)
    return m


def marginal_error(m):
    """Largest deviation of any row or column sum from one."""
    m = nx._as_array(m)
    rows = np.abs(m.sum(axis=-1) - 1.0).max()
    cols = np.abs(m.sum(axis=-2) - 1.0).max()
    return float(max(rows, cols))


def doubly_stochastic_residual(m, r, check_tol=None):
    """Per-pixel stream mixing ``m @ r`` for ``m: [..., n, n]``, ``r: [..., n, D]``.

    With ``check_tol`` set, the marginals of ``m`` are verified first.
    """
    m, r = nx._lift(m), nx._lift(r)
    if m.shape[-1] != m.shape[-2] or m.shape[-1] != r.shape[-2]:
        raise DimensionError(f"mixing matrix {m.shape} does not match stream state {r.shape}")
    if check_tol is not None:
        err = marginal_error(m)
        if err > check_tol:
            raise NumericError(f"mixing matrix is not doubly stochastic (marginal error {err:.2e})")
    return nx.matmul(m, r)
