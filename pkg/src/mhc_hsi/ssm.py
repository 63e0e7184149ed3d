"""Selective state-space (Mamba-style) sequence scanner.

Per channel d and token t the hidden state evolves as::

    h[t] = exp(-exp(A_log[d]) * dt[t, d]) * h[t-1] + dt[t, d] * B[t] * x[t, d]
    y[t, d] = <C[t], h[t]> + skip[d] * x[t, d]

with ``dt = softplus(...)`` and ``B``, ``C`` projected from the token. The
scan is unidirectional and strictly causal. Tokens are RMS-normalized on
entry; output is gated by a sigmoid branch and projected back to the input
width.
"""

import numpy as np

from . import numerics as nx
from .exceptions import ContractError, DimensionError


def scan_core(x, dt, a_log, b, c):
    """Raw recurrence without projections, as one fused tape op.

    Shapes (``...`` is any batch prefix, T is time):
    ``x, dt: [..., T, D]``, ``a_log: [..., D, S]`` (no T axis),
    ``b, c: [..., T, S]``. Returns ``[..., T, D]``.
    """
    x, dt, a_log, b, c = (nx._lift(v) for v in (x, dt, a_log, b, c))
    if x.shape[-2] < 1:
        raise ContractError("selective scan needs at least one token")
    if dt.shape != x.shape or b.shape != c.shape or b.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"scan operands disagree: x {x.shape}, dt {dt.shape}, b {b.shape}, c {c.shape}")
    if a_log.shape[-2:] != (x.shape[-1], b.shape[-1]):
        raise DimensionError(f"a_log {a_log.shape} does not match width {x.shape[-1]} and state {b.shape[-1]}")
    xd, dtd, bd, cd = x.data, dt.data, b.data, c.data
    rate = np.exp(a_log.data)[..., None, :, :]
    # time-major views: [T, ..., D(, S)]
    decay = np.moveaxis(np.exp(-dtd[..., None] * rate), -3, 0)
    dtx = dtd * xd
    drive = np.moveaxis(dtx[..., None] * bd[..., None, :], -3, 0)
    steps = decay.shape[0]
    h = np.empty(np.broadcast_shapes(decay.shape, drive.shape))
    state = np.zeros(h.shape[1:])
    for t in range(steps):
        state = decay[t] * state + drive[t]
        h[t] = state
    h = np.moveaxis(h, 0, -3)
    y = np.einsum("...tds,...ts->...td", h, cd)

    def backward(gy):
        gyc = np.moveaxis(gy[..., None] * cd[..., None, :], -3, 0)
        gh = np.empty_like(gyc)
        carry = np.zeros(gyc.shape[1:])
        for t in range(steps - 1, -1, -1):
            carry = gyc[t] + carry
            gh[t] = carry
            carry = decay[t] * carry
        gh = np.moveaxis(gh, 0, -3)
        h_prev = np.zeros_like(h)
        h_prev[..., 1:, :, :] = h[..., :-1, :, :]
        g_decay = gh * h_prev * np.moveaxis(decay, 0, -3)
        g_dtx = np.einsum("...tds,...ts->...td", gh, bd)
        gb = np.einsum("...tds,...td->...ts", gh, dtx)
        gc = np.einsum("...tds,...td->...ts", h, gy)
        g_dt = g_dtx * xd - np.einsum("...tds,...ds->...td", g_decay, rate[..., 0, :, :])
        gx = g_dtx * dtd
        g_rate = -np.einsum("...tds,...td->...ds", g_decay, dtd)[..., None, :, :] * rate
        g_alog = nx._unbroadcast(g_rate.sum(axis=-3), a_log.shape)
        return (
            nx._unbroadcast(gx, x.shape),
            nx._unbroadcast(g_dt, dt.shape),
            g_alog,
            nx._unbroadcast(gb, b.shape),
            nx._unbroadcast(gc, c.shape),
        )

    return nx.Tensor._make(y, (x, dt, a_log, b, c), backward)


def scan_reference(x, dt, a_log, b, c):
    """Same recurrence composed from generic tape ops; used as a cross-check."""
    x, dt, a_log, b, c = (nx._lift(v) for v in (x, dt, a_log, b, c))
    rate = nx.exp(a_log)
    rate = rate.reshape(rate.shape[:-2] + (1,) + rate.shape[-2:])
    dt4 = dt.reshape(dt.shape + (1,))
    decay = nx.exp(-(dt4 * rate))
    b4 = b.reshape(b.shape[:-1] + (1, b.shape[-1]))
    drive = dt4 * b4 * x.reshape(x.shape + (1,))
    decay = decay + nx.Tensor(np.zeros(drive.shape))
    h = nx.linear_recurrence(decay, drive, axis=-3)
    c4 = c.reshape(c.shape[:-1] + (1, c.shape[-1]))
    return (h * c4).sum(axis=-1)


class SelectiveScan(nx.Module):
    """Gated selective scan with learned projections.

    ``copies=None`` gives one parameter set shared over any batch prefix of
    the tokens. ``copies=P`` stacks P independent parameter sets and expects
    tokens shaped ``[P, T, D]``, sequence p using parameter set p.
    """

    def __init__(self, width, state_size=8, copies=None, rng=None, name="scan"):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.width = width
        self.state_size = state_size
        self.copies = copies
        lead = () if copies is None else (copies,)
        d, s = width, state_size
        std = 1.0 / np.sqrt(d)

        def w(*shape):
            return rng.normal(0.0, std, size=lead + shape)

        self.norm = nx.Parameter(np.ones(d), f"{name}.norm")
        self.w_in = nx.Parameter(w(d, d), f"{name}.w_in")
        self.b_in = nx.Parameter(np.zeros(lead + (d,)), f"{name}.b_in")
        self.w_gate = nx.Parameter(w(d, d), f"{name}.w_gate")
        self.b_gate = nx.Parameter(np.zeros(lead + (d,)), f"{name}.b_gate")
        self.w_dt = nx.Parameter(w(d, d), f"{name}.w_dt")
        # softplus(-2) ~ 0.13: moderate initial step size
        self.b_dt = nx.Parameter(np.full(lead + (d,), -2.0), f"{name}.b_dt")
        self.w_b = nx.Parameter(w(d, s), f"{name}.w_b")
        self.w_c = nx.Parameter(w(d, s), f"{name}.w_c")
        self.a_log = nx.Parameter(np.broadcast_to(np.log(np.arange(1, s + 1.0)), lead + (d, s)).copy(), f"{name}.a_log")
        self.skip = nx.Parameter(np.ones(lead + (d,)), f"{name}.skip")
        self.w_out = nx.Parameter(w(d, d), f"{name}.w_out")
        self.b_out = nx.Parameter(np.zeros(lead + (d,)), f"{name}.b_out")

    def _bias(self, p):
        return p if self.copies is None else p.reshape(self.copies, 1, p.shape[-1])

    def forward(self, tokens):
        tokens = nx._lift(tokens)
        if tokens.ndim < 2 or tokens.shape[-1] != self.width:
            raise DimensionError(f"scan expects [..., T, {self.width}] tokens, got {tokens.shape}")
        if tokens.shape[-2] < 1:
            raise ContractError("selective scan needs at least one token")
        if self.copies is not None and (tokens.ndim != 3 or tokens.shape[0] != self.copies):
            raise DimensionError(f"scan with {self.copies} copies expects [{self.copies}, T, D], got {tokens.shape}")
        bias = self._bias
        tokens = nx.rms_norm(tokens, self.norm)
        x = tokens @ self.w_in + bias(self.b_in)
        gate = nx.sigmoid(tokens @ self.w_gate + bias(self.b_gate))
        dt = nx.softplus(x @ self.w_dt + bias(self.b_dt))
        y = scan_core(x, dt, self.a_log, x @ self.w_b, x @ self.w_c)
        y = y + x * bias(self.skip)
        return (y * gate) @ self.w_out + bias(self.b_out)


def selective_scan(tokens, params):
    """Run ``params`` (a :class:`SelectiveScan`) over ``[T, D]`` or batched tokens."""
    return params(tokens)


def scan_backward_check(params, tokens, h=1e-5):
    """Central-difference check of every parameter gradient of ``sum(out * w)``.

    ``w`` is a fixed random weighting so the check exercises every output.
    Returns a dict with the worst relative error and the per-parameter worst.
    """
    tokens = np.asarray(nx._as_array(tokens), dtype=np.float64)
    rng = np.random.default_rng(1234)
    with nx.no_grad():
        probe_w = rng.normal(size=params(nx.Tensor(tokens)).shape)

    def loss():
        return (params(nx.Tensor(tokens)) * probe_w).sum()

    params.zero_grads()
    loss().backward()
    report = {}
    for name, p in params.named_parameters().items():
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        with nx.no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = loss().item()
                flat[i] = orig - h
                down = loss().item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2 * h)
        report[name] = relative_error(analytic, numeric)
    params.zero_grads()
    return {"max_rel_err": max(report.values()), "per_param": report}


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximized."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
