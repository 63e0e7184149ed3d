import numpy as np
import pytest

from mhc_hsi import numerics as nx


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def scan_oracle(tokens, p):
    """Plain-loop selective scan over one ``[T, D]`` sequence (single parameter set)."""
    get = {k.split(".")[-1]: v.data for k, v in p.named_parameters().items()}
    t_len, d = tokens.shape
    out = np.zeros((t_len, d))
    h = np.zeros((d, get["a_log"].shape[-1]))
    for t in range(t_len):
        u = tokens[t] / np.sqrt(np.mean(tokens[t] ** 2) + 1e-6) * get["norm"]
        x = u @ get["w_in"] + get["b_in"]
        gate = 1.0 / (1.0 + np.exp(-(u @ get["w_gate"] + get["b_gate"])))
        dt = np.log1p(np.exp(x @ get["w_dt"] + get["b_dt"]))
        bt, ct = x @ get["w_b"], x @ get["w_c"]
        for i in range(d):
            for s in range(h.shape[1]):
                decay = np.exp(-np.exp(get["a_log"][i, s]) * dt[i])
                h[i, s] = decay * h[i, s] + dt[i] * bt[s] * x[i]
        y = h @ ct + x * get["skip"]
        out[t] = (y * gate) @ get["w_out"] + get["b_out"]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def _grad_mode():
    yield
    nx._GRAD_ENABLED = True
