"""Network assembly, loss, Adam training loop, checkpoints and residual-map export."""

import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .block import MHCBlock
from .exceptions import ConfigError, ContractError, DivergenceError, FormatError, NumericError
from .metrics import evaluate
from .sinkhorn import SinkhornConfig
from .ssm import relative_error
from .streams import StreamEmbedding, duplicate_streams, positional_encoding, split_bands

STREAM_MODES = ("spectrum", "duplicate")


@dataclass
class ModelConfig:
    hidden_dim: int = 16
    n_streams: int = 5
    blocks: int = 6
    groups: int = 4
    state_size: int = 8
    rho: float = 0.25
    sinkhorn_iters: int = 10
    lr: float = 1e-3
    steps: int = 1000
    seed: int = 0
    stream_mode: str = "spectrum"
    train_fraction: float = 0.10

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.stream_mode not in STREAM_MODES:
            raise ConfigError(f"stream mode must be one of {STREAM_MODES}, got {self.stream_mode!r}")
        if self.stream_mode == "spectrum" and self.n_streams != 5:
            raise ConfigError("spectrum-split streams fix n = 5; use duplicate mode for other n")
        if self.n_streams < 1:
            raise ConfigError("n must be >= 1")
        if self.blocks < 1:
            raise ConfigError("blocks must be >= 1")
        if self.hidden_dim < 4 or self.hidden_dim % 4:
            raise ConfigError(f"hidden width must be a positive multiple of 4, got {self.hidden_dim}")
        if self.groups < 1 or self.hidden_dim % self.groups:
            raise ConfigError(f"hidden width {self.hidden_dim} is not divisible by {self.groups} groups")
        if self.state_size < 1:
            raise ConfigError("state size must be >= 1")
        if not 0 < self.rho <= 1:
            raise ConfigError("rho must be in (0,1]")
        if self.sinkhorn_iters < 1:
            raise ConfigError("sinkhorn iterations must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train fraction must be in (0,1)")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def band_statistics(reflectance):
    """Per-band mean and standard deviation over all pixels of ``[H, W, C]``."""
    flat = np.asarray(reflectance, dtype=np.float64).reshape(-1, np.shape(reflectance)[-1])
    std = flat.std(axis=0)
    return flat.mean(axis=0), np.where(std > 1e-12, std, 1.0)


class MHCNetwork(nx.Module):
    """Standardize bands -> streams -> hyper-connection blocks -> stream mean -> linear head.

    ``band_mean`` / ``band_std`` are fixed (not trained) input statistics;
    they default to the identity transform.
    """

    def __init__(self, config, wavelengths, n_classes, band_mean=None, band_std=None):
        super().__init__()
        config.validate()
        self.config = config
        self.wavelengths = np.asarray(wavelengths, dtype=np.float64)
        self.n_classes = int(n_classes)
        c = self.wavelengths.size
        self.band_mean = np.zeros(c) if band_mean is None else np.asarray(band_mean, dtype=np.float64)
        self.band_std = np.ones(c) if band_std is None else np.asarray(band_std, dtype=np.float64)
        if self.band_mean.shape != (c,) or self.band_std.shape != (c,):
            raise ConfigError(f"band statistics must have {c} entries")
        rng = np.random.default_rng(config.seed)
        if config.stream_mode == "spectrum":
            specs = split_bands(self.wavelengths)
        else:
            specs = duplicate_streams(self.wavelengths.size, config.n_streams)
        d = config.hidden_dim
        self.embedding = StreamEmbedding(specs, d, rng=rng, tie_init=config.stream_mode == "duplicate")
        sink = SinkhornConfig(iterations=config.sinkhorn_iters)
        self.blocks = [
            MHCBlock(d, config.n_streams, config.groups, config.state_size, config.rho, sink, rng=rng)
            for _ in range(config.blocks)
        ]
        self.head_w = nx.Parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, self.n_classes)), "head_w")
        self.head_b = nx.Parameter(np.zeros(self.n_classes), "head_b")
        for name, p in self.named_parameters().items():
            p.name = name
        self._pos_cache = {}

    @property
    def stream_names(self):
        return [s.name for s in self.embedding.specs]

    def pos_table(self, height, width):
        key = (height, width)
        if key not in self._pos_cache:
            self._pos_cache[key] = positional_encoding(height, width, self.config.hidden_dim)
        return self._pos_cache[key]

    def stream_state(self, reflectance):
        reflectance = np.asarray(reflectance)
        if reflectance.ndim != 3 or reflectance.shape[2] != self.wavelengths.size:
            raise ConfigError(
                f"cube shape {reflectance.shape} does not match the model's {self.wavelengths.size} bands"
            )
        h, w, _ = reflectance.shape
        scaled = (reflectance.astype(np.float64) - self.band_mean) / self.band_std
        return self.embedding(scaled, self.pos_table(h, w))

    def features(self, reflectance, trace=None):
        r = self.stream_state(reflectance)
        for block in self.blocks:
            r = block(r, trace)
        return r.mean(axis=1)

    def forward(self, reflectance, trace=None):
        """Logits ``[H*W, K]`` for every pixel of ``reflectance: [H, W, C]``."""
        return self.features(reflectance, trace) @ self.head_w + self.head_b


def forward(cube, network):
    return network(getattr(cube, "reflectance", cube))


def masked_cross_entropy(logits, labels, train_mask):
    """Mean cross-entropy over masked pixels; ``labels`` are 1..K with 0 unlabeled."""
    labels = np.asarray(labels).reshape(-1)
    idx = np.flatnonzero(np.asarray(train_mask, dtype=bool).reshape(-1))
    if idx.size == 0:
        raise ContractError("training mask selects no pixels")
    if np.any(labels[idx] == 0):
        raise ContractError("training mask includes unlabeled pixels")
    return nx.cross_entropy(nx.gather_rows(logits, idx), labels[idx].astype(np.intp) - 1)


class Adam:
    """Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _max_abs_grad(params):
    vals = [np.max(np.abs(p.grad)) for p in params if p.grad is not None and p.grad.size]
    return float(max(vals)) if vals else 0.0


def train(cube, train_mask, config, network=None, callback=None):
    """Full-image gradient descent on the masked cross-entropy.

    Returns ``(network, history)``; history rows are
    ``{"step", "loss", "train_oa"}`` measured before each update.
    """
    if network is None:
        mean, std = band_statistics(cube.reflectance)
        network = MHCNetwork(config, cube.wavelengths, cube.n_classes, mean, std)
    params = network.parameters()
    opt = Adam(params, lr=config.lr)
    labels = cube.labels.reshape(-1)
    mask = np.asarray(train_mask, dtype=bool).reshape(-1)
    reflectance = cube.reflectance
    history = []
    max_grad = 0.0
    for step in range(config.steps):
        network.zero_grads()
        try:
            logits = network(reflectance)
        except NumericError:
            # non-finite activations inside the network; report the last update's gradient
            raise DivergenceError(step, max_grad) from None
        loss = masked_cross_entropy(logits, labels, mask)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(step, max_grad)
        loss.backward()
        max_grad = _max_abs_grad(params)
        if not np.isfinite(max_grad):
            raise DivergenceError(step, max_grad)
        pred = logits.data.argmax(axis=1)
        train_oa = 100.0 * float(np.mean(pred[mask] == labels[mask].astype(np.intp) - 1))
        row = {"step": step, "loss": value, "train_oa": train_oa}
        history.append(row)
        if callback is not None:
            callback(row)
        opt.step()
    network.zero_grads()
    return network, history


def predict_logits(network, reflectance):
    with nx.no_grad():
        return network(reflectance).data


def evaluate_network(network, cube, mask):
    return evaluate(predict_logits(network, cube.reflectance), cube.labels, mask, network.n_classes)


def gradient_check(network, reflectance, labels, mask, h=1e-5, entries=3, seed=0, floor=1e-6):
    """Central-difference check of the masked loss against backprop.

    Each parameter tensor is probed along one random direction (covering
    every entry at once) and at ``entries`` randomly chosen single entries.
    Relative errors use ``floor * max(1, max |grad|)`` as the smallest
    denominator, so derivatives that vanish analytically (round-off on both
    sides) do not count as failures. Returns ``{"max_rel_err", "per_param"}``.
    """
    rng = np.random.default_rng(seed)

    def loss():
        return masked_cross_entropy(network(reflectance), labels, mask)

    network.zero_grads()
    loss().backward()
    named = network.named_parameters()
    scale = floor * max(1.0, max(float(np.max(np.abs(p.grad))) for p in named.values()))
    report = {}
    for name, p in named.items():
        grad = p.grad.copy()
        base = p.data.copy()
        probes = [rng.normal(size=base.shape)]
        for i in rng.choice(base.size, size=min(entries, base.size), replace=False):
            e = np.zeros(base.size)
            e[i] = 1.0
            probes.append(e.reshape(base.shape))
        worst = 0.0
        with nx.no_grad():
            for v in probes:
                p.data = base + h * v
                up = loss().item()
                p.data = base - h * v
                down = loss().item()
                p.data = base
                worst = max(worst, relative_error(np.sum(grad * v), (up - down) / (2 * h), scale))
        report[name] = worst
    network.zero_grads()
    return {"max_rel_err": max(report.values()), "per_param": report}


# residual maps ------------------------------------------------------------

SUBLAYERS = ("cgm", "ffn")


def hres_tensor(network, reflectance, layer, sublayer="cgm"):
    """``[L, n, n]`` residual mixing matrices of one sublayer."""
    if not 0 <= layer < len(network.blocks):
        raise ConfigError(f"layer must be in [0, {len(network.blocks)}), got {layer}")
    if sublayer not in SUBLAYERS:
        raise ConfigError(f"sublayer must be one of {SUBLAYERS}, got {sublayer!r}")
    trace = []
    with nx.no_grad():
        r = network.stream_state(reflectance)
        for block in network.blocks[: layer + 1]:
            r = block(r, trace)
    return trace[2 * layer + SUBLAYERS.index(sublayer)].res.data


def export_hres_maps(network, cube, layer, sublayer="cgm"):
    """Raw membership maps ``{"SRC_to_DST": [H, W]}`` of one sublayer.

    Map ``(i, j)`` holds how much input stream j contributes to output
    stream i, so it is named ``<stream j>_to_<stream i>``. Keys are ordered
    row-major over ``(i, j)``.
    """
    h, w, _ = cube.shape
    res = hres_tensor(network, cube.reflectance, layer, sublayer)
    names = network.stream_names
    n = len(names)
    return {
        f"{names[j]}_to_{names[i]}": res[:, i, j].reshape(h, w)
        for i in range(n)
        for j in range(n)
    }


# checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"MHC1"


def save_checkpoint(network, path, extra=None):
    """Binary checkpoint: magic, JSON header, named float64 parameter table.

    Layout (little-endian): ``b"MHC1"``, u32 header length, UTF-8 JSON
    header (sorted keys), u32 parameter count, then per parameter u16 name
    length, name, u8 rank, u32 extents, float64 values.
    """
    header = {
        "config": asdict(network.config),
        "wavelengths": [float(v) for v in network.wavelengths],
        "band_mean": [float(v) for v in network.band_mean],
        "band_std": [float(v) for v in network.band_std],
        "n_classes": network.n_classes,
        "streams": network.stream_names,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    named = network.named_parameters()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(named)))
        for name, p in named.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return _parse_header(buf)[0]


def _parse_header(buf):
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r} at offset 0")
    if len(buf) < 8:
        raise FormatError("truncated checkpoint header at offset 4")
    (n,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + n:
        raise FormatError(f"truncated checkpoint header at offset 8: need {n} bytes")
    return json.loads(buf[8:8 + n].decode("utf-8")), 8 + n


def load_checkpoint(path):
    """Rebuild the network stored by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        buf = fh.read()
    header, pos = _parse_header(buf)
    config = ModelConfig.from_dict(header["config"])
    network = MHCNetwork(
        config, header["wavelengths"], header["n_classes"], header["band_mean"], header["band_std"]
    )
    named = network.named_parameters()
    try:
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(buf):
                raise FormatError(f"truncated values of {name} at offset {pos}")
            values = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            if name not in named or named[name].shape != tuple(shape):
                raise FormatError(f"checkpoint parameter {name} {tuple(shape)} does not fit the model")
            named[name].data = values.astype(np.float64)
    except struct.error:
        raise FormatError(f"truncated checkpoint at offset {pos}") from None
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes at offset {pos}")
    if count != len(named):
        raise FormatError(f"checkpoint has {count} parameters, model needs {len(named)}")
    return network
