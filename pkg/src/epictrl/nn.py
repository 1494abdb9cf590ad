"""Small fully connected networks with hand-written backprop and Adam.

Inputs are batched row-wise: ``x`` has shape ``(batch, n_in)``; a 1-D input is
treated as a batch of one and the output is returned 1-D.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("tanh", "linear")


class TrainingError(RuntimeError):
    """Non-finite values reached the optimizer."""


@dataclass
class Network:
    """Affine layers with ``activation`` between them and a linear output."""

    weights: list  # weights[i] has shape (n_in_i, n_out_i)
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[0]} != "
                                 f"previous output {self.weights[i - 1].shape[1]}")

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def arrays(self) -> list:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def like(self, arrays) -> "Network":
        arrays = list(arrays)
        return Network(arrays[0::2], arrays[1::2], self.activation)

    def copy(self) -> "Network":
        return self.like(a.copy() for a in self.arrays())

    def zeros_like(self) -> "Network":
        return self.like(np.zeros_like(a) for a in self.arrays())


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def init_network(sizes, rng: np.random.Generator, activation: str = "tanh",
                 hidden_gain: float = np.sqrt(2.0), output_gain: float = 1.0) -> Network:
    """Orthogonal weights scaled by ``gain``, zero biases."""
    weights, biases = [], []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = output_gain if i == len(sizes) - 2 else hidden_gain
        weights.append(orthogonal(rng, a, b, gain))
        biases.append(np.zeros(b))
    return Network(weights, biases, activation)


def _act(z, kind):
    return np.tanh(z) if kind == "tanh" else z


def _as_batch(net: Network, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != net.n_in:
        raise ValueError(f"input width {x2.shape[-1]} does not match network input {net.n_in}")
    return x2, single


def forward(net: Network, x) -> np.ndarray:
    h, single = _as_batch(net, x)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = _act(h, net.activation)
    return h[0] if single else h


def gradients(net: Network, x, upstream) -> Network:
    """Gradient of ``sum(forward(net, x) * upstream)`` with respect to every parameter."""
    h, single = _as_batch(net, x)
    g = np.asarray(upstream, dtype=float)
    g = g[None, :] if g.ndim == 1 else g
    if g.shape != (h.shape[0], net.n_out):
        raise ValueError(f"upstream shape {g.shape} does not match output "
                         f"{(h.shape[0], net.n_out)}")
    last = len(net.weights) - 1
    inputs = []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        h = h @ w + b
        if i < last:
            h = _act(h, net.activation)
    gw, gb = [None] * len(net.weights), [None] * len(net.weights)
    for i in range(last, -1, -1):
        gw[i] = inputs[i].T @ g
        gb[i] = g.sum(axis=0)
        if i:
            g = g @ net.weights[i].T
            if net.activation == "tanh":
                g = g * (1.0 - inputs[i] ** 2)
    return Network(gw, gb, net.activation)


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_network(cls, net: Network, lr: float = 3e-4, **kw) -> "AdamState":
        arrays = net.arrays()
        return cls(lr=lr, m=[np.zeros_like(a) for a in arrays],
                   v=[np.zeros_like(a) for a in arrays], **kw)


def adam_step(opt: AdamState, net: Network, grads: Network) -> tuple[AdamState, Network]:
    """One bias-corrected Adam descent step; returns new state and parameters."""
    garrs = grads.arrays()
    for i, g in enumerate(garrs):
        if not np.all(np.isfinite(g)):
            kind = "bias" if i % 2 else "weight"
            raise TrainingError(f"non-finite gradient in layer {i // 2} {kind}")
    t = opt.step + 1
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(net.arrays(), garrs, opt.m, opt.v):
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        new_p.append(p - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps))
        new_m.append(m)
        new_v.append(v)
    state = AdamState(opt.lr, opt.beta1, opt.beta2, opt.eps, t, new_m, new_v)
    return state, net.like(new_p)


# -- checkpoint files ------------------------------------------------------------
#
# Layout: MAGIC, uint64 little-endian header length, UTF-8 JSON header
# {"format": 1, "activation": ..., "sizes": [...], "meta": {...}}, then every
# weight matrix (row-major) and bias vector in layer order as little-endian
# float64.

MAGIC = b"EPICTRL-NET\x00"


def save_network(net: Network, path, meta: dict | None = None):
    header = json.dumps({"format": 1, "activation": net.activation, "sizes": net.sizes,
                         "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for a in net.arrays():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not an epictrl network file")
        (n,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(n))


def load_network(path) -> tuple[Network, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not an epictrl network file")
    off = len(MAGIC)
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off:off + n])
    off += n
    sizes = header["sizes"]
    expected = sum(8 * (a * b + b) for a, b in zip(sizes[:-1], sizes[1:]))
    if off + expected != len(raw):
        raise ValueError(f"{path}: payload length does not match header")
    arrays = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        for shape in ((a, b), (b,)):
            count = int(np.prod(shape))
            arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=off)
                          .reshape(shape).astype(float))
            off += 8 * count
    return Network(arrays[0::2], arrays[1::2], header["activation"]), header.get("meta", {})
