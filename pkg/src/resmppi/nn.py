"""Minimal float64 feedforward network with reverse-mode gradients and Adam.

Weight file layout (all integers unsigned 32-bit little-endian)::

    magic      4 bytes  b"RMLP"
    version    u32      FORMAT_VERSION
    activation u32      index into ACTIVATIONS
    n_dims     u32      number of entries in layer_dims
    dims       u32[n_dims]
    payload    float64 little-endian, per layer: W (fan_in x fan_out, row-major) then b
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels

MAGIC = b"RMLP"
FORMAT_VERSION = 1
ACTIVATIONS = ("mish", "relu", "tanh")


class WeightFormatError(ValueError):
    pass


class BadMagicError(WeightFormatError):
    pass


class UnsupportedVersionError(WeightFormatError):
    pass


class TruncatedPayloadError(WeightFormatError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, layer):
        super().__init__(f"non-finite gradient in layer {layer}; Adam step rejected")
        self.layer = layer


def _act(name, z):
    if name == "mish":
        return kernels.mish_forward(z)[0]
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_and_grad(name, z):
    """Activation value and elementwise derivative."""
    if name == "mish":
        return kernels.mish_forward(z)
    if name == "relu":
        return np.maximum(z, 0.0), (z > 0.0).astype(float)
    t = np.tanh(z)
    return t, 1.0 - t * t


class Mlp:
    """Affine layers with a hidden activation and a linear output layer.

    ``weights[i]`` has shape ``(layer_dims[i], layer_dims[i + 1])`` so a batch of row
    vectors is mapped by ``x @ W + b``.
    """

    def __init__(self, layer_dims, activation="mish", weights=None, biases=None):
        self.layer_dims = [int(d) for d in layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError("layer_dims needs at least two positive entries")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        shapes = list(zip(self.layer_dims[:-1], self.layer_dims[1:]))
        if weights is None:
            weights = [np.zeros(s) for s in shapes]
        if biases is None:
            biases = [np.zeros(s[1]) for s in shapes]
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for i, (w, b, s) in enumerate(zip(self.weights, self.biases, shapes)):
            if w.shape != s or b.shape != (s[1],):
                raise ValueError(f"layer {i}: expected W{s} and b({s[1]},), got {w.shape} and {b.shape}")

    @classmethod
    def initialize(cls, layer_dims, activation="mish", rng=None):
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(rng)
        weights = []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        return cls(layer_dims, activation, weights)

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return Mlp(self.layer_dims, self.activation, self.weights, self.biases)

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1:] != (self.layer_dims[0],):
            raise ValueError(f"input trailing dimension {x.shape[-1:]} does not match {self.layer_dims[0]}")
        return x

    def forward(self, x):
        h = self._check_input(x)
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = _act(self.activation, h)
        return h

    __call__ = forward

    def forward_cache(self, x):
        """Forward pass that also returns the intermediates needed by :meth:`backward`."""
        h = self._check_input(x)
        inputs, slopes = [], []
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w + b
            if i < last:
                h, slope = _act_and_grad(self.activation, h)
                slopes.append(slope)
        return h, (inputs, slopes)

    def backward(self, cache, output_grad):
        """Return ``(param_grads, input_grad)``; gradients are summed over batch rows.

        ``param_grads`` is ordered like :attr:`params`.
        """
        inputs, slopes = cache
        g = np.asarray(output_grad, dtype=np.float64)
        grads = [None] * (2 * self.n_layers)
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * slopes[i]
            h = inputs[i]
            if h.ndim == 1:
                grads[2 * i] = np.outer(h, g)
                grads[2 * i + 1] = g.copy()
            else:
                h2 = h.reshape(-1, h.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                grads[2 * i] = h2.T @ g2
                grads[2 * i + 1] = g2.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g

    def to_bytes(self):
        header = MAGIC + struct.pack(
            f"<III{len(self.layer_dims)}I",
            FORMAT_VERSION,
            ACTIVATIONS.index(self.activation),
            len(self.layer_dims),
            *self.layer_dims,
        )
        payload = b"".join(p.astype("<f8").tobytes(order="C") for p in self.params)
        return header + payload

    @classmethod
    def from_bytes(cls, data, offset=0):
        """Parse a network starting at ``offset``; returns ``(net, next_offset)``."""
        data = memoryview(data)
        if len(data) - offset < 16:
            raise TruncatedPayloadError("weight header truncated")
        if bytes(data[offset:offset + 4]) != MAGIC:
            raise BadMagicError(f"bad magic {bytes(data[offset:offset + 4])!r}, expected {MAGIC!r}")
        version, act_id, n_dims = struct.unpack_from("<III", data, offset + 4)
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"weight format version {version} not supported (expected {FORMAT_VERSION})")
        if act_id >= len(ACTIVATIONS):
            raise WeightFormatError(f"unknown activation id {act_id}")
        pos = offset + 16
        if len(data) - pos < 4 * n_dims:
            raise TruncatedPayloadError("layer dims truncated")
        dims = list(struct.unpack_from(f"<{n_dims}I", data, pos))
        pos += 4 * n_dims
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            for shape in ((fan_in, fan_out), (fan_out,)):
                nbytes = 8 * int(np.prod(shape))
                if len(data) - pos < nbytes:
                    raise TruncatedPayloadError(
                        f"payload truncated: need {nbytes} bytes at offset {pos}, have {len(data) - pos}"
                    )
                arr = np.frombuffer(data[pos:pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
                (weights if len(shape) == 2 else biases).append(arr)
                pos += nbytes
        return cls(dims, ACTIVATIONS[act_id], weights, biases), pos

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            data = f.read()
        net, end = cls.from_bytes(data)
        if end != len(data):
            raise WeightFormatError(f"{path}: {len(data) - end} trailing bytes after network payload")
        return net


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, learning_rate=1e-3):
        return cls(
            learning_rate=learning_rate,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(state, params, grads):
    """Bias-corrected Adam update, applied to ``params`` in place.

    Raises :class:`NonFiniteGradientError` (before touching anything) when a gradient
    contains NaN or inf; the error carries the layer index (two params per layer).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state have different lengths")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ValueError(f"shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(i // 2)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params
