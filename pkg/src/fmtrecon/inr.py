"""Coordinate network for the continuous fluorescence field.

A sinusoidal positional encoding lifts each coordinate into 2L frequency
bands (6L features for a 3D point); an MLP with 8 hidden layers of 512
units, a skip connection feeding the encoding into the 4th hidden layer,
a 128-unit layer, and a scalar softplus head maps the encoding to a
non-negative field value. Forward, backward, and the Adam update are
implemented directly on numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HIDDEN_WIDTH = 512
HIDDEN_DEPTH = 8
HEAD_WIDTH = 128
SKIP_LAYER = 3  # 0-based: the 4th hidden layer sees [h3, encoding]


@dataclass(frozen=True)
class EncodingConfig:
    """Frequency band count and the coordinate normalization box (mm)."""

    n_freqs: int
    box_min: tuple
    box_max: tuple

    def __post_init__(self):
        if self.n_freqs < 1:
            raise ValueError(f"n_freqs must be >= 1, got {self.n_freqs}")
        lo = np.asarray(self.box_min, dtype=float)
        hi = np.asarray(self.box_max, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ValueError(f"degenerate normalization box {self.box_min} "
                             f"to {self.box_max}")

    @property
    def dim(self):
        return 6 * self.n_freqs

    @classmethod
    def for_mesh(cls, mesh, n_freqs):
        lo, hi = mesh.bounding_box()
        return cls(n_freqs=n_freqs, box_min=tuple(lo), box_max=tuple(hi))


def normalize_coords(cfg: EncodingConfig, coords):
    """Affine map of the box onto [-1, 1] per axis."""
    lo = np.asarray(cfg.box_min)
    hi = np.asarray(cfg.box_max)
    return 2.0 * (np.asarray(coords, dtype=np.float64) - lo) / (hi - lo) - 1.0


def encode(cfg: EncodingConfig, coords):
    """Sinusoidal features (sin(2^k pi p), cos(2^k pi p)) per component.

    Coordinates are normalized to [-1, 1] first; raw mm values would
    alias through the high-frequency bands. Output is (batch, 6L) laid
    out as the full band stack of x, then y, then z.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    p = normalize_coords(cfg, coords)
    freqs = np.pi * (2.0 ** np.arange(cfg.n_freqs))
    out = np.empty((p.shape[0], 6 * cfg.n_freqs))
    for axis in range(3):
        phase = p[:, axis:axis + 1] * freqs
        block = out[:, axis * 2 * cfg.n_freqs:(axis + 1) * 2 * cfg.n_freqs]
        block[:, 0::2] = np.sin(phase)
        block[:, 1::2] = np.cos(phase)
    return out


class NeuralField:
    """MLP field with fixed architecture and explicit parameters.

    weights[i] has shape (fan_in, fan_out); the skip layer's fan_in is
    512 + 6L. The scalar head is zero-initialized so the initial field is
    the spatial constant softplus(0) * output_scale.
    """

    def __init__(self, encoding: EncodingConfig, weights, biases,
                 output_scale=1.0):
        self.encoding = encoding
        self.weights = weights
        self.biases = biases
        self.output_scale = float(output_scale)
        self._check_shapes()

    @classmethod
    def create(cls, encoding: EncodingConfig, seed=0, output_scale=1.0):
        d = encoding.dim
        fan = [(d, HIDDEN_WIDTH)]
        for i in range(1, HIDDEN_DEPTH):
            fan_in = HIDDEN_WIDTH + d if i == SKIP_LAYER else HIDDEN_WIDTH
            fan.append((fan_in, HIDDEN_WIDTH))
        fan.append((HIDDEN_WIDTH, HEAD_WIDTH))
        fan.append((HEAD_WIDTH, 1))
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in fan:
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        weights[-1][:] = 0.0  # constant initial field
        return cls(encoding, weights, biases, output_scale)

    def _check_shapes(self):
        d = self.encoding.dim
        n_layers = HIDDEN_DEPTH + 2
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ValueError(f"expected {n_layers} layers")
        expected_in = d
        for i, w in enumerate(self.weights):
            if i == SKIP_LAYER:
                expected_in = HIDDEN_WIDTH + d
            if w.shape[0] != expected_in:
                raise ValueError(f"layer {i} fan-in {w.shape[0]}, expected "
                                 f"{expected_in}")
            expected_in = w.shape[1]

    def parameters(self):
        """Live parameter arrays, interleaved (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_parameters(self):
        return sum(p.size for p in self.parameters())


def _softplus(x):
    # overflow-safe: softplus(x) = max(x, 0) + log1p(exp(-|x|))
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def field_forward(nf: NeuralField, coords, with_tape=True):
    """Evaluate the field at a batch of 3D coordinates.

    Returns (values, tape); the tape holds every layer input and the head
    pre-activation, enough for an exact backward pass. Pass
    with_tape=False for evaluation-only calls.
    """
    gamma = encode(nf.encoding, coords)
    activations = [gamma]
    h = gamma
    for i in range(HIDDEN_DEPTH + 1):
        if i == SKIP_LAYER:
            h = np.concatenate([h, gamma], axis=1)
            activations[-1] = h
        z = h @ nf.weights[i] + nf.biases[i]
        h = np.maximum(z, 0.0)
        activations.append(h)
    raw = (h @ nf.weights[-1] + nf.biases[-1]).ravel()
    values = nf.output_scale * _softplus(raw)
    if not with_tape:
        return values, None
    tape = {"activations": activations, "raw": raw}
    return values, tape


def field_eval(nf: NeuralField, coords, chunk=16384):
    """Tape-free evaluation in chunks, for large sample grids."""
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    out = np.empty(coords.shape[0])
    for start in range(0, coords.shape[0], chunk):
        sl = slice(start, start + chunk)
        out[sl] = field_forward(nf, coords[sl], with_tape=False)[0]
    return out


def field_backward(nf: NeuralField, tape, d_values):
    """Exact parameter gradients for given d(loss)/d(values).

    Returns a list matching nf.parameters() order. The tape must come
    from a field_forward over the same batch.
    """
    activations = tape["activations"]
    raw = tape["raw"]
    d_values = np.asarray(d_values, dtype=np.float64).ravel()
    if d_values.shape[0] != raw.shape[0]:
        raise ValueError(f"gradient batch {d_values.shape[0]} does not "
                         f"match tape batch {raw.shape[0]}")
    d = nf.encoding.dim

    # softplus' = sigmoid, computed stably from the raw pre-activation
    sig = np.empty_like(raw)
    pos = raw >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-raw[pos]))
    e = np.exp(raw[~pos])
    sig[~pos] = e / (1.0 + e)

    grads_w = [None] * len(nf.weights)
    grads_b = [None] * len(nf.biases)
    delta = (nf.output_scale * sig * d_values)[:, None]
    grads_w[-1] = activations[-1].T @ delta
    grads_b[-1] = delta.sum(axis=0)
    upstream = delta @ nf.weights[-1].T
    for i in range(HIDDEN_DEPTH, -1, -1):
        act_out = activations[i + 1]
        if i + 1 == SKIP_LAYER:
            # the tape stores the concatenated skip input there; the layer's
            # own relu output is its first block
            act_out = act_out[:, :HIDDEN_WIDTH]
        mask = act_out > 0
        dz = upstream * mask
        grads_w[i] = activations[i].T @ dz
        grads_b[i] = dz.sum(axis=0)
        upstream = dz @ nf.weights[i].T
        if i == SKIP_LAYER:
            upstream = upstream[:, :-d]  # drop the encoding branch
    out = []
    for gw, gb in zip(grads_w, grads_b):
        out.extend((gw, gb))
    return out


@dataclass
class AdamState:
    """First/second moment accumulators and step counter."""

    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected Adam update, applied to params in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads, and state must align")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != param {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def save_field(nf: NeuralField, path):
    """Versioned checkpoint; reload restores bit-identical outputs."""
    payload = {
        "format_version": np.int64(1),
        "n_freqs": np.int64(nf.encoding.n_freqs),
        "box_min": np.asarray(nf.encoding.box_min, dtype=np.float64),
        "box_max": np.asarray(nf.encoding.box_max, dtype=np.float64),
        "output_scale": np.float64(nf.output_scale),
        "n_layers": np.int64(len(nf.weights)),
    }
    for i, (w, b) in enumerate(zip(nf.weights, nf.biases)):
        payload[f"w{i}"] = w
        payload[f"b{i}"] = b
    np.savez(path, **payload)


def load_field(path) -> NeuralField:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = EncodingConfig(n_freqs=int(data["n_freqs"]),
                             box_min=tuple(data["box_min"]),
                             box_max=tuple(data["box_max"]))
        n_layers = int(data["n_layers"])
        weights = [data[f"w{i}"].copy() for i in range(n_layers)]
        biases = [data[f"b{i}"].copy() for i in range(n_layers)]
        return NeuralField(cfg, weights, biases,
                           output_scale=float(data["output_scale"]))
