"""Feed-forward encoder head plus linear classifier, with hand-written backprop.

The encoder maps input embeddings through dense layers with an activation
between them (never after the last one). The classifier reads the encoder
output, so cross-entropy and the DML loss share the encoder.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import DimensionError, DomainError, Rng


@dataclass
class EncoderParams:
    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "tanh"

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]


@dataclass
class ClassifierParams:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    embeddings: np.ndarray
    activation: str


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    raise DomainError(f"unknown activation {name!r}")


def _act_grad(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - np.tanh(a) ** 2
    # subgradient at 0 is 0
    return (a > 0.0).astype(np.float64)


def glorot(rng: Rng, fan_out: int, fan_in: int) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform((fan_out, fan_in)) * 2.0 - 1.0) * s


def unit_proxies(rng: Rng, num_classes: int, k: int, dim: int) -> np.ndarray:
    w = rng.normal((num_classes, k, dim))
    return w / np.linalg.norm(w, axis=2, keepdims=True)


def init_params(d_in: int, hidden: Sequence[int], d_out: int, num_classes: int, k: int, rng: Rng,
                activation: str = "tanh") -> tuple[EncoderParams, ClassifierParams, np.ndarray]:
    """Glorot-uniform weights, zero biases, proxies uniform on the unit sphere."""
    for v in (d_in, d_out, num_classes, k, *hidden):
        if v < 1:
            raise DomainError("all sizes must be >= 1")
    dims = [d_in, *hidden, d_out]
    layers = [(glorot(rng, dims[i + 1], dims[i]), np.zeros(dims[i + 1])) for i in range(len(dims) - 1)]
    clf = ClassifierParams(glorot(rng, num_classes, d_out), np.zeros(num_classes))
    proxies = unit_proxies(rng, num_classes, k, d_out)
    return EncoderParams(layers, activation), clf, proxies


def forward(x_batch, enc: EncoderParams, clf: ClassifierParams):
    """Returns ``(embeddings, logits, cache)``."""
    h = np.asarray(x_batch, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != enc.input_dim:
        raise DimensionError(f"input must be N x {enc.input_dim}, got {h.shape}")
    if clf.weight.shape[1] != enc.output_dim:
        raise DimensionError("classifier width does not match encoder output")
    inputs, pre = [], []
    last = len(enc.layers) - 1
    for i, (W, b) in enumerate(enc.layers):
        inputs.append(h)
        a = h @ W.T + b
        pre.append(a)
        h = a if i == last else _act(enc.activation, a)
    logits = h @ clf.weight.T + clf.bias
    return h, logits, ForwardCache(inputs, pre, h, enc.activation)


def embed(x_batch, enc: EncoderParams) -> np.ndarray:
    h = np.asarray(x_batch, dtype=np.float64)
    last = len(enc.layers) - 1
    for i, (W, b) in enumerate(enc.layers):
        a = h @ W.T + b
        h = a if i == last else _act(enc.activation, a)
    return h


@dataclass
class Gradients:
    layers: list[tuple[np.ndarray, np.ndarray]]
    clf_weight: np.ndarray
    clf_bias: np.ndarray
    inputs: np.ndarray


def backward(cache: ForwardCache, enc: EncoderParams, clf: ClassifierParams,
             grad_embeddings, grad_logits) -> Gradients:
    """Reverse-mode pass. The logit gradient flows through the classifier and
    is added to ``grad_embeddings`` before entering the encoder."""
    n = cache.embeddings.shape[0]
    ge = np.asarray(grad_embeddings, dtype=np.float64)
    gl = np.asarray(grad_logits, dtype=np.float64)
    if ge.shape != cache.embeddings.shape or gl.shape != (n, clf.weight.shape[0]):
        raise DimensionError("gradient shapes do not match the cached forward pass")
    if len(cache.pre) != len(enc.layers):
        raise DimensionError("cache was produced by a different network")
    g_w = gl.T @ cache.embeddings
    g_b = gl.sum(axis=0)
    g = ge + gl @ clf.weight
    layer_grads = [None] * len(enc.layers)
    last = len(enc.layers) - 1
    for i in range(last, -1, -1):
        W, _ = enc.layers[i]
        if i != last:
            g = g * _act_grad(cache.activation, cache.pre[i])
        layer_grads[i] = (g.T @ cache.inputs[i], g.sum(axis=0))
        g = g @ W
    return Gradients(layer_grads, g_w, g_b, g)


# -- flat parameter vectors --------------------------------------------------

@dataclass(frozen=True)
class ParamLayout:
    """Ordered ``(name, shape)`` entries describing a flat parameter vector."""

    entries: tuple[tuple[str, tuple[int, ...]], ...]
    activation: str = "tanh"

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.entries)

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, shape in self.entries:
            stop = start + int(np.prod(shape))
            out[name] = slice(start, stop)
            start = stop
        return out

    def to_json(self) -> dict:
        return {"activation": self.activation, "entries": [[n, list(s)] for n, s in self.entries]}

    @classmethod
    def from_json(cls, obj: dict) -> "ParamLayout":
        return cls(tuple((n, tuple(s)) for n, s in obj["entries"]), obj.get("activation", "tanh"))


def layout_of(enc: EncoderParams, clf: ClassifierParams, proxies: np.ndarray | None = None) -> ParamLayout:
    entries = []
    for i, (W, b) in enumerate(enc.layers):
        entries += [(f"enc{i}.W", W.shape), (f"enc{i}.b", b.shape)]
    entries += [("clf.W", clf.weight.shape), ("clf.b", clf.bias.shape)]
    if proxies is not None:
        entries.append(("proxies", proxies.shape))
    return ParamLayout(tuple(entries), enc.activation)


def flatten(enc: EncoderParams, clf: ClassifierParams, proxies: np.ndarray | None = None):
    """Concatenate every parameter into one vector. Returns ``(vector, layout)``."""
    parts = []
    for W, b in enc.layers:
        parts += [W.ravel(), b.ravel()]
    parts += [clf.weight.ravel(), clf.bias.ravel()]
    if proxies is not None:
        parts.append(proxies.ravel())
    return np.concatenate(parts).astype(np.float64), layout_of(enc, clf, proxies)


def flatten_grads(grads: Gradients, grad_proxies: np.ndarray | None = None) -> np.ndarray:
    parts = []
    for gW, gb in grads.layers:
        parts += [gW.ravel(), gb.ravel()]
    parts += [grads.clf_weight.ravel(), grads.clf_bias.ravel()]
    if grad_proxies is not None:
        parts.append(grad_proxies.ravel())
    return np.concatenate(parts)


def unflatten(vec: np.ndarray, layout: ParamLayout):
    """Inverse of :func:`flatten`; proxies are ``None`` when the layout has none."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (layout.size,):
        raise DimensionError(f"vector of length {vec.size} does not match layout size {layout.size}")
    sl = layout.slices()
    shapes = dict(layout.entries)
    get = lambda name: vec[sl[name]].reshape(shapes[name]).copy()
    n_layers = sum(1 for name, _ in layout.entries if name.endswith(".W") and name.startswith("enc"))
    layers = [(get(f"enc{i}.W"), get(f"enc{i}.b")) for i in range(n_layers)]
    proxies = get("proxies") if "proxies" in sl else None
    return EncoderParams(layers, layout.activation), ClassifierParams(get("clf.W"), get("clf.b")), proxies


def save_checkpoint(path, vec: np.ndarray, layout: ParamLayout) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"layout": layout.to_json(), "values": vec.tolist()}, fh)
        fh.write("\n")


def load_checkpoint(path) -> tuple[np.ndarray, ParamLayout]:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    layout = ParamLayout.from_json(obj["layout"])
    vec = np.array(obj["values"], dtype=np.float64)
    if vec.shape != (layout.size,):
        raise DimensionError("checkpoint values do not match its layout")
    return vec, layout
