"""Loss values with analytic gradients: cross-entropy, SupCon, SoftTriple and their mix.

Every loss returns a :class:`LossBundle`. Batches are ``N x d`` float64
arrays, labels are integer arrays, and SoftTriple proxies are ``C x K x d``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .numerics import DimensionError, DomainError, logsumexp, normalize_rows, normalize_rows_backward, softmax


class BatchTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class SupConConfig:
    tau: float = 0.7

    def __post_init__(self):
        if not self.tau > 0:
            raise DomainError("tau must be > 0")


@dataclass(frozen=True)
class SoftTripleConfig:
    k: int = 25
    gamma: float = 0.1
    lam: float = 9.0
    delta: float = 0.7

    def __post_init__(self):
        if self.k < 1:
            raise DomainError("k must be >= 1")
        if not self.gamma > 0:
            raise DomainError("gamma must be > 0")
        if not self.lam > 0:
            raise DomainError("lambda must be > 0")


@dataclass(frozen=True)
class CombinedConfig:
    """``beta`` weights cross-entropy; ``1 - beta`` weights the DML term."""

    beta: float = 1.0
    dml: SupConConfig | SoftTripleConfig | None = None
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise DomainError(f"beta must lie in [0, 1], got {self.beta}")
        if self.dml is None and self.beta != 1.0:
            raise DomainError("beta must be 1 when no DML loss is configured")

    @property
    def kind(self) -> str:
        if isinstance(self.dml, SupConConfig):
            return "supcon"
        if isinstance(self.dml, SoftTripleConfig):
            return "softtriple"
        return "cce"


@dataclass
class LossBundle:
    value: float
    grad_embeddings: np.ndarray | None = None
    grad_proxies: np.ndarray | None = None
    grad_logits: np.ndarray | None = None
    skipped_anchors: int = 0
    parts: dict | None = None


def _check_labels(labels, n: int, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if num_classes is not None and n and (y.min() < 0 or y.max() >= num_classes):
        raise DomainError(f"labels must lie in [0, {num_classes})")
    return y


def cce(logits, labels) -> LossBundle:
    """Mean categorical cross-entropy of softmax(logits) against integer labels."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise DimensionError(f"logits must be N x C with N >= 1, got {z.shape}")
    n, c = z.shape
    y = _check_labels(labels, n, c)
    lse = logsumexp(z, axis=1)
    rows = np.arange(n)
    value = float(np.mean(lse - z[rows, y]))
    grad = softmax(z, axis=1)
    grad[rows, y] -= 1.0
    return LossBundle(value, grad_logits=grad / n)


def supcon(embeddings, labels, cfg: SupConConfig, normalize: bool = True) -> LossBundle:
    """Supervised contrastive loss summed over anchors.

    Anchors without a same-class partner are skipped and counted in
    ``skipped_anchors``.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"embeddings must be N x d, got {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise BatchTooSmallError("supcon needs a batch of at least 2")
    y = _check_labels(labels, n)
    if normalize:
        z, norms = normalize_rows(x)
    else:
        z = x
    sim = z @ z.T / cfg.tau
    eye = np.eye(n, dtype=bool)
    pos = (y[:, None] == y[None, :]) & ~eye
    npos = pos.sum(axis=1)
    active = npos > 0

    masked = np.where(eye, -np.inf, sim)
    lse = logsumexp(masked, axis=1)
    mean_pos = np.where(active, np.sum(np.where(pos, sim, 0.0), axis=1) / np.maximum(npos, 1), 0.0)
    value = float(np.sum(np.where(active, lse - mean_pos, 0.0)))

    # dL/dsim[i, a] = q_ia - [a in P(i)] / |P(i)| for every active anchor i
    q = np.exp(masked - lse[:, None])
    g = q - pos / np.maximum(npos, 1)[:, None]
    g[~active] = 0.0
    grad_z = (g + g.T) @ z / cfg.tau
    grad = normalize_rows_backward(z, norms, grad_z) if normalize else grad_z
    return LossBundle(value, grad_embeddings=grad, skipped_anchors=int(n - active.sum()))


def _check_proxies(proxies, d: int) -> np.ndarray:
    w = np.asarray(proxies, dtype=np.float64)
    if w.ndim != 3 or w.shape[2] != d:
        raise DimensionError(f"proxies must be C x K x {d}, got {w.shape}")
    return w


def softtriple_similarity(x, proxies, c: int, cfg: SoftTripleConfig) -> float:
    """Proxy-softmax-weighted similarity of one embedding to class ``c``."""
    x = np.asarray(x, dtype=np.float64)
    w = _check_proxies(proxies, x.shape[0])
    if not 0 <= c < w.shape[0]:
        raise DomainError(f"class index {c} out of range [0, {w.shape[0]})")
    s = w[c] @ x
    return float(np.dot(softmax(s / cfg.gamma), s))


def _class_similarities(x: np.ndarray, w: np.ndarray, gamma: float):
    c, k, d = w.shape
    s = (x @ w.reshape(c * k, d).T).reshape(x.shape[0], c, k)
    p = softmax(s / gamma, axis=2)
    return s, p, np.sum(p * s, axis=2)


def softtriple(embeddings, labels, proxies, cfg: SoftTripleConfig, normalize: bool = True) -> LossBundle:
    """SoftTriple loss (no proxy regulariser) with gradients for embeddings and proxies.

    The margin ``delta`` is subtracted from the true-class similarity only.
    Proxies are used as given; keeping them on the unit sphere is the
    caller's job.
    """
    x_raw = np.asarray(embeddings, dtype=np.float64)
    if x_raw.ndim != 2 or x_raw.shape[0] < 1:
        raise DimensionError(f"embeddings must be N x d with N >= 1, got {x_raw.shape}")
    n, d = x_raw.shape
    w = _check_proxies(proxies, d)
    y = _check_labels(labels, n, w.shape[0])
    if normalize:
        x, norms = normalize_rows(x_raw)
    else:
        x = x_raw
    s, p, sim = _class_similarities(x, w, cfg.gamma)
    rows = np.arange(n)
    logits = cfg.lam * sim
    logits[rows, y] -= cfg.lam * cfg.delta
    lse = logsumexp(logits, axis=1)
    value = float(np.mean(lse - logits[rows, y]))

    g_sim = softmax(logits, axis=1)
    g_sim[rows, y] -= 1.0
    g_sim *= cfg.lam / n
    # d sim_c / d s_ck = p_ck * (1 + (s_ck - sim_c) / gamma)
    g_s = g_sim[:, :, None] * p * (1.0 + (s - sim[:, :, None]) / cfg.gamma)
    flat = g_s.reshape(n, -1)
    grad_x = flat @ w.reshape(-1, d)
    grad_w = (flat.T @ x).reshape(w.shape)
    if normalize:
        grad_x = normalize_rows_backward(x, norms, grad_x)
    return LossBundle(value, grad_embeddings=grad_x, grad_proxies=grad_w)


def combined(embeddings, labels, logits, cfg: CombinedConfig, proxies=None) -> LossBundle:
    """``beta * CCE + (1 - beta) * DML``.

    The SupCon term is divided by the number of contributing anchors here,
    so both parts are per-example means. ``parts`` records the two
    unweighted values.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    kind = cfg.kind
    if kind == "softtriple" and proxies is None:
        raise DomainError("softtriple requires proxies")
    ce = cce(logits, labels)
    beta = cfg.beta
    grad_emb = np.zeros_like(emb)
    grad_prox = None
    dml_value = 0.0
    skipped = 0
    if kind == "supcon":
        if emb.shape[0] >= 2:
            sc = supcon(emb, labels, cfg.dml, cfg.normalize)
            anchors = emb.shape[0] - sc.skipped_anchors
            skipped = sc.skipped_anchors
            if anchors:
                dml_value = sc.value / anchors
                grad_emb = (1.0 - beta) * sc.grad_embeddings / anchors
        else:
            skipped = emb.shape[0]
    elif kind == "softtriple":
        st = softtriple(emb, labels, proxies, cfg.dml, cfg.normalize)
        dml_value = st.value
        grad_emb = (1.0 - beta) * st.grad_embeddings
        grad_prox = (1.0 - beta) * st.grad_proxies
    value = beta * ce.value + (1.0 - beta) * dml_value
    return LossBundle(value, grad_embeddings=grad_emb, grad_proxies=grad_prox,
                      grad_logits=beta * ce.grad_logits, skipped_anchors=skipped,
                      parts={"cce": ce.value, "dml": dml_value})


# -- finite-difference checking ---------------------------------------------

def grad_check_groups(fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
                      inputs: Mapping[str, np.ndarray], epsilon: float = 1e-5) -> dict[str, float]:
    """Max relative error per input group between analytic and central-difference gradients.

    ``fn`` maps a dict of arrays to ``(value, grads)`` with ``grads`` keyed
    like ``inputs``. Relative error is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise DomainError("epsilon must lie in [1e-7, 1e-3]")
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    _, analytic = fn(base)
    out = {}
    for key, arr in base.items():
        flat = arr.reshape(-1)
        ga = np.asarray(analytic[key], dtype=np.float64).reshape(-1)
        if ga.size != flat.size:
            raise DimensionError(f"gradient for {key!r} has {ga.size} entries, input has {flat.size}")
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp, _ = fn(base)
            flat[i] = orig - epsilon
            fm, _ = fn(base)
            flat[i] = orig
            num = (fp - fm) / (2.0 * epsilon)
            err = abs(ga[i] - num) / max(1.0, abs(ga[i]), abs(num))
            worst = max(worst, err)
        out[key] = worst
    return out


def grad_check(fn, inputs, epsilon: float = 1e-5) -> float:
    """Maximum relative gradient error over every coordinate of every input."""
    errs = grad_check_groups(fn, inputs, epsilon)
    return max(errs.values()) if errs else 0.0


def loss_fn(kind: str, labels, cfg=None, normalize: bool = True):
    """Adapter turning a loss into the ``fn(inputs) -> (value, grads)`` form used by :func:`grad_check`.

    Inputs are named ``logits``, ``embeddings`` and ``proxies`` as the loss needs.
    """
    if kind == "cce":
        def fn(p):
            b = cce(p["logits"], labels)
            return b.value, {"logits": b.grad_logits}
    elif kind == "supcon":
        def fn(p):
            b = supcon(p["embeddings"], labels, cfg, normalize)
            return b.value, {"embeddings": b.grad_embeddings}
    elif kind == "softtriple":
        def fn(p):
            b = softtriple(p["embeddings"], labels, p["proxies"], cfg, normalize)
            return b.value, {"embeddings": b.grad_embeddings, "proxies": b.grad_proxies}
    elif kind == "combined":
        def fn(p):
            b = combined(p["embeddings"], labels, p["logits"], cfg, p.get("proxies"))
            grads = {"embeddings": b.grad_embeddings, "logits": b.grad_logits}
            if "proxies" in p:
                grads["proxies"] = b.grad_proxies
            return b.value, grads
    else:
        raise DomainError(f"unknown loss kind {kind!r}")
    return fn
