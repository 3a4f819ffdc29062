"""Mini-batch training: linear warmup, AdamW with decoupled decay, proxy renormalisation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import model
from .dataio import Dataset
from .losses import CombinedConfig, SoftTripleConfig, SupConConfig, combined
from .numerics import DomainError, Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 1e-3
    epochs: int = 8
    warmup_frac: float = 0.06
    weight_decay: float = 0.01
    seed: int = 0
    loss: CombinedConfig = field(default_factory=CombinedConfig)
    hidden: tuple[int, ...] = (64,)
    d_out: int = 32
    activation: str = "tanh"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.loss.kind == "supcon" and self.batch_size < 2:
            raise DomainError("supcon needs batch_size >= 2")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise DomainError("warmup_frac must lie in [0, 1)")
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if not self.base_lr > 0:
            raise DomainError("base_lr must be > 0")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be >= 0")
        if self.activation not in ("tanh", "relu"):
            raise DomainError(f"unknown activation {self.activation!r}")


# Tuned defaults per training-set size.
DEFAULT_EPOCHS = {20: 128, 100: 64, 1000: 8}
DEFAULT_SOFTTRIPLE = {
    20: (SoftTripleConfig(k=25, gamma=0.1, lam=9.0, delta=0.7), 0.4),
    100: (SoftTripleConfig(k=2000, gamma=0.1, lam=4.0, delta=0.7), 0.8),
    1000: (SoftTripleConfig(k=2000, gamma=0.1, lam=7.0, delta=0.9), 0.9),
}
DEFAULT_SUPCON = {
    20: (SupConConfig(tau=0.6), 0.9),
    100: (SupConConfig(tau=0.7), 0.9),
    1000: (SupConConfig(tau=0.7), 0.9),
}


def _nearest_size(train_size: int) -> int:
    return min(DEFAULT_EPOCHS, key=lambda s: (abs(math.log(s) - math.log(max(train_size, 1))), s))


def default_loss(kind: str, train_size: int) -> CombinedConfig:
    """Default loss settings for ``kind`` at the closest tabulated train size (20/100/1000)."""
    size = _nearest_size(train_size)
    if kind == "cce":
        return CombinedConfig(beta=1.0)
    if kind == "softtriple":
        dml, beta = DEFAULT_SOFTTRIPLE[size]
    elif kind == "supcon":
        dml, beta = DEFAULT_SUPCON[size]
    else:
        raise DomainError(f"unknown loss kind {kind!r}")
    return CombinedConfig(beta=beta, dml=dml)


def default_config(kind: str, train_size: int, **overrides) -> TrainConfig:
    size = _nearest_size(train_size)
    cfg = TrainConfig(epochs=DEFAULT_EPOCHS[size], loss=default_loss(kind, train_size))
    return replace(cfg, **overrides)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup over ``ceil(warmup_frac * total_steps)`` steps, then constant."""
    if not 0 <= step < total_steps:
        raise DomainError(f"step {step} outside [0, {total_steps})")
    warmup = math.ceil(warmup_frac * total_steps)
    if step < warmup:
        return base_lr * (step + 1) / warmup
    return base_lr


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adamw_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float, cfg: TrainConfig,
               decay_mask: np.ndarray | None = None, proxy_slice: slice | None = None,
               proxy_shape: tuple[int, ...] | None = None) -> tuple[np.ndarray, AdamState]:
    """One AdamW update; returns new params and state without mutating the inputs.

    Decay is ``params -= lr * wd * params`` on entries where ``decay_mask`` is
    true, applied before the moment update. Entries in ``proxy_slice`` are
    renormalised to unit length per proxy afterwards.
    """
    if params.shape != grads.shape:
        raise DomainError("params and grads differ in shape")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = params.copy()
    if cfg.weight_decay:
        decay = lr * cfg.weight_decay
        if decay_mask is None:
            new *= 1.0 - decay
        else:
            new[decay_mask] *= 1.0 - decay
    new -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    if proxy_slice is not None:
        p = new[proxy_slice].reshape(-1, proxy_shape[-1])
        new[proxy_slice] = (p / np.linalg.norm(p, axis=1, keepdims=True)).ravel()
    return new, AdamState(m, v, t)


@dataclass
class TrainHistory:
    step: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    cce: list[float] = field(default_factory=list)
    dml: list[float] = field(default_factory=list)
    skipped_anchors: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.step)

    def records(self) -> list[dict]:
        return [{"step": s, "lr": lr, "loss": l, "cce": c, "dml": d, "skipped_anchors": k}
                for s, lr, l, c, d, k in zip(self.step, self.lr, self.loss, self.cce, self.dml,
                                             self.skipped_anchors)]


@dataclass
class TrainResult:
    encoder: model.EncoderParams
    classifier: model.ClassifierParams
    proxies: np.ndarray | None
    history: TrainHistory
    params: np.ndarray
    layout: model.ParamLayout


def total_steps(n: int, cfg: TrainConfig) -> int:
    return math.ceil(n / cfg.batch_size) * cfg.epochs


def objective(x, y, layout: model.ParamLayout, loss: CombinedConfig):
    """``fn(inputs) -> (value, grads)`` over the flat parameter vector ``inputs["params"]``.

    Runs forward, the combined loss and backward for one fixed batch; the
    shape suits :func:`~fewshot_dml.losses.grad_check`.
    """
    def fn(p):
        enc, clf, proxies = model.unflatten(p["params"], layout)
        emb, logits, cache = model.forward(x, enc, clf)
        b = combined(emb, y, logits, loss, proxies)
        g = model.backward(cache, enc, clf, b.grad_embeddings, b.grad_logits)
        return b.value, {"params": model.flatten_grads(g, b.grad_proxies)}

    return fn


def train(ds: Dataset, cfg: TrainConfig) -> TrainResult:
    """Fit encoder, classifier and (for SoftTriple) proxies on ``ds``.

    Deterministic given ``cfg.seed``. Initialisation and epoch shuffling use
    separate child streams, so runs that differ only in the loss share their
    encoder/classifier initialisation and batch order. The last partial batch
    of an epoch is kept.
    """
    cfg.validate()
    if len(ds) == 0:
        raise DomainError("cannot train on an empty dataset")
    root = Rng(cfg.seed)
    init_rng, rng = root.spawn(), root.spawn()
    kind = cfg.loss.kind
    k = cfg.loss.dml.k if kind == "softtriple" else 1
    enc, clf, proxies = model.init_params(ds.dim, cfg.hidden, cfg.d_out, ds.num_classes, k, init_rng,
                                          cfg.activation)
    if kind != "softtriple":
        proxies = None
    theta, layout = model.flatten(enc, clf, proxies)
    slices = layout.slices()
    decay_mask = np.ones(layout.size, dtype=bool)
    proxy_slice = slices.get("proxies")
    if proxy_slice is not None:
        decay_mask[proxy_slice] = False
    state = AdamState.zeros(layout.size)
    history = TrainHistory()

    n = len(ds)
    steps = total_steps(n, cfg)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = ds.x[idx], ds.y[idx]
            enc, clf, proxies = model.unflatten(theta, layout)
            emb, logits, cache = model.forward(xb, enc, clf)
            bundle = combined(emb, yb, logits, cfg.loss, proxies)
            if kind == "supcon" and bundle.skipped_anchors == len(idx):
                log.debug("step %d: every anchor lacks a positive; DML term is 0", step)
            grads = model.backward(cache, enc, clf, bundle.grad_embeddings, bundle.grad_logits)
            g = model.flatten_grads(grads, bundle.grad_proxies)
            lr = lr_at(step, steps, cfg.base_lr, cfg.warmup_frac)
            theta, state = adamw_step(theta, g, state, lr, cfg, decay_mask, proxy_slice,
                                      proxies.shape if proxies is not None else None)
            history.step.append(step)
            history.lr.append(lr)
            history.loss.append(bundle.value)
            history.cce.append(bundle.parts["cce"])
            history.dml.append(bundle.parts["dml"])
            history.skipped_anchors.append(bundle.skipped_anchors)
            step += 1
    enc, clf, proxies = model.unflatten(theta, layout)
    return TrainResult(enc, clf, proxies, history, theta, layout)


def predict(result: TrainResult, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(predicted labels, class probabilities, embeddings)``."""
    emb, logits, _ = model.forward(x, result.encoder, result.classifier)
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    return np.argmax(logits, axis=1), probs, emb


# -- key = value configuration files ----------------------------------------

_LOSS_KEYS = {"loss", "beta", "tau", "k", "gamma", "lambda", "lam", "delta", "normalize"}


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise DomainError(f"not a boolean: {s!r}")


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DomainError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def config_from_mapping(values: Mapping[str, object], train_size: int | None = None) -> TrainConfig:
    """Build a :class:`TrainConfig` from string-or-typed values.

    Unset loss hyperparameters fall back to the tabulated defaults for
    ``train_size`` (when given) and to the dataclass defaults otherwise.
    """
    v = {k.replace("-", "_"): val for k, val in values.items() if val is not None}
    kind = str(v.get("loss", "cce"))
    size = train_size if train_size is not None else 20
    base = default_config(kind, size) if train_size is not None else TrainConfig(loss=default_loss(kind, size))
    loss = base.loss
    dml = loss.dml
    if kind == "softtriple":
        dml = SoftTripleConfig(
            k=int(v.get("k", dml.k)), gamma=float(v.get("gamma", dml.gamma)),
            lam=float(v.get("lambda", v.get("lam", dml.lam))), delta=float(v.get("delta", dml.delta)))
    elif kind == "supcon":
        dml = SupConConfig(tau=float(v.get("tau", dml.tau)))
    normalize = v.get("normalize", loss.normalize)
    normalize = _parse_bool(normalize) if isinstance(normalize, str) else bool(normalize)
    loss = CombinedConfig(beta=float(v.get("beta", loss.beta)), dml=dml, normalize=normalize)

    fields = {}
    casts = {"batch_size": int, "epochs": int, "seed": int, "d_out": int, "base_lr": float, "lr": float,
             "warmup_frac": float, "weight_decay": float, "adam_beta1": float, "adam_beta2": float,
             "adam_eps": float, "activation": str}
    for key, cast in casts.items():
        if key in v:
            fields["base_lr" if key == "lr" else key] = cast(v[key])
    if "hidden" in v:
        h = v["hidden"]
        if isinstance(h, str):
            h = tuple(int(s) for s in h.replace(",", " ").split())
        fields["hidden"] = tuple(int(s) for s in h)
    unknown = set(v) - set(casts) - _LOSS_KEYS - {"hidden"}
    if unknown:
        raise DomainError(f"unknown configuration keys: {sorted(unknown)}")
    cfg = replace(base, loss=loss, **fields)
    cfg.validate()
    return cfg


def config_to_dict(cfg: TrainConfig) -> dict:
    """Flat, JSON-friendly echo of a configuration."""
    out = {"batch_size": cfg.batch_size, "lr": cfg.base_lr, "epochs": cfg.epochs,
           "warmup_frac": cfg.warmup_frac, "weight_decay": cfg.weight_decay, "seed": cfg.seed,
           "hidden": list(cfg.hidden), "d_out": cfg.d_out, "activation": cfg.activation,
           "loss": cfg.loss.kind, "beta": cfg.loss.beta, "normalize": cfg.loss.normalize}
    if isinstance(cfg.loss.dml, SupConConfig):
        out["tau"] = cfg.loss.dml.tau
    elif isinstance(cfg.loss.dml, SoftTripleConfig):
        d = cfg.loss.dml
        out.update(k=d.k, gamma=d.gamma, **{"lambda": d.lam}, delta=d.delta)
    return out
