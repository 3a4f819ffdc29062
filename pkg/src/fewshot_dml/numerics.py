"""Dense arithmetic helpers, a portable PRNG and 2-D projections.

Everything here works on float64 numpy arrays. The random generator is a
SplitMix64 sequence evaluated with vectorised uint64 arithmetic, so a given
seed yields the same stream on every platform and numpy version.
"""

from __future__ import annotations

import math

import numpy as np


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class DegenerateInputError(ValueError):
    """Input is valid in shape but mathematically degenerate (zero norm, too few points)."""


class DomainError(ValueError):
    """Input lies outside an operation's domain (empty reduction, bad parameter)."""


def as_vec(values) -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DomainError("vector has non-finite entries")
    return v


def as_mat(values, cols: int | None = None) -> np.ndarray:
    """Coerce to a finite 2-D float64 array, optionally checking the column count."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    if cols is not None and m.shape[1] != cols:
        raise DimensionError(f"expected {cols} columns, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise DomainError("matrix has non-finite entries")
    return m


def dot(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"dot of shapes {a.shape} and {b.shape}")
    # math.fsum keeps the result symmetric in its arguments and correctly rounded
    return math.fsum((a * b).tolist())


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateInputError("cannot normalise a zero vector")
    return v / norm


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise L2 normalisation. Returns (normalised rows, row norms)."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalise a zero row")
    return x / norms, norms


def normalize_rows_backward(z: np.ndarray, norms: np.ndarray, grad_z: np.ndarray) -> np.ndarray:
    """Pull a gradient back through ``z = x / ||x||`` row-wise."""
    return (grad_z - z * np.sum(z * grad_z, axis=-1, keepdims=True)) / norms


def logsumexp(xs, axis: int | None = None):
    """Stable ``log(sum(exp(xs)))``; reduces over ``axis`` (all entries when None)."""
    x = np.asarray(xs, dtype=np.float64)
    if x.size == 0:
        raise DomainError("logsumexp of an empty sequence")
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax(xs, axis: int = -1) -> np.ndarray:
    x = np.asarray(xs, dtype=np.float64)
    if x.size == 0:
        raise DomainError("softmax of an empty sequence")
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix_finalize(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 generator.

    The state advances by the golden-ratio increment on every draw, so a block
    of ``n`` outputs is computed in one vectorised pass. Not thread-safe.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise DomainError("negative draw count")
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _GOLDEN
            out = _splitmix_finalize(z)
        self.state = (self.state + n * 0x9E3779B97F4A7C15) & _MASK64
        return out

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform draws on [0, 1) with 53 bits of resolution."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size) -> np.ndarray:
        """Standard normal draws (Box-Muller)."""
        n = int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[:m]))
        theta = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(size)

    def integers(self, high: int, size=None):
        """Uniform integers in [0, high) by rejection-free multiply-shift on 53-bit floats."""
        if high <= 0:
            raise DomainError("high must be positive")
        u = self.uniform(1 if size is None else size)
        k = np.minimum((np.asarray(u) * high).astype(np.int64), high - 1)
        return int(k.reshape(-1)[0]) if size is None else k

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self) -> "Rng":
        """Child generator seeded from this stream."""
        return Rng(int(self.next_u64(1)[0]))

    def seed_int(self) -> int:
        """A fresh 63-bit seed, handy for configs that carry plain integers."""
        return int(self.next_u64(1)[0] >> np.uint64(1))


# -- projections -------------------------------------------------------------

TSNE_ITERATIONS = 500
TSNE_LEARNING_RATE = 100.0
TSNE_EXAGGERATION = 4.0
TSNE_EXAGGERATION_ITERS = 100


def pca_2d(points: np.ndarray) -> np.ndarray:
    x = points - points.mean(axis=0)
    if x.shape[1] == 1:
        return np.column_stack([x[:, 0], np.zeros(len(x))])
    cov = x.T @ x / max(len(x) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    comps = evecs[:, order]
    # pin the sign so the output is deterministic
    for j in range(comps.shape[1]):
        k = np.argmax(np.abs(comps[:, j]))
        if comps[k, j] < 0:
            comps[:, j] = -comps[:, j]
    return x @ comps


def _conditional_p(dist2: np.ndarray, perplexity: float, tol: float = 1e-5, max_tries: int = 100) -> np.ndarray:
    n = dist2.shape[0]
    target = math.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        d = np.delete(dist2[i], i)
        d = d - d.min()
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_tries):
            w = np.exp(-d * beta)
            sw = w.sum()
            H = math.log(sw) + beta * float(np.dot(d, w)) / sw
            if abs(H - target) < tol:
                break
            if H > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        P[i, np.arange(n) != i] = w / sw
    return P


def tsne_2d(points: np.ndarray, rng: Rng, perplexity: float = 30.0,
            iterations: int = TSNE_ITERATIONS) -> np.ndarray:
    """Exact-gradient t-SNE with the classic momentum/gains schedule."""
    n = points.shape[0]
    sq = np.sum(points**2, axis=1)
    dist2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * points @ points.T, 0.0)
    P = _conditional_p(dist2, perplexity)
    P = (P + P.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)

    Y = rng.normal((n, 2)) * 1e-4
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(iterations):
        exag = TSNE_EXAGGERATION if it < TSNE_EXAGGERATION_ITERS else 1.0
        momentum = 0.5 if it < 250 else 0.8
        ysq = np.sum(Y**2, axis=1)
        num = 1.0 / (1.0 + ysq[:, None] + ysq[None, :] - 2.0 * Y @ Y.T)
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        PQ = (exag * P - Q) * num
        grad = 4.0 * (np.diag(PQ.sum(axis=1)) - PQ) @ Y
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        update = momentum * update - TSNE_LEARNING_RATE * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
    return Y


def project_2d(points, method: str = "pca", rng: Rng | None = None, perplexity: float = 30.0) -> np.ndarray:
    """Project ``points`` (n x d) to two dimensions.

    ``pca`` is the top-2 principal component projection with signs pinned.
    ``tsne`` is exact t-SNE (500 iterations, learning rate 100, early
    exaggeration 4 for 100 iterations), deterministic for a given ``rng``.
    """
    x = as_mat(points)
    n = x.shape[0]
    if n < 3:
        raise DegenerateInputError(f"need at least 3 points, got {n}")
    if method == "pca":
        return pca_2d(x)
    if method == "tsne":
        if n > 5000:
            raise DomainError("exact t-SNE is limited to 5000 points")
        if not 0 < perplexity < n:
            raise DomainError(f"perplexity must lie in (0, {n}), got {perplexity}")
        return tsne_2d(x, rng if rng is not None else Rng(0), perplexity)
    raise DomainError(f"unknown projection method {method!r}")
