"""Datasets of labelled embedding vectors: loading, synthesis, sampling, JSONL records."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .numerics import Rng


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass(frozen=True)
class LabeledExample:
    id: str
    embedding: np.ndarray
    label: int
    text: str | None = None
    groups: frozenset[str] = frozenset()


class Dataset:
    """Immutable collection of labelled embeddings.

    Arrays are stored column-wise (``x`` is N x d, ``y`` is length N); the
    per-example view is available through :attr:`examples`.
    """

    def __init__(self, ids: Sequence[str], x, y, num_classes: int, name: str = "",
                 texts: Sequence[str | None] | None = None,
                 groups: Sequence[Iterable[str]] | None = None):
        x = np.array(x, dtype=np.float64)
        y = np.array(y, dtype=np.int64)
        if x.ndim != 2:
            if x.size == 0:
                x = x.reshape(0, 0)
            else:
                raise DataError(f"embeddings must be 2-D, got shape {x.shape}")
        n = x.shape[0]
        if y.shape != (n,) or len(ids) != n:
            raise DataError("ids, embeddings and labels differ in length")
        if not np.all(np.isfinite(x)):
            raise DataError("non-finite embedding value")
        if n and (y.min() < 0 or y.max() >= num_classes):
            raise DataError(f"label outside [0, {num_classes})")
        if len(set(ids)) != n:
            raise DataError("duplicate example id")
        x.setflags(write=False)
        y.setflags(write=False)
        self.ids = tuple(ids)
        self.x = x
        self.y = y
        self.num_classes = int(num_classes)
        self.name = name
        self.texts = tuple(texts) if texts is not None else (None,) * n
        self.groups = tuple(frozenset(g) for g in groups) if groups is not None else (frozenset(),) * n

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def examples(self) -> list[LabeledExample]:
        return [LabeledExample(i, self.x[k], int(self.y[k]), self.texts[k], self.groups[k])
                for k, i in enumerate(self.ids)]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset([self.ids[i] for i in index], self.x[index].reshape(len(index), self.dim),
                       self.y[index], self.num_classes, self.name,
                       [self.texts[i] for i in index], [self.groups[i] for i in index])

    def with_groups(self, groups: Sequence[Iterable[str]]) -> "Dataset":
        return Dataset(self.ids, self.x, self.y, self.num_classes, self.name, self.texts, groups)


# -- JSONL records -----------------------------------------------------------

def write_records(path, records: Iterable[dict]) -> None:
    """Write one JSON object per line. Float reprs round-trip exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, allow_nan=False))
            fh.write("\n")


def read_records(path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, record)`` for every non-blank line."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"line {lineno}: record is not an object")
            yield lineno, rec


def example_record(ds: Dataset, k: int) -> dict:
    rec = {"id": ds.ids[k], "label": int(ds.y[k]), "embedding": ds.x[k].tolist()}
    if ds.texts[k] is not None:
        rec["text"] = ds.texts[k]
    if ds.groups[k]:
        rec["groups"] = sorted(ds.groups[k])
    return rec


def save_dataset(ds: Dataset, path) -> None:
    header = {"header": {"name": ds.name, "dim": ds.dim, "num_classes": ds.num_classes}}
    write_records(path, [header, *(example_record(ds, k) for k in range(len(ds)))])


def _parse_embedding(raw, lineno: int) -> list[float]:
    if not isinstance(raw, list) or not raw:
        raise DataError(f"line {lineno}: 'embedding' must be a non-empty array of numbers")
    out = []
    for v in raw:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise DataError(f"line {lineno}: embedding entry {v!r} is not a finite number")
        out.append(float(v))
    return out


def load_dataset(path, name: str | None = None) -> Dataset:
    """Read and validate a JSONL dataset file.

    An optional first line ``{"header": {...}}`` may declare ``dim``,
    ``num_classes`` and ``name``; otherwise the first record fixes the
    dimension and the class count is ``1 + max(label)``. Unknown fields on a
    record are ignored, so prediction dumps load as datasets too.
    """
    path = Path(path)
    header: dict = {}
    ids, xs, ys, texts, groups = [], [], [], [], []
    seen: dict[str, int] = {}
    dim = None
    for lineno, rec in read_records(path):
        if "header" in rec:
            if ids or header:
                raise DataError(f"line {lineno}: header must be the first record")
            header = rec["header"] or {}
            if not isinstance(header, dict):
                raise DataError(f"line {lineno}: header is not an object")
            dim = header.get("dim")
            continue
        for key in ("id", "label", "embedding"):
            if key not in rec:
                raise DataError(f"line {lineno}: missing field {key!r}")
        ex_id, label = rec["id"], rec["label"]
        if not isinstance(ex_id, str):
            raise DataError(f"line {lineno}: 'id' must be a string")
        if isinstance(label, bool) or not isinstance(label, int):
            raise DataError(f"line {lineno}: 'label' must be an integer")
        emb = _parse_embedding(rec["embedding"], lineno)
        if dim is None:
            dim = len(emb)
        elif len(emb) != dim:
            raise DataError(f"line {lineno}: dimension mismatch (expected {dim}, got {len(emb)})")
        if label < 0 or ("num_classes" in header and label >= header["num_classes"]):
            raise DataError(f"line {lineno}: unknown label index {label}")
        if ex_id in seen:
            raise DataError(f"line {lineno}: duplicate id {ex_id!r} (first seen on line {seen[ex_id]})")
        seen[ex_id] = lineno
        text = rec.get("text")
        if text is not None and not isinstance(text, str):
            raise DataError(f"line {lineno}: 'text' must be a string")
        tags = rec.get("groups", [])
        if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
            raise DataError(f"line {lineno}: 'groups' must be an array of strings")
        ids.append(ex_id)
        xs.append(emb)
        ys.append(label)
        texts.append(text)
        groups.append(tags)
    if not ids:
        raise DataError(f"{path}: no examples")
    num_classes = int(header.get("num_classes", max(ys) + 1))
    counts = np.bincount(ys, minlength=num_classes)
    missing = [c for c in range(num_classes) if counts[c] == 0]
    if missing:
        raise DataError(f"{path}: classes {missing} have no examples")
    return Dataset(ids, xs, ys, num_classes, name or header.get("name") or path.stem, texts, groups)


# -- synthetic data ----------------------------------------------------------

@dataclass(frozen=True)
class BlobSpec:
    num_classes: int = 2
    dim: int = 32
    per_class_count: int = 300
    centroid_separation: float = 4.0
    noise_sigma: float = 1.5
    outlier_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise DataError("num_classes must be >= 1")
        if self.dim < 1:
            raise DataError("dim must be >= 1")
        if self.per_class_count < 1:
            raise DataError("per_class_count must be >= 1")
        if not self.noise_sigma > 0:
            raise DataError("noise_sigma must be > 0")
        if self.centroid_separation < 0:
            raise DataError("centroid_separation must be >= 0")
        if not 0 <= self.outlier_fraction < 1:
            raise DataError("outlier_fraction must lie in [0, 1)")


def blob_centroids(spec: BlobSpec) -> np.ndarray:
    """Class centroids with every pair exactly ``centroid_separation`` apart.

    Centroids are the vertices of a regular simplex scaled to the requested
    edge length, randomly rotated into ``dim`` dimensions. This needs
    ``dim >= num_classes - 1``.
    """
    C, d = spec.num_classes, spec.dim
    if C == 1:
        return np.zeros((1, d))
    if d < C - 1:
        raise DataError(f"dim {d} cannot hold {C} equidistant centroids")
    # simplex vertices e_c - mean live in a (C-1)-dim subspace of R^C; edge = sqrt(2)
    simplex = np.eye(C) - 1.0 / C
    basis, _ = np.linalg.qr(simplex.T)
    coords = simplex @ basis[:, : C - 1]
    rng = Rng(spec.seed ^ 0x5DEECE66D)
    q, r = np.linalg.qr(rng.normal((d, d)))
    q = q * np.sign(np.diag(r))
    return (coords @ q[: C - 1]) * (spec.centroid_separation / math.sqrt(2.0))


def generate_blobs(spec: BlobSpec, name: str = "blobs") -> Dataset:
    """Isotropic Gaussian classes around equidistant centroids.

    Each class contributes ``per_class_count`` points; a deterministic
    ``outlier_fraction`` of them is re-drawn with three times the noise.
    Rows are interleaved by class (0, 1, ..., C-1, 0, 1, ...).
    """
    spec.validate()
    centroids = blob_centroids(spec)
    rng = Rng(spec.seed)
    C, m, d = spec.num_classes, spec.per_class_count, spec.dim
    n = C * m
    y = np.tile(np.arange(C), m)
    scale = np.full(n, spec.noise_sigma)
    n_out = int(round(spec.outlier_fraction * n))
    if n_out:
        scale[rng.permutation(n)[:n_out]] *= 3.0
    x = centroids[y] + rng.normal((n, d)) * scale[:, None]
    width = len(str(n - 1))
    ids = [f"{name}-{k:0{width}d}" for k in range(n)]
    return Dataset(ids, x, y, C, name)


def stratified_sample(ds: Dataset, n: int, rng: Rng) -> tuple[Dataset, Dataset]:
    """Draw ``n`` examples with per-class counts as equal as possible.

    Classes receive ``n // C`` each, and the remaining ``n % C`` slots go to
    randomly chosen classes with spare examples. Returns ``(train, rest)``.
    """
    C = ds.num_classes
    if n < C:
        raise DataError(f"cannot stratify {n} examples over {C} classes")
    if n > len(ds):
        raise DataError(f"cannot sample {n} of {len(ds)} examples")
    by_class = [np.flatnonzero(ds.y == c) for c in range(C)]
    avail = np.array([len(ix) for ix in by_class])
    quota = np.minimum(np.full(C, n // C), avail)
    left = n - int(quota.sum())
    while left > 0:
        spare = np.flatnonzero(quota < avail)
        # fill the smallest quotas first so counts stay within one of each other
        low = spare[quota[spare] == quota[spare].min()]
        pick = low[rng.permutation(len(low))[: min(left, len(low))]]
        quota[pick] += 1
        left -= len(pick)
    chosen = []
    for c in range(C):
        perm = rng.permutation(len(by_class[c]))
        chosen.append(by_class[c][perm[: quota[c]]])
    train_ix = np.sort(np.concatenate(chosen))
    mask = np.ones(len(ds), dtype=bool)
    mask[train_ix] = False
    return ds.subset(train_ix), ds.subset(np.flatnonzero(mask))


# -- token tags --------------------------------------------------------------

_TOKEN_RE = re.compile(r"\w+(?=n't\b)|n't\b|\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lower-case word tokens with ``n't`` split off (``don't`` -> ``do``, ``n't``)."""
    return _TOKEN_RE.findall(text.lower())


def tag_tokens(ds: Dataset, tokens: Sequence[str]) -> Dataset:
    """Add a group tag for every listed token present in an example's text."""
    wanted = [t.strip().lower() for t in tokens if t.strip()]
    groups = []
    for text, old in zip(ds.texts, ds.groups):
        present = set(tokenize(text)) if text else set()
        groups.append(set(old) | {t for t in wanted if t in present})
    return ds.with_groups(groups)
