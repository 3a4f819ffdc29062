"""Classification metrics, few-shot cross-validation, rank tests and embedding analyses."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import stats

from .dataio import DataError, Dataset, stratified_sample
from .numerics import DegenerateInputError, DimensionError, DomainError, Rng
from .trainer import TrainConfig, config_to_dict, predict, train

log = logging.getLogger(__name__)

JOBS_ENV = "FEWSHOT_DML_JOBS"


@dataclass
class Metrics:
    f1: float
    accuracy: float
    precision: float
    recall: float
    auc: float | None
    per_class: dict[int, dict[str, float]]
    confusion: np.ndarray

    SCALARS = ("f1", "accuracy", "precision", "recall", "auc")

    def to_dict(self) -> dict:
        return {"f1": self.f1, "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "auc": self.auc,
                "per_class": {str(c): v for c, v in sorted(self.per_class.items())},
                "confusion": self.confusion.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(d["f1"], d["accuracy"], d["precision"], d["recall"], d.get("auc"),
                   {int(c): v for c, v in d.get("per_class", {}).items()},
                   np.array(d.get("confusion", []), dtype=np.int64))


def _safe_div(num: float, den: float, what: str) -> float:
    if den == 0:
        log.info("%s has an empty denominator; using 0", what)
        return 0.0
    return num / den


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, positive) -> float | None:
    """Rank-based ROC AUC; ``None`` when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _midranks(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(preds, labels, scores=None, num_classes: int | None = None) -> Metrics:
    """Accuracy plus macro precision/recall/F1 over the classes present in ``labels``.

    Empty precision or recall denominators count as 0. AUC is reported for
    two-class problems when ``scores`` (N x 2 probabilities) are given.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise DimensionError("preds and labels must be equal-length sequences")
    if len(labels) == 0:
        raise DomainError("cannot score an empty prediction set")
    C = int(max(preds.max(), labels.max()) + 1)
    if num_classes is not None:
        C = max(C, num_classes)
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    present = np.flatnonzero(confusion.sum(axis=1) > 0)
    per_class = {}
    for c in range(C):
        tp = confusion[c, c]
        p = _safe_div(tp, confusion[:, c].sum(), f"precision of class {c}")
        r = _safe_div(tp, confusion[c, :].sum(), f"recall of class {c}")
        f = _safe_div(2 * p * r, p + r, f"F1 of class {c}")
        per_class[c] = {"precision": p, "recall": r, "f1": f, "support": int(confusion[c].sum())}
    macro = lambda key: float(np.mean([per_class[c][key] for c in present]))
    auc = None
    if scores is not None and C == 2:
        s = np.asarray(scores, dtype=np.float64)
        if s.shape != (len(labels), 2):
            raise DimensionError(f"scores must be N x 2, got {s.shape}")
        auc = roc_auc(s[:, 1], labels == 1)
    return Metrics(macro("f1"), float(np.trace(confusion) / len(labels)), macro("precision"),
                   macro("recall"), auc, per_class, confusion)


# -- cross-validation --------------------------------------------------------

@dataclass
class RunOutput:
    metrics: Metrics
    test: Dataset
    preds: np.ndarray
    probs: np.ndarray
    embeddings: np.ndarray
    train_embeddings: np.ndarray


@dataclass
class CVResult:
    per_fold: list[Metrics]
    mean: dict[str, float | None]
    std: dict[str, float | None]
    config: dict
    train_size: int
    repeats: int = 1

    @property
    def f1_scores(self) -> list[float]:
        return [m.f1 for m in self.per_fold]

    def records(self) -> list[dict]:
        recs = [{"type": "fold", "fold": i, **m.to_dict()} for i, m in enumerate(self.per_fold)]
        recs.append({"type": "summary", "folds": len(self.per_fold), "repeats": self.repeats,
                     "train_size": self.train_size, "mean": self.mean, "std": self.std,
                     "config": self.config})
        return recs

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "CVResult":
        folds = sorted((r for r in records if r.get("type") == "fold"), key=lambda r: r["fold"])
        summary = next((r for r in records if r.get("type") == "summary"), None)
        if summary is None:
            raise DataError("result file has no summary record")
        return cls([Metrics.from_dict(r) for r in folds], summary["mean"], summary["std"],
                   summary.get("config", {}), summary.get("train_size", 0), summary.get("repeats", 1))


def _aggregate(values: list[float | None]) -> tuple[float | None, float | None]:
    if not values or any(v is None for v in values):
        return None, None
    # sorted reduction keeps the sum independent of completion order
    arr = np.sort(np.asarray(values, dtype=np.float64))
    mean = math.fsum(arr) / len(arr)
    std = math.sqrt(math.fsum((arr - mean) ** 2) / len(arr))
    return mean, std


def summarize(per_fold: list[Metrics]) -> tuple[dict, dict]:
    mean, std = {}, {}
    for key in Metrics.SCALARS:
        mean[key], std[key] = _aggregate([getattr(m, key) for m in per_fold])
    return mean, std


def _average_metrics(runs: list[Metrics]) -> Metrics:
    if len(runs) == 1:
        return runs[0]
    avg = lambda key: None if any(getattr(m, key) is None for m in runs) else \
        math.fsum(sorted(getattr(m, key) for m in runs)) / len(runs)
    per_class = {c: {k: float(np.mean([m.per_class[c][k] for m in runs])) for k in runs[0].per_class[c]}
                 for c in runs[0].per_class}
    return Metrics(avg("f1"), avg("accuracy"), avg("precision"), avg("recall"), avg("auc"), per_class,
                   sum(m.confusion for m in runs))


def fit_and_evaluate(train_ds: Dataset, test_ds: Dataset, cfg: TrainConfig) -> RunOutput:
    result = train(train_ds, cfg)
    preds, probs, emb = predict(result, test_ds.x)
    _, _, train_emb = predict(result, train_ds.x)
    metrics = compute_metrics(preds, test_ds.y, probs if test_ds.num_classes == 2 else None,
                              test_ds.num_classes)
    return RunOutput(metrics, test_ds, preds, probs, emb, train_emb)


def _run_job(job):
    train_ds, test_ds, cfg = job
    return fit_and_evaluate(train_ds, test_ds, cfg).metrics


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def run_cv(ds: Dataset, train_size: int, folds: int, repeats_per_fold: int, cfg: TrainConfig, rng: Rng,
           jobs: int | None = None, resample_per_repeat: bool = False) -> CVResult:
    """Repeated stratified few-shot evaluation.

    Each fold draws ``train_size`` stratified examples for training and
    tests on the remainder. Repeats inside a fold reuse the fold's subset and
    draw a fresh training seed, unless ``resample_per_repeat`` is set. All
    seeds are drawn up front, so the result does not depend on ``jobs``.
    """
    if folds < 2:
        raise DomainError("folds must be >= 2")
    if repeats_per_fold < 1:
        raise DomainError("repeats_per_fold must be >= 1")
    if train_size + 1 > len(ds):
        raise DataError(f"train_size {train_size} leaves no test examples out of {len(ds)}")
    jobs_list = []
    for _ in range(folds):
        fold_rng = rng.spawn()
        split = stratified_sample(ds, train_size, fold_rng)
        for _ in range(repeats_per_fold):
            if resample_per_repeat:
                split = stratified_sample(ds, train_size, fold_rng)
            jobs_list.append((split[0], split[1], replace(cfg, seed=fold_rng.seed_int())))
    jobs = default_jobs() if jobs is None else jobs
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_run_job, jobs_list))
    else:
        outs = [_run_job(j) for j in jobs_list]
    per_fold = [_average_metrics(outs[f * repeats_per_fold:(f + 1) * repeats_per_fold]) for f in range(folds)]
    mean, std = summarize(per_fold)
    return CVResult(per_fold, mean, std, config_to_dict(cfg), train_size, repeats_per_fold)


# -- significance tests -----------------------------------------------------

def _exact_u_counts(n1: int, n2: int) -> list[int]:
    """Number of orderings giving each U value (0..n1*n2) for untied samples."""
    # table[j][u] for the current i; the largest element is either an ``a``
    # (beating all j b's, adding j to U) or a ``b`` (adding nothing)
    table = [[1] for _ in range(n2 + 1)]
    for i in range(1, n1 + 1):
        new = [[1]]
        for j in range(1, n2 + 1):
            row = [0] * (i * j + 1)
            for u, c in enumerate(table[j]):
                row[u + j] += c
            for u, c in enumerate(new[j - 1]):
                row[u] += c
            new.append(row)
        table = new
    return table[n2]


def mann_whitney_u(a, b) -> tuple[float, float]:
    """U statistic of sample ``a`` and its two-sided p-value.

    Midranks handle ties. Small untied samples (``len(a) + len(b) <= 12``)
    use the exact null distribution; otherwise the normal approximation with
    tie and continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise DegenerateInputError("mann_whitney_u needs two non-empty samples")
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    ties = len(np.unique(pooled)) < len(pooled)
    if n1 + n2 <= 12 and not ties:
        counts = _exact_u_counts(n1, n2)
        total = math.comb(n1 + n2, n1)
        k = int(round(u))
        lower = sum(counts[: k + 1])
        upper = sum(counts[k:])
        p = min(1.0, 2.0 * min(lower, upper) / total)
        return u, float(p)
    n = n1 + n2
    _, tcounts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tcounts**3 - tcounts)) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return u, 1.0
    mu = n1 * n2 / 2.0
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return u, max(p, np.finfo(float).tiny)


def compare_models(scores_a, scores_b, method: str = "mann_whitney") -> float:
    """Two-sided p-value for a difference between two sets of fold scores."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if method == "mann_whitney":
        return mann_whitney_u(a, b)[1]
    if method == "paired_t":
        if a.shape != b.shape:
            raise DimensionError("paired t-test needs equal-length samples")
        d = a - b
        if np.all(d == 0):
            return 1.0
        sd = float(np.std(d, ddof=1)) if len(d) > 1 else 0.0
        if sd == 0.0:
            return 0.0
        t = float(np.mean(d)) / (sd / math.sqrt(len(d)))
        return float(2.0 * stats.t.sf(abs(t), df=len(d) - 1))
    raise DomainError(f"unknown comparison method {method!r}")


# -- embedding analyses ------------------------------------------------------

def distance_bucket_accuracy(reference_embeddings, eval_embeddings, preds, labels, buckets: int) -> list[float]:
    """Accuracy per distance band around the centroid of ``reference_embeddings``.

    Evaluated examples are sorted by Euclidean distance to the centroid and
    split into ``buckets`` contiguous groups whose sizes differ by at most
    one. Results run from nearest to farthest.
    """
    ref = np.asarray(reference_embeddings, dtype=np.float64)
    ev = np.asarray(eval_embeddings, dtype=np.float64)
    correct = np.asarray(preds) == np.asarray(labels)
    if buckets < 2:
        raise DomainError("buckets must be >= 2")
    if len(ev) < buckets:
        raise DegenerateInputError(f"{len(ev)} examples cannot fill {buckets} buckets")
    if len(correct) != len(ev):
        raise DimensionError("predictions and embeddings differ in length")
    centre = ref.mean(axis=0)
    dist = np.linalg.norm(ev - centre, axis=1)
    order = np.argsort(dist, kind="mergesort")
    return [float(correct[ix].mean()) for ix in np.array_split(order, buckets)]


def bucket_sizes(n: int, buckets: int) -> list[int]:
    return [len(ix) for ix in np.array_split(np.arange(n), buckets)]


@dataclass
class GroupReport:
    group: str
    count: int
    group_metric: float
    complement_metric: float
    u_statistic: float
    p_value: float


def group_analysis(ds: Dataset, preds, labels=None, min_count: int = 1) -> list[GroupReport]:
    """Rank tagged groups by how significantly their accuracy differs from the rest.

    Per-example correctness inside each group is compared with the
    complement by a Mann-Whitney test. Groups covering every example have no
    complement and are skipped.
    """
    labels = ds.y if labels is None else np.asarray(labels)
    correct = (np.asarray(preds) == labels).astype(np.float64)
    if len(correct) != len(ds):
        raise DimensionError("predictions do not match the dataset")
    keys = sorted(set().union(*ds.groups)) if len(ds) else []
    reports = []
    for key in keys:
        inside = np.array([key in g for g in ds.groups])
        count = int(inside.sum())
        if count < max(min_count, 1):
            continue
        if count == len(ds):
            log.info("group %r covers every example; skipped", key)
            continue
        u, p = mann_whitney_u(correct[inside], correct[~inside])
        reports.append(GroupReport(key, count, float(correct[inside].mean()),
                                   float(correct[~inside].mean()), u, p))
    reports.sort(key=lambda r: (r.p_value, r.group_metric, r.group))
    return reports


def class_distance_ratio(embeddings, labels) -> float:
    """Mean intra-class pairwise distance divided by mean inter-class pairwise distance."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    sq = np.sum(x * x, axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0))
    same = y[:, None] == y[None, :]
    off = ~np.eye(len(y), dtype=bool)
    intra, inter = dist[same & off], dist[~same]
    if len(intra) == 0 or len(inter) == 0:
        raise DegenerateInputError("need at least two classes with two members")
    return float(intra.mean() / inter.mean())
