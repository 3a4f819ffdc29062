"""Command-line entry point: ``fewshot-dml <command> [flags]``.

Exit codes: 0 success, 1 a check failed, 2 bad usage or unreadable input.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
from pathlib import Path

import numpy as np

from . import model
from .dataio import (BlobSpec, DataError, Dataset, generate_blobs, load_dataset, read_records, save_dataset,
                     stratified_sample, tag_tokens, write_records)
from .evaluation import (CVResult, RunOutput, compare_models, compute_metrics, default_jobs,
                         distance_bucket_accuracy, fit_and_evaluate, group_analysis, run_cv)
from .losses import CombinedConfig, SoftTripleConfig, SupConConfig, grad_check_groups, loss_fn
from .numerics import Rng, project_2d
from .trainer import config_from_mapping, objective, predict, read_config_file, train

log = logging.getLogger("fewshot_dml")

GRAD_TOL = 1e-5


class UsageError(Exception):
    pass


# -- shared flag groups ------------------------------------------------------

def _add_hyper_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--config", help="key = value file; flags override it")
    g.add_argument("--loss", choices=["cce", "supcon", "softtriple"])
    g.add_argument("--lr", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--warmup-frac", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--tau", type=float)
    g.add_argument("--k", type=int)
    g.add_argument("--gamma", type=float)
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--delta", type=float)
    g.add_argument("--hidden", help="comma-separated hidden widths; empty for a linear head")
    g.add_argument("--d-out", type=int)
    g.add_argument("--activation", choices=["tanh", "relu"])
    g.add_argument("--no-normalize", action="store_true", help="use raw embeddings inside the DML loss")


def _train_config(args, train_size: int | None):
    values: dict = {}
    if args.config:
        values.update(read_config_file(args.config))
    flags = {"loss": args.loss, "lr": args.lr, "epochs": args.epochs, "batch_size": args.batch_size,
             "warmup_frac": args.warmup_frac, "weight_decay": args.weight_decay, "beta": args.beta,
             "tau": args.tau, "k": args.k, "gamma": args.gamma, "lambda": args.lam, "delta": args.delta,
             "hidden": args.hidden, "d_out": args.d_out, "activation": args.activation}
    if "lam" in values:
        values["lambda"] = values.pop("lam")
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.no_normalize:
        values["normalize"] = False
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return config_from_mapping(values, train_size)


def _load(path, tag_tokens_flag: str | None = None) -> Dataset:
    ds = load_dataset(path)
    if tag_tokens_flag:
        ds = tag_tokens(ds, tag_tokens_flag.split(","))
    return ds


def _holdout(ds: Dataset, train_size: int, seed: int):
    """Train/held-out split shared by ``train`` and ``cv --dump``, so equal seeds give comparable dumps."""
    return stratified_sample(ds, train_size, Rng(seed).spawn())


def _dump_records(run, name: str) -> list[dict]:
    test = run.test
    header = {"header": {"name": name, "dim": int(run.embeddings.shape[1]), "num_classes": test.num_classes}}
    recs = [header]
    for k in range(len(test)):
        rec = {"id": test.ids[k], "label": int(test.y[k]), "embedding": run.embeddings[k].tolist(),
               "pred": int(run.preds[k]), "scores": run.probs[k].tolist(),
               "input_embedding": test.x[k].tolist()}
        if test.texts[k] is not None:
            rec["text"] = test.texts[k]
        if test.groups[k]:
            rec["groups"] = sorted(test.groups[k])
        recs.append(rec)
    return recs


def _read_dump(path) -> tuple[Dataset, np.ndarray]:
    preds = []
    for lineno, rec in read_records(path):
        if "header" in rec:
            continue
        if "pred" not in rec:
            raise DataError(f"{path}: line {lineno}: dump record lacks field 'pred'")
        preds.append(rec["pred"])
    return load_dataset(path), np.asarray(preds, dtype=np.int64)


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = BlobSpec(args.classes, args.dim, args.per_class, args.sep, args.sigma, args.outlier_frac, args.seed)
    try:
        spec.validate()
    except DataError as exc:
        raise UsageError(str(exc)) from None
    ds = generate_blobs(spec, name=args.name)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} examples ({ds.num_classes} classes, d={ds.dim}) to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    n, d, c, k = args.n, args.d, args.c, args.k
    y = np.arange(n) % c
    rng.shuffle(y)
    w = rng.normal(size=(c, k, d))
    w /= np.linalg.norm(w, axis=2, keepdims=True)
    st = SoftTripleConfig(k=k, gamma=args.gamma, lam=args.lam, delta=args.delta)
    if args.loss == "cce":
        fn, inputs = loss_fn("cce", y), {"logits": rng.normal(size=(n, c))}
    elif args.loss == "supcon":
        fn, inputs = loss_fn("supcon", y, SupConConfig(args.tau)), {"embeddings": rng.normal(size=(n, d))}
    elif args.loss == "softtriple":
        fn, inputs = loss_fn("softtriple", y, st), {"embeddings": rng.normal(size=(n, d)), "proxies": w}
    elif args.loss == "combined":
        cfg = CombinedConfig(args.beta, st)
        fn = loss_fn("combined", y, cfg)
        inputs = {"embeddings": rng.normal(size=(n, d)), "logits": rng.normal(size=(n, c)), "proxies": w}
    else:
        fn, inputs = _model_check(args, y, st)
    errors = grad_check_groups(fn, inputs, args.epsilon)
    ok = True
    for group, err in errors.items():
        status = "ok" if err < GRAD_TOL else "FAIL"
        ok &= err < GRAD_TOL
        print(f"{group}\t{err:.3e}\t{status}")
    return 0 if ok else 1


def _model_check(args, y, st):
    cfg = CombinedConfig(args.beta, st)
    enc, clf, proxies = model.init_params(args.d, (args.d,), args.d, args.c, args.k, Rng(args.seed))
    theta, layout = model.flatten(enc, clf, proxies)
    x = np.random.default_rng(args.seed + 1).normal(size=(args.n, args.d))
    return objective(x, y, layout, cfg), {"params": theta}


def cmd_train(args) -> int:
    ds = _load(args.data, args.tag_tokens)
    if args.train_size is not None and args.train_size < len(ds):
        train_ds, test_ds = _holdout(ds, args.train_size, args.seed)
    else:
        train_ds, test_ds = ds, None
    if args.test_data:
        test_ds = _load(args.test_data, args.tag_tokens)
    cfg = _train_config(args, len(train_ds))
    if args.dump and (test_ds is None or not len(test_ds)):
        raise UsageError("--dump needs held-out examples (use --train-size or --test-data)")
    result = train(train_ds, cfg)
    if test_ds is not None and len(test_ds):
        preds, probs, emb = predict(result, test_ds.x)
        m = compute_metrics(preds, test_ds.y, probs if test_ds.num_classes == 2 else None, test_ds.num_classes)
        print(f"test f1={m.f1:.4f} accuracy={m.accuracy:.4f} precision={m.precision:.4f} recall={m.recall:.4f}")
        if args.dump:
            write_records(args.dump, _dump_records(RunOutput(m, test_ds, preds, probs, emb, None), ds.name))
    if args.out:
        model.save_checkpoint(args.out, result.params, result.layout)
    if args.history:
        write_records(args.history, result.history.records())
    return 0


def _cv_one(args, ds, cfg, seed) -> CVResult:
    return run_cv(ds, args.train_size, args.folds, args.repeats, cfg, Rng(seed), jobs=args.jobs)


def _summary_line(label: str, res: CVResult) -> str:
    mean, std = res.mean["f1"] * 100, res.std["f1"] * 100
    return f"{label}\t{res.config.get('loss', '?')}\t{res.train_size}\t{mean:.2f}±{std:.2f}"


def cmd_cv(args) -> int:
    ds = _load(args.data)
    cfg = _train_config(args, args.train_size)
    res = _cv_one(args, ds, cfg, args.seed)
    records = res.records()
    p_value = None
    if args.compare:
        other = CVResult.from_records([r for _, r in read_records(args.compare)])
        p_value = compare_models(res.f1_scores, other.f1_scores, args.test)
        records.append({"type": "comparison", "against": Path(args.compare).name, "method": args.test,
                        "p_value": p_value})
    if args.out:
        write_records(args.out, records)
    print("Model\tLoss\tN\tF1")
    print(_summary_line(ds.name, res))
    if p_value is not None:
        print(f"p-value\t{p_value:.3f}")
    if args.dump:
        run = fit_and_evaluate(*_holdout(ds, args.train_size, args.seed), cfg)
        write_records(args.dump, _dump_records(run, ds.name))
    return 0


def _parse_grid(items: list[str]) -> list[dict]:
    axes = []
    for item in items:
        if "=" not in item:
            raise UsageError(f"grid axis {item!r} must look like name=v1,v2")
        key, values = item.split("=", 1)
        axes.append([(key.strip().replace("-", "_"), v.strip()) for v in values.split(",") if v.strip()])
    return [dict(point) for point in itertools.product(*axes)]


def cmd_sweep(args) -> int:
    ds = _load(args.data)
    grid = _parse_grid(args.grid or [])
    if not grid:
        raise UsageError("--grid needs at least one axis")
    base = {}
    if args.config:
        base.update(read_config_file(args.config))
    if args.loss:
        base["loss"] = args.loss
    records = []
    best = None
    for idx, point in enumerate(grid):
        values = {**base, **point, "seed": args.seed}
        cfg = config_from_mapping(values, args.train_size)
        res = _cv_one(args, ds, cfg, args.seed)
        rec = {"type": "grid_point", "index": idx, "point": point, "mean": res.mean, "std": res.std,
               "config": res.config, "f1_scores": res.f1_scores}
        records.append(rec)
        print(f"{idx}\t{point}\tf1={res.mean['f1']:.4f}±{res.std['f1']:.4f}")
        if best is None or res.mean["f1"] > best[1]:
            best = (idx, res.mean["f1"])
    records.append({"type": "summary", "best_index": best[0], "best_f1": best[1], "points": len(grid)})
    if args.out:
        write_records(args.out, records)
    print(f"best\t{grid[best[0]]}\tf1={best[1]:.4f}")
    return 0


def cmd_analyze_distance(args) -> int:
    ds, preds = _read_dump(args.dump)
    if args.reference_dump:
        ref, _ = _read_dump(args.reference_dump)
        pos = {i: k for k, i in enumerate(ref.ids)}
        missing = [i for i in ds.ids if i not in pos]
        if missing:
            raise DataError(f"reference dump lacks ids such as {missing[0]!r}")
        space = ref.x[[pos[i] for i in ds.ids]]
    else:
        space = ds.x
    acc = distance_bucket_accuracy(space, space, preds, ds.y, args.buckets)
    sizes = [len(ix) for ix in np.array_split(np.arange(len(ds)), args.buckets)]
    rows = [("bucket", "count", "accuracy")] + [(i, n, f"{a:.6f}") for i, (n, a) in enumerate(zip(sizes, acc))]
    _write_table(args.out, rows)
    return 0


def cmd_analyze_groups(args) -> int:
    dumps = [_read_dump(p) for p in args.dump]
    names = args.arm or [Path(p).stem for p in args.dump]
    if len(names) != len(dumps):
        raise UsageError("--arm must be given once per --dump")
    if args.tag_tokens:
        dumps = [(tag_tokens(ds, args.tag_tokens.split(",")), preds) for ds, preds in dumps]
    first = dumps[0][0]
    for ds, _ in dumps[1:]:
        if ds.ids != first.ids:
            raise DataError("dumps cover different examples")
    reports = [{r.group: r for r in group_analysis(ds, preds, min_count=args.min_count)} for ds, preds in dumps]
    keys = list(group_analysis(*dumps[0], min_count=args.min_count))
    if not keys:
        print("warning: no tagged groups found", file=sys.stderr)
    header = ["group", "count"]
    for name in names:
        header += [f"{name}_accuracy", f"{name}_p_value"]
    rows = [tuple(header)]
    for r in keys:
        row = [r.group, r.count]
        for rep in reports:
            g = rep.get(r.group)
            row += [f"{g.group_metric:.6f}", f"{g.p_value:.6g}"] if g else ["", ""]
        rows.append(tuple(row))
    overall = ["(all)", len(first)]
    for ds, preds in dumps:
        overall += [f"{float(np.mean(preds == ds.y)):.6f}", ""]
    rows.append(tuple(overall))
    _write_table(args.out, rows)
    return 0


def cmd_project(args) -> int:
    ds, _ = _read_dump(args.dump) if args.dump else (_load(args.data), None)
    coords = project_2d(ds.x, args.method, Rng(args.seed), args.perplexity)
    rows = [("id", "label", "x", "y")] + [(i, int(l), repr(float(a)), repr(float(b)))
                                          for i, l, (a, b) in zip(ds.ids, ds.y, coords)]
    _write_table(args.out, rows)
    return 0


def cmd_report(args) -> int:
    results = [CVResult.from_records([r for _, r in read_records(p)]) for p in args.results]
    names = args.label or [Path(p).stem for p in args.results]
    base = results[args.baseline] if args.baseline is not None else None
    rows = [("model", "loss", "n", "f1_mean", "f1_std", "p_value")]
    for name, res in zip(names, results):
        p = ""
        if base is not None and res is not base:
            p = f"{compare_models(res.f1_scores, base.f1_scores, args.test):.4g}"
        rows.append((name, res.config.get("loss", ""), res.train_size, f"{res.mean['f1'] * 100:.2f}",
                     f"{res.std['f1'] * 100:.2f}", p))
    _write_table(args.out, rows)
    return 0


def _write_table(path, rows) -> None:
    if path:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, delimiter="\t", lineterminator="\n").writerows(rows)
    else:
        csv.writer(sys.stdout, delimiter="\t", lineterminator="\n").writerows(rows)


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot-dml", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic Gaussian-blob dataset")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--per-class", type=int, default=300)
    p.add_argument("--sep", type=float, default=4.0)
    p.add_argument("--sigma", type=float, default=1.5)
    p.add_argument("--outlier-frac", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="blobs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--loss", choices=["cce", "supcon", "softtriple", "combined", "model"], default="softtriple")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--d", type=int, default=5)
    p.add_argument("--c", type=int, default=3)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--tau", type=float, default=0.6)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--lambda", dest="lam", type=float, default=9.0)
    p.add_argument("--delta", type=float, default=0.7)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train once; optionally evaluate on held-out data")
    p.add_argument("--data", required=True)
    p.add_argument("--train-size", type=int)
    p.add_argument("--test-data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="parameter checkpoint path")
    p.add_argument("--history", help="per-step history (JSONL)")
    p.add_argument("--dump", help="held-out predictions and embeddings (JSONL)")
    p.add_argument("--tag-tokens", help="comma-separated tokens to tag from the text field")
    _add_hyper_flags(p)
    p.set_defaults(func=cmd_train)

    def add_cv_flags(p):
        p.add_argument("--data", required=True)
        p.add_argument("--train-size", type=int, required=True)
        p.add_argument("--folds", type=int, default=40)
        p.add_argument("--repeats", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=default_jobs())
        p.add_argument("--out")

    p = sub.add_parser("cv", help="repeated stratified few-shot cross-validation")
    add_cv_flags(p)
    p.add_argument("--compare", help="another cv result file; appends a p-value")
    p.add_argument("--test", choices=["mann_whitney", "paired_t"], default="mann_whitney")
    p.add_argument("--dump", help="predictions and embeddings of one extra run (JSONL)")
    _add_hyper_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("sweep", help="cv over a hyperparameter grid")
    add_cv_flags(p)
    p.add_argument("--config")
    p.add_argument("--loss", choices=["cce", "supcon", "softtriple"])
    p.add_argument("--grid", action="append", help="axis such as lr=1e-3,3e-3 (repeatable)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze-distance", help="accuracy by distance to the mean embedding")
    p.add_argument("--dump", required=True)
    p.add_argument("--reference-dump", help="dump whose embedding space defines the distances")
    p.add_argument("--buckets", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_distance)

    p = sub.add_parser("analyze-groups", help="Mann-Whitney search for hard example groups")
    p.add_argument("--dump", action="append", required=True)
    p.add_argument("--arm", action="append")
    p.add_argument("--tag-tokens")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_groups)

    p = sub.add_parser("project", help="2-D coordinates for plotting")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dump")
    src.add_argument("--data")
    p.add_argument("--method", choices=["pca", "tsne"], default="pca")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("report", help="tabulate cv result files")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--label", action="append")
    p.add_argument("--baseline", type=int, help="index of the result to test the others against")
    p.add_argument("--test", choices=["mann_whitney", "paired_t"], default="mann_whitney")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fewshot-dml {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"fewshot-dml {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
