"""Command-line entry point: ``python -m sparge <subcommand> ...``.

Exit codes: 0 success, 1 validation or usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import data_io
from .graph_embedding import DegenerateObjectiveError
from .similarity import (
    embed,
    embed_matrix,
    evaluate,
    knn_predict_matrix,
    knn_query,
    EmbeddedPatient,
    logreg_predict,
    logreg_train,
    similar_by_weight,
    timed_predictions,
)
from .trainer import FitError, Hyperparams, InputError, fit, gradcheck, grid_search


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# flag name -> Hyperparams field
HP_FLAGS = {
    "lambda1": ("lam1", float, "data-fidelity weight"),
    "lambda2": ("lam2", float, "nuclear-norm weight"),
    "r1": ("r1", float, "l1 coding penalty"),
    "r2": ("r2", float, "squared-l2 coding penalty"),
    "gamma": ("gamma", float, "gradient step size"),
    "zeta": ("zeta", float, "singular value threshold (constant rule)"),
    "dict-size": ("k", int, "number of dictionary atoms"),
    "embed-dim": ("l", int, "embedding dimension"),
    "mode": ("mode", str, "supervised or unsupervised graphs"),
    "k1": ("k1", int, "same-label neighbors"),
    "k2": ("k2", int, "different-label neighbors"),
    "t": ("t", float, "heat-kernel width (unsupervised)"),
    "kg": ("k_g", int, "neighbors of the local graph (unsupervised)"),
    "max-iter": ("max_iter", int, "maximum outer iterations"),
    "grad-tol": ("grad_tol", float, "stop when the search direction norm drops below this"),
    "seed": ("seed", int, "random seed"),
    "svt": ("svt", str, "threshold rule: constant (zeta) or proximal (gamma * lambda2)"),
    "direction": ("direction", str, "dictionary step: quotient or composite"),
    "init-subset": ("init_subset", int, "codes used by the projection initializer"),
}
_FIELD_TYPES = {f.name: type(getattr(Hyperparams(), f.name)) for f in fields(Hyperparams)}


def _add_hp_flags(p):
    d = Hyperparams()
    g = p.add_argument_group("hyperparameters")
    for flag, (name, typ, text) in HP_FLAGS.items():
        kw = {"choices": ("supervised", "unsupervised")} if flag == "mode" else {}
        if flag == "svt":
            kw = {"choices": ("constant", "proximal")}
        if flag == "direction":
            kw = {"choices": ("quotient", "composite")}
        g.add_argument(f"--{flag}", type=typ, default=None, dest=f"hp_{name}",
                       help=f"{text} (default: {getattr(d, name)})", **kw)
    g.add_argument("--backtrack", action="store_true", default=None, dest="hp_backtracking",
                   help="halve the step until the objective does not increase (default: off)")
    g.add_argument("--config", type=Path, default=None,
                   help="key=value file of hyperparameters; flags win (default: none)")


def _coerce(name, value):
    typ = _FIELD_TYPES[name]
    if typ is bool:
        return str(value).lower() in ("1", "true", "yes", "on")
    return typ(value)


def hyperparams_from(args) -> Hyperparams:
    """Defaults, overridden by the config file, overridden by flags."""
    values = {}
    if getattr(args, "config", None) is not None:
        aliases = {flag: name for flag, (name, _, _) in HP_FLAGS.items()}
        aliases["backtrack"] = "backtracking"
        for key, raw in data_io.read_key_value(args.config).items():
            name = aliases.get(key, key)
            if name not in _FIELD_TYPES:
                raise ValueError(f"{args.config}: unknown hyperparameter {key!r}")
            values[name] = _coerce(name, raw)
    for key, value in vars(args).items():
        if key.startswith("hp_") and value is not None:
            values[key[3:]] = value
    return Hyperparams(**values)


def _add_data_flags(p, labels=True):
    p.add_argument("input", type=Path, help="CSV with one sample per row")
    if labels:
        p.add_argument("--label-column", default="label",
                       help="header name of the label column (default: label)")
    p.add_argument("--impute", choices=("none", "mean", "nearby"), default="none",
                   help="fill gaps before use (default: none; the model handles masks)")
    p.add_argument("--normalize", action="store_true",
                   help="scale each sample to unit norm (default: off)")


def _load(args, need_labels):
    label_col = getattr(args, "label_column", None)
    X, labels, names = data_io.load_csv(args.input, label_column=label_col) \
        if label_col is not None else data_io.load_csv(args.input)
    if need_labels and labels is None:
        raise ValueError("labels are required")
    X = _preprocess(X, args)
    return X, labels, names


def _preprocess(X, args):
    if args.impute == "mean":
        X = data_io.mean_impute(X)
    elif args.impute == "nearby":
        X = data_io.impute(X, data_io.ImputePolicy("weighted_nearby"))
    if args.normalize:
        # normalize observed entries only
        norms = np.linalg.norm(X.values, axis=0)
        if np.any(norms == 0):
            raise ValueError("a sample has no nonzero observed value")
        X = data_io.ObservedMatrix(X.values / norms, X.mask)
    return X


def _load_labeled_or_not(path, label_column):
    try:
        return data_io.load_csv(path, label_column=label_column)
    except data_io.DataFormatError as exc:
        if "no label column" not in str(exc):
            raise
        return data_io.load_csv(path)


def _write(path, text):
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# -- subcommands -------------------------------------------------------------


def cmd_synth(args):
    spec = data_io.SyntheticSpec(args.classes, args.dim, args.subspace_dim, args.per_class,
                                 args.sigma, args.missing, args.seed)
    X, labels, clean = data_io.generate_synthetic(spec)
    data_io.write_csv(args.output, X, labels=labels)
    truth = args.truth or Path(str(args.output) + ".truth.csv")
    data_io.write_matrix_csv(truth, clean, [f"v{j}" for j in range(clean.shape[0])])
    return 0


def cmd_fit(args):
    hp = hyperparams_from(args)
    X, labels, _ = _load(args, need_labels=hp.mode == "supervised")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model, report = fit(X, labels, hp)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    data_io.save_model(model, args.output)
    report_path = args.report or Path(str(args.output) + ".report.csv")
    Path(report_path).write_text(report.to_csv(timing=args.timing))
    return 0


def _load_for_model(args, model):
    X, labels, _ = _load_labeled_or_not(args.input, args.label_column)
    X = _preprocess(X, args)
    if X.m != model.Z.shape[0]:
        raise ValueError(f"data has {X.m} variables, model expects {model.Z.shape[0]}")
    return X, labels


def cmd_embed(args):
    model = data_io.load_model(args.model)
    X, labels = _load_for_model(args, model)
    Y = embed_matrix(model, X)
    header = [f"y{j}" for j in range(Y.shape[0])]
    lines = [",".join(["id"] + header + (["label"] if labels is not None else []))]
    for i in range(X.n):
        row = [str(i)] + [repr(float(v)) for v in Y[:, i]]
        if labels is not None:
            row.append(str(labels[i]))
        lines.append(",".join(row))
    _write(args.output, "\n".join(lines) + "\n")
    return 0


def cmd_query(args):
    model = data_io.load_model(args.model)
    X, _ = _load_for_model(args, model)
    if not 0 <= args.row < X.n:
        raise ValueError(f"row {args.row} outside 0..{X.n - 1}")
    x, mask = X.values[:, args.row], X.mask[:, args.row]
    if args.by_weight:
        res = similar_by_weight(model, x, mask)
        lines = ["rank,atom,weight"]
        lines += [f"{r},{j},{res.sparse_weights[j]!r}" for r, j in enumerate(res.neighbor_ids, 1)]
    else:
        train = [EmbeddedPatient(i, y) for i, y in enumerate(model.embeddings().T)]
        res = knn_query(train, embed(model, x, mask).y, min(args.K, len(train)))
        lines = ["rank,training_index,label,distance"]
        for r, (i, d) in enumerate(zip(res.neighbor_ids, res.distances), 1):
            lab = model.labels[i] if model.labels is not None else ""
            lines.append(f"{r},{i},{lab},{float(d)!r}")
    _write(args.output, "\n".join(lines) + "\n")
    return 0


def cmd_evaluate(args):
    model = data_io.load_model(args.model)
    X, labels = _load_for_model(args, model)
    if labels is None:
        raise ValueError("evaluation needs a label column")
    if model.labels is None:
        raise ValueError("the model carries no training labels")
    if args.baseline == "raw-knn":
        if args.train is None:
            raise ValueError("--baseline raw-knn needs --train")
        Xtr, ytr, _ = data_io.load_csv(args.train, label_column=args.label_column)
        Xtr = _preprocess(Xtr, args)
        if ytr is None or Xtr.m != X.m:
            raise ValueError("training file must be labeled and match the variables")
        Y_train, y_train, queries = Xtr.values, ytr, X.values
    else:
        Y_train, y_train = model.embeddings(), model.labels
        queries = embed_matrix(model, X)
    if args.baseline == "lr":
        lr = logreg_train(Y_train.T, y_train, l2=args.l2)
        predict = lambda q: logreg_predict(lr, q)  # noqa: E731
    else:
        predict = lambda q: knn_predict_matrix(Y_train, y_train, q[:, None], args.K)[0]  # noqa: E731
    preds, times = timed_predictions(predict, queries.T)
    metrics = evaluate(preds, labels, times)
    _write(args.output, metrics.to_csv(timing=args.timing))
    return 0


def cmd_gradcheck(args):
    hp = hyperparams_from(args)
    if args.input is None:
        spec = data_io.SyntheticSpec(2, 8, 2, 6, 0.05, 0.1, hp.seed)
        X, labels, _ = data_io.generate_synthetic(spec)
        if args.hp_k is None:
            hp = replace(hp, k=6)
        if args.hp_l is None:
            hp = replace(hp, l=2)
        hp = replace(hp, k1=min(hp.k1, 3), k2=min(hp.k2, 3), k_g=min(hp.k_g, 3))
    else:
        X, labels, _ = data_io.load_csv(args.input, label_column=args.label_column)
    report = gradcheck(X, labels, hp, h=args.h)
    lines = ["quantity,value",
             f"rel_error_U,{report.rel_error_U!r}",
             f"rel_error_D,{report.rel_error_D!r}",
             f"boundary_flagged,{str(report.boundary_flagged).lower()}",
             f"skipped_samples,{report.skipped_samples}",
             f"h,{report.h!r}"]
    _write(args.output, "\n".join(lines) + "\n")
    return 0


def _parse_grid(text):
    grid = {}
    aliases = {"lambda1": "lam1", "lambda2": "lam2"}
    for part in text.split(";"):
        if not part.strip():
            continue
        key, _, vals = part.partition("=")
        key = aliases.get(key.strip(), key.strip())
        if key not in ("lam1", "lam2", "r1", "r2"):
            raise ValueError(f"grid key {key!r} must be one of lambda1, lambda2, r1, r2")
        grid[key] = [float(v) for v in vals.split(",") if v.strip()]
    if not grid or any(not v for v in grid.values()):
        raise ValueError("empty hyperparameter grid")
    return grid


def cmd_gridsearch(args):
    base = hyperparams_from(args)
    X, labels, _ = _load(args, need_labels=True)
    res = grid_search(X, labels, _parse_grid(args.grid), folds=args.folds, seed=base.seed,
                      base=base)
    lines = ["lambda1,lambda2,r1,r2,cv_accuracy,best"]
    for hp, score in res.table:
        lines.append(f"{hp.lam1!r},{hp.lam2!r},{hp.r1!r},{hp.r2!r},{score!r},"
                     f"{int(hp == res.best)}")
    _write(args.output, "\n".join(lines) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="sparge", description="Sparse-coding graph embedding for patient similarity.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("synth", help="generate a union-of-subspaces benchmark", formatter_class=fmt)
    s.add_argument("--seed", type=int, default=42, help="random seed")
    s.add_argument("--classes", type=int, default=3, help="number of subspaces")
    s.add_argument("--dim", type=int, default=60, help="ambient dimension")
    s.add_argument("--subspace-dim", type=int, default=4, help="dimension of each subspace")
    s.add_argument("--per-class", type=int, default=40, help="samples per subspace")
    s.add_argument("--sigma", type=float, default=0.05, help="noise standard deviation")
    s.add_argument("--missing", type=float, default=0.2, help="probability a cell is hidden")
    s.add_argument("-o", "--output", type=Path, required=True, help="data CSV to write")
    s.add_argument("--truth", type=Path, default=None,
                   help="ground-truth CSV (default: <output>.truth.csv)")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="train a model", formatter_class=fmt)
    _add_data_flags(f)
    _add_hp_flags(f)
    f.add_argument("-o", "--output", type=Path, required=True, help="model file to write")
    f.add_argument("--report", type=Path, default=None,
                   help="per-iteration CSV (default: <output>.report.csv)")
    f.add_argument("--timing", action="store_true", help="include wall-clock seconds in the report")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("embed", help="map samples to the embedded space", formatter_class=fmt)
    e.add_argument("model", type=Path, help="model file")
    _add_data_flags(e)
    e.add_argument("-o", "--output", default="-", help="embeddings CSV ('-' for stdout)")
    e.set_defaults(func=cmd_embed)

    q = sub.add_parser("query", help="nearest training samples of one sample", formatter_class=fmt)
    q.add_argument("model", type=Path, help="model file")
    _add_data_flags(q)
    q.add_argument("--row", type=int, default=0, help="row of the input CSV to query")
    q.add_argument("-K", type=int, default=5, help="number of neighbors")
    q.add_argument("--by-weight", action="store_true", help="rank atoms by code weight instead")
    q.add_argument("-o", "--output", default="-", help="result file ('-' for stdout)")
    q.set_defaults(func=cmd_query)

    v = sub.add_parser("evaluate", help="classification metrics on labeled data", formatter_class=fmt)
    v.add_argument("model", type=Path, help="model file")
    _add_data_flags(v)
    v.add_argument("--baseline", choices=("knn", "lr", "raw-knn"), default="knn",
                   help="knn/lr in the embedded space, or knn on raw zero-filled data")
    v.add_argument("--train", type=Path, default=None, help="raw training CSV for raw-knn")
    v.add_argument("-K", type=int, default=5, help="neighbors for knn")
    v.add_argument("--l2", type=float, default=1.0, help="ridge weight for lr")
    v.add_argument("--timing", action="store_true", help="report mean prediction seconds")
    v.add_argument("-o", "--output", default="-", help="metrics CSV ('-' for stdout)")
    v.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients",
                       formatter_class=fmt)
    g.add_argument("input", type=Path, nargs="?", default=None,
                   help="labeled CSV (default: a seeded toy instance)")
    g.add_argument("--label-column", default="label", help="header name of the label column")
    g.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    _add_hp_flags(g)
    g.add_argument("-o", "--output", default="-", help="report file ('-' for stdout)")
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("gridsearch", help="cross-validated hyperparameter grid",
                       formatter_class=fmt)
    _add_data_flags(r)
    _add_hp_flags(r)
    r.add_argument("--grid", required=True,
                   help="e.g. 'lambda1=0.5,1;r1=0.01,0.05' over lambda1, lambda2, r1, r2")
    r.add_argument("--folds", type=int, default=3, help="cross-validation folds")
    r.add_argument("-o", "--output", default="-", help="score table ('-' for stdout)")
    r.set_defaults(func=cmd_gridsearch)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FitError, DegenerateObjectiveError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())
