"""Command-line interface.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
Results go to stdout (or ``--out``); diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import data as data_mod
from .adapt import AmofaConfig, amofa_fit
from .em import EmConfig
from .evaluation import (cross_validate, hard_assignments, hard_cluster, nid,
                         train_classifier)
from .model import Dataset, NumericalError
from .modelfile import ModelFileError, load_bundle, load_model, save_bundle, save_model

logger = logging.getLogger("amofa")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
TRACE_COLUMNS = ("step", "action", "K", "p_list", "message_length", "log_likelihood")


class InputError(Exception):
    """Bad flags or unreadable input; maps to exit code 2."""


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value > 0 or not np.isfinite(value):
        raise argparse.ArgumentTypeError(f"must be a positive finite number, got {text}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def _config(args) -> AmofaConfig:
    return AmofaConfig(em=EmConfig(epsilon=args.eps, max_iters=args.max_iters),
                       outer_epsilon=args.outer_eps)


def _load(path, has_labels=False, header=False) -> Dataset:
    try:
        return data_mod.load_csv(path, has_labels=has_labels, header=header)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        try:
            with open(out, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise InputError(f"cannot write {out}: {exc.strerror or exc}") from None


def trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for i, s in enumerate(trace.steps):
        w.writerow([i, s.action, s.n_components, ";".join(str(p) for p in s.factors),
                    repr(float(s.message_length)), repr(float(s.log_likelihood))])
    return buf.getvalue()


def _column(values) -> str:
    return "".join(f"{int(v)}\n" for v in values)


def cmd_fit(args) -> int:
    ds = _load(args.data, header=args.header)
    model, trace = amofa_fit(ds.points, _config(args))
    try:
        save_model(model, args.out)
    except OSError as exc:
        raise InputError(f"cannot write {args.out}: {exc.strerror or exc}") from None
    if args.trace:
        _emit(trace_csv(trace), args.trace)
    logger.info("selected K=%d, factors %s, message length %.4f", model.n_components,
                list(model.factors), trace.steps[trace.selected].message_length)
    return EXIT_OK


def _read_model(path):
    try:
        return load_model(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None
    except ModelFileError as exc:
        raise InputError(f"{path}: {exc}") from None


def cmd_cluster(args) -> int:
    model = _read_model(args.model)
    ds = _load(args.data, header=args.header)
    if ds.dim != model.dim:
        raise InputError(f"data have {ds.dim} columns, model expects {model.dim}")
    # raw component indices, so they line up with the model file's component order
    _emit(_column(hard_assignments(model, ds.points)), args.out)
    return EXIT_OK


def cmd_classify_train(args) -> int:
    ds = _load(args.data, has_labels=True, header=args.header)
    bundle = train_classifier(ds, _config(args))
    try:
        save_bundle(bundle, args.out)
    except OSError as exc:
        raise InputError(f"cannot write {args.out}: {exc.strerror or exc}") from None
    for label, m in bundle.models.items():
        logger.info("class %d: K=%d, factors %s", label, m.n_components, list(m.factors))
    return EXIT_OK


def cmd_classify_predict(args) -> int:
    try:
        bundle = load_bundle(args.model)
    except OSError as exc:
        raise InputError(f"cannot read {args.model}: {exc.strerror or exc}") from None
    except ModelFileError as exc:
        raise InputError(f"{args.model}: {exc}") from None
    ds = _load(args.data, has_labels=args.has_labels, header=args.header)
    if ds.dim != bundle.dim:
        raise InputError(f"data have {ds.dim} feature columns, bundle expects {bundle.dim}")
    pred = bundle.predict(ds.points)
    if ds.labels is not None:
        logger.info("accuracy %.4f on %d points", float(np.mean(pred == ds.labels)), ds.n)
    _emit(_column(pred), args.out)
    return EXIT_OK


def _read_labels(path, header):
    ds = _load(path, header=header)
    if ds.dim != 1:
        raise InputError(f"{path}: expected a single column of cluster labels, found {ds.dim}")
    col = ds.points[:, 0]
    if not np.all(col == np.round(col)):
        raise InputError(f"{path}: cluster labels must be integers")
    return col.astype(np.int64)


def cmd_eval_nid(args) -> int:
    a = _read_labels(args.a, args.header)
    b = _read_labels(args.b, args.header)
    if a.size != b.size:
        raise InputError(f"label files differ in length: {a.size} vs {b.size}")
    _emit(f"{nid(a, b)!r}\n", args.out)
    return EXIT_OK


def _synth_dataset(args) -> Dataset:
    if args.spec is not None:
        try:
            text = Path(args.spec).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read {args.spec}: {exc.strerror or exc}") from None
        try:
            spec = data_mod.GeneratorSpec.from_json(text)
            # flags given on the command line override n and seed stored in the spec
            spec = spec.with_sampling(args.n or spec.n,
                                      spec.seed if args.seed is None else args.seed)
        except ValueError as exc:
            raise InputError(f"{args.spec}: {exc}") from None
        return data_mod.sample_mixture(spec)
    seed = args.seed or 0
    if args.example == "waveform":
        return data_mod.waveform(args.n or 500, seed)
    factory = data_mod.EXAMPLES[args.example]
    spec = factory(seed=seed) if args.n is None else factory(n=args.n, seed=seed)
    return data_mod.sample_mixture(spec)


def cmd_synth(args) -> int:
    ds = _synth_dataset(args)
    _emit(data_mod.format_csv(ds.points, ds.labels), args.out)
    return EXIT_OK


def _bench_synthetic(args, example: str):
    factory = data_mod.EXAMPLES[example]
    config = _config(args)
    rows = []
    for r in range(args.replications):
        seed = args.seed + r
        ds = data_mod.sample_mixture(factory(seed=seed))
        model, _ = amofa_fit(ds.points, config)
        score = nid(ds.labels, hard_cluster(model, ds.points))
        rows.append((r, seed, model.n_components, score))
        logger.info("replication %d (seed %d): K=%d NID=%.4f", r, seed, model.n_components, score)
    header = ("replication", "seed", "K", "nid")
    hist = Counter(k for _, _, k, _ in rows)
    summary = [f"suite example{example}: {len(rows)} replications",
               "K histogram: " + ", ".join(f"K={k}: {hist[k]}" for k in sorted(hist)),
               f"mean NID: {np.mean([s for *_, s in rows]):.4f}"]
    if len(rows) == 1:
        r = rows[0]
        summary = [f"suite example{example}: seed {r[1]} K={r[2]} NID={r[3]:.4f}"]
    return header, rows, summary


def _bench_uci(args):
    if args.data_dir is None:
        raise InputError("--data-dir is required for the uci suite")
    root = Path(args.data_dir)
    if not root.is_dir():
        raise InputError(f"{root} is not a directory")
    sets = [(p.stem, lambda p=p: _load(p, has_labels=True)) for p in sorted(root.glob("*.csv"))]
    sets.append(("waveform", lambda: data_mod.waveform(500, args.seed)))
    config = _config(args)
    rows, summary = [], []
    for name, loader in sets:
        ds = loader()
        for r in range(args.replications):
            seed = args.seed + r
            res = cross_validate(ds, folds=args.folds, config=config, seed=seed,
                                 progress=lambda i, acc, name=name: logger.info(
                                     "%s fold %d: %.4f", name, i, acc))
            for i, acc in enumerate(res.fold_accuracies):
                rows.append((name, r, seed, i, acc))
            summary.append(f"{name} (seed {seed}): accuracy {100 * res.mean:.2f} "
                           f"± {100 * res.std:.2f} over {args.folds} folds")
    return ("dataset", "replication", "seed", "fold", "accuracy"), rows, summary


def cmd_bench(args) -> int:
    if args.suite == "uci":
        if args.replications_given is None:
            args.replications = 1
        header, rows, summary = _bench_uci(args)
    else:
        header, rows, summary = _bench_synthetic(args, args.suite[-1])
    sys.stdout.write("\n".join(summary) + "\n")
    sys.stdout.flush()
    if args.out:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        _emit(buf.getvalue(), args.out)
    return EXIT_OK


def _add_fit_flags(p) -> None:
    p.add_argument("--eps", type=_positive_float, default=1e-5,
                   help="relative convergence tolerance of inner EM (default 1e-5)")
    p.add_argument("--outer-eps", type=_positive_float, default=1e-4,
                   help="relative message-length decrease that keeps the search growing")
    p.add_argument("--max-iters", type=_positive_int, default=1000,
                   help="EM iteration cap per inner run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amofa",
                                     description="Adaptive mixtures of factor analyzers.")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more diagnostics on stderr (repeat for debug output)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fit", help="fit a model to unlabelled CSV data")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--trace", help="write the search trace as CSV")
    p.add_argument("--header", action="store_true", help="skip the first CSV line")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cluster", help="hard-assign points to model components")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--header", action="store_true")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("classify-train", help="fit one model per class (labels in last column)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="bundle file to write")
    p.add_argument("--header", action="store_true")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_classify_train)

    p = sub.add_parser("classify-predict", help="maximum-likelihood class of each point")
    p.add_argument("--model", required=True, help="bundle file from classify-train")
    p.add_argument("--data", required=True)
    p.add_argument("--has-labels", action="store_true",
                   help="last column holds true labels; accuracy goes to stderr")
    p.add_argument("--out")
    p.add_argument("--header", action="store_true")
    p.set_defaults(func=cmd_classify_predict)

    p = sub.add_parser("eval-nid", help="normalized information distance of two labelings")
    p.add_argument("--a", required=True, help="single-column CSV of labels")
    p.add_argument("--b", required=True, help="single-column CSV of labels")
    p.add_argument("--out")
    p.add_argument("--header", action="store_true")
    p.set_defaults(func=cmd_eval_nid)

    p = sub.add_parser("synth", help="sample a labelled synthetic dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--example", choices=["1", "2", "waveform"])
    src.add_argument("--spec", help="JSON file with weights, means, covariances")
    p.add_argument("--n", type=_positive_int, help="sample size (default 900, 1000 or 500 "
                   "for examples 1, 2 and waveform)")
    p.add_argument("--seed", type=int, help="RNG seed (default 0)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="replicated benchmark runs")
    p.add_argument("--suite", required=True, choices=["example1", "example2", "uci"])
    p.add_argument("--replications", dest="replications_given", type=_positive_int,
                   help="datasets per synthetic suite (default 100); cross-validation "
                        "repeats per uci dataset (default 1)")
    p.add_argument("--data-dir", help="directory of labelled CSV files for the uci suite")
    p.add_argument("--folds", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="per-run results as CSV")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    if args.command == "bench":
        args.replications = args.replications_given or 100
        if args.folds < 2:
            parser.error("--folds must be at least 2")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ArithmeticError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # data that parse but cannot be modelled, e.g. a constant column set
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
