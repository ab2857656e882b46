"""Command-line entry point: ``nptax {train,classify,evaluate,simulate}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .calibration import DEFAULT_GRID, calibrate_holdout, calibration_curve, write_curves, write_report
from .classifier import DEFAULT_TOPK, check_rho, classify_many, train
from .data_io import (
    load_library,
    load_model,
    read_predictions,
    read_queries,
    read_taxonomy,
    save_model,
    write_fasta,
    write_predictions,
    write_taxonomy,
)
from .errors import DataError, NumericError
from .evaluation import accuracy_table, novelty_summary, score_all, write_accuracy_table, write_novelty_summary
from .sequence_model import DEFAULT_KAPPA, KERNELS
from .synth import SynthConfig, holdout_split, simulate_library

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_HOLDOUT = 0.1

log = logging.getLogger("nptax")


class UsageError(Exception):
    pass


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        out = {"time": round(record.created, 3), "level": record.levelname, "event": record.getMessage()}
        out.update(getattr(record, "fields", {}))
        return json.dumps(out)


class _TextFormatter(logging.Formatter):
    def format(self, record):
        fields = getattr(record, "fields", {})
        extra = "".join(f" {k}={v}" for k, v in fields.items())
        return f"{record.levelname} {record.getMessage()}{extra}"


def _setup_logging(mode: str, verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if mode == "json" else
                         _TextFormatter())
    log.handlers[:] = [handler]
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    log.propagate = False


def _event(msg: str, **fields) -> None:
    log.info(msg, extra={"fields": fields})


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("must lie strictly between 0 and 1")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="nptax", formatter_class=fmt,
                                     description="Novelty-aware Bayesian taxonomic classification of DNA sequences.")
    parser.add_argument("--version", action="version", version=f"nptax {__version__}")
    common = argparse.ArgumentParser(add_help=False, formatter_class=fmt)
    common.add_argument("--log", choices=("text", "json"), default="text", help="log format on stderr")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    common.add_argument("--seed", type=int, default=0, help="seed for every random step")
    sub = parser.add_subparsers(dest="command", required=True)

    library = argparse.ArgumentParser(add_help=False)
    library.add_argument("--library", required=True, help="reference FASTA")
    library.add_argument("--taxonomy", help="taxonomy TSV (id column, then one column per rank)")
    library.add_argument("--embedded-taxonomy", action="store_true",
                         help="read labels from '>id;tax=a,b,c' headers instead of a TSV")
    library.add_argument("--ranks", help="comma-separated rank names for embedded labels")
    library.add_argument("--strict", action="store_true", help="fail on ids found in only one input")

    p = sub.add_parser("train", parents=[common, library], formatter_class=fmt, help="fit a model")
    p.add_argument("--model", required=True, help="output model file")
    p.add_argument("--kernel", choices=KERNELS, default="product1", help="sequence kernel")
    p.add_argument("--kappa", type=int, default=None, help=f"k-mer width, kmer kernel only (default {DEFAULT_KAPPA})")
    p.add_argument("--rho", type=float, default=1.0, help="posterior temperature stored in the model")
    p.add_argument("--calibrate", choices=("none", "auto"), default="none",
                   help=f"'auto' picks rho on a hold-out from the grid {','.join(map(str, DEFAULT_GRID))}")
    p.add_argument("--holdout", type=_fraction, default=DEFAULT_HOLDOUT, help="hold-out fraction for calibration")
    p.add_argument("--objective", choices=("gap", "ece"), default="gap", help="calibration objective")
    p.add_argument("--report", help="write the calibration grid table here")
    p.add_argument("--threads", type=_positive_int, default=1, help="worker threads for scoring")

    p = sub.add_parser("classify", parents=[common], formatter_class=fmt, help="annotate query sequences")
    p.add_argument("--model", required=True, help="model file from 'train'")
    p.add_argument("--queries", required=True, help="query FASTA")
    p.add_argument("--out", required=True, help="predictions file")
    p.add_argument("--format", choices=("tsv", "jsonl"), default="tsv", help="predictions format")
    p.add_argument("--rho", type=float, default=None, help="override the model's temperature")
    p.add_argument("--threads", type=_positive_int, default=1, help="worker threads; output does not depend on it")
    p.add_argument("--topk", type=int, default=DEFAULT_TOPK, help="number of top leaves to report")

    p = sub.add_parser("evaluate", parents=[common], formatter_class=fmt, help="score predictions against truth")
    p.add_argument("--model", required=True, help="model whose training taxonomy defines novelty")
    p.add_argument("--predictions", required=True, help="predictions file (TSV or JSON lines) from 'classify'")
    p.add_argument("--taxonomy", required=True, help="true taxonomy TSV for the queries")
    p.add_argument("--out", required=True, help="output directory for tables and curves")
    p.add_argument("--bins", type=_positive_int, default=10, help="points on the calibration curve")

    p = sub.add_parser("simulate", parents=[common], formatter_class=fmt, help="draw a synthetic library")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=_positive_int, default=1000, help="number of sequences")
    p.add_argument("--p", type=_positive_int, default=100, help="aligned sequence length")
    p.add_argument("--alpha", type=_floats, default=(1.0, 1.0, 1.0), help="per-level alpha, comma-separated")
    p.add_argument("--sigma", type=_floats, default=(0.25, 0.25, 0.25), help="per-level sigma, comma-separated")
    p.add_argument("--concentrations", type=_floats, default=None,
                   help="root then per-level Dirichlet concentrations (default 4,20,...,20,2)")
    p.add_argument("--ranks", help="comma-separated rank names")
    p.add_argument("--gap-rate", type=float, default=0.0, help="fraction of loci replaced by gaps")
    p.add_argument("--holdout", type=_fraction, default=None, help="also write a train/test split")
    p.add_argument("--split", choices=("random", "stratified"), default="random", help="split mode")
    p.add_argument("--split-level", type=int, default=1, help="rank (1-based) for stratified splits")
    return parser


def _load_training(args):
    ranks = tuple(args.ranks.split(",")) if getattr(args, "ranks", None) else None
    if not args.embedded_taxonomy and not args.taxonomy:
        raise UsageError("--taxonomy is required unless --embedded-taxonomy is set")
    lib = load_library(args.library, args.taxonomy, ranks=ranks, strict=args.strict,
                       embedded_taxonomy=args.embedded_taxonomy)
    if lib.missing_taxonomy or lib.missing_sequence:
        _event("unmatched ids skipped", without_taxonomy=len(lib.missing_taxonomy),
               without_sequence=len(lib.missing_sequence))
    if not lib.records:
        raise DataError("no usable training records")
    return lib


def cmd_train(args) -> int:
    if args.kappa is not None and args.kernel != "kmer":
        raise UsageError("--kappa only applies to --kernel kmer")
    kappa = (args.kappa or DEFAULT_KAPPA) if args.kernel == "kmer" else None
    rho = check_rho(args.rho)
    lib = _load_training(args)
    _event("library loaded", records=len(lib.records), ranks=",".join(lib.ranks))
    if args.calibrate == "auto":
        report = calibrate_holdout(lib.records, lib.ranks, args.kernel, kappa, args.holdout,
                                   args.seed, DEFAULT_GRID, args.objective, args.threads)
        rho = report.chosen_rho
        _event("calibrated", rho=rho, holdout=args.holdout, objective=args.objective)
        if args.report:
            write_report(report, args.report)
    model = train(lib.records, lib.ranks, kernel=args.kernel, kappa=kappa, rho=rho)
    for prm in model.params:
        _event("level fitted", level=prm.level, alpha=f"{prm.alpha:.6g}", sigma=f"{prm.sigma:.6g}")
    save_model(model, args.model)
    _event("model written", path=args.model, candidates=len(model.candidates), rho=rho)
    return EXIT_OK


def cmd_classify(args) -> int:
    rho = None if args.rho is None else check_rho(args.rho)
    if args.topk < 0:
        raise UsageError("--topk must be non-negative")
    model = load_model(args.model)
    queries = list(read_queries(args.queries))
    if model.spec.aligned:
        bad = [q.id for q in queries if len(q.sequence) != model.spec.p]
        if bad:
            raise DataError(f"{len(bad)} queries do not match the aligned length {model.spec.p}, e.g. {bad[0]!r}")
    t0 = time.perf_counter()
    anns = classify_many(queries, model, rho=rho, threads=args.threads, topk=args.topk)
    write_predictions(anns, args.out, model.tree.levels, fmt=args.format, topk=args.topk)
    _event("classified", queries=len(queries), rho=model.rho if rho is None else rho,
           threads=args.threads, seconds=f"{time.perf_counter() - t0:.2f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    ranks, anns = read_predictions(args.predictions)
    if tuple(ranks) != tuple(model.tree.levels):
        raise DataError(f"prediction ranks {ranks} differ from model ranks {model.tree.levels}")
    _, truths = read_taxonomy(args.taxonomy)
    scored = score_all(anns, truths, model.tree)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = accuracy_table(scored, ranks)
    write_accuracy_table(rows, out / "accuracy.tsv")
    summary = novelty_summary(scored)
    write_novelty_summary(summary, out / "novelty.tsv")
    curves = {}
    for group, keep in (("All", lambda s: True), ("New", lambda s: s.is_new), ("Observed", lambda s: not s.is_new)):
        sub = [s for s in scored if keep(s)]
        if sub:
            curves[group] = calibration_curve([s.max_probability for s in sub],
                                              [s.correct[-1] for s in sub], args.bins)
    write_curves(curves, out / "calibration_curve.csv")
    for r in rows:
        if r.rank == ranks[-1]:
            _event("accuracy", group=r.group, n=r.n, pct=f"{r.accuracy:.1f}", mean_prob=f"{r.mean_probability:.3f}")
    _event("novelty", truly_novel=summary.truly_novel, recognized=summary.recognized_novel,
           fully_correct=summary.fully_correct_novel)
    return EXIT_OK


def cmd_simulate(args) -> int:
    if len(args.alpha) != len(args.sigma):
        raise UsageError("--alpha and --sigma need the same number of levels")
    ranks = tuple(args.ranks.split(",")) if args.ranks else None
    try:
        config = SynthConfig(alphas=args.alpha, sigmas=args.sigma, p=args.p, n=args.n,
                             concentrations=args.concentrations, ranks=ranks,
                             gap_rate=args.gap_rate, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    lib = simulate_library(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_fasta(lib.records, out / "library.fasta")
    write_taxonomy(lib.records, lib.ranks, out / "taxonomy.tsv")
    with open(out / "params.json", "w", encoding="utf-8") as fh:
        json.dump({"ranks": list(lib.ranks), "seed": args.seed, "n": args.n, "p": args.p,
                   "concentrations": list(config.level_concentrations),
                   "level_params": [{"level": q.level, "alpha": q.alpha, "sigma": q.sigma} for q in lib.params]},
                  fh, indent=2)
    if args.holdout is not None:
        train_set, test_set = holdout_split(lib.records, args.split, args.holdout, args.seed,
                                            level=args.split_level)
        write_fasta(train_set, out / "train.fasta")
        write_taxonomy(train_set, lib.ranks, out / "train.tsv")
        write_fasta(test_set, out / "test.fasta")
        write_taxonomy(test_set, lib.ranks, out / "test.tsv")
    _event("library simulated", records=len(lib.records), leaves=len(lib.theta), out=str(out))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "classify": cmd_classify, "evaluate": cmd_evaluate, "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    _setup_logging(args.log, args.verbose)
    _event("start", command=args.command,
           **{k: v for k, v in sorted(vars(args).items()) if k not in ("command", "log", "verbose")})
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        log.error(f"usage: {exc}")
        return EXIT_USAGE
    except NumericError as exc:
        log.error(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        log.error(f"data error: {exc}")
        return EXIT_DATA
    except ValueError as exc:
        log.error(f"usage: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
