"""Command-line front end: ``simplicial <command> ...``.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
Errors are printed as a single ``ERROR <code>: <detail>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .composition import read_composition_csv, write_matrix_csv
from .errors import DegenerateScatter, InvalidComposition, InvalidConfig, NumericalError, ShapeMismatch, SimplicialError
from .inference import (
    ConfidenceEllipse,
    bootstrap_coefficients,
    confidence_ellipse,
    test_amalgamation,
    test_coefficients,
    test_independence,
)
from .manifest import RunManifest
from .parallel import resolve_threads
from .scls import (
    COEF_TOL,
    fit_alpha_scls,
    fit_ar1,
    fit_multi,
    fit_weighted,
    load_fit_json,
    predict,
)
from .simulation import (
    BENCHMARK_COLUMNS,
    SimConfig,
    cross_validate,
    run_benchmark,
    run_discrepancy,
    run_power,
    run_type1,
    write_table,
)
from .tflr import fit_tflr

log = logging.getLogger("simplicial")

# Arguments that never change results and stay out of manifests.
_NOT_RECORDED = {"func", "threads", "out", "verbose"}


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _read(path, force_closure=False, group_column=None):
    comp, groups = read_composition_csv(path, force_closure=force_closure, group_column=group_column)
    return comp, groups


def _read_matrix_csv(path) -> tuple[np.ndarray, list[str], list[str]]:
    """Matrix CSV with a header row and an optional leading row-label column."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise InvalidComposition(f"{path}: need a header and at least one row")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    labelled = header[0] == "" or not _is_number(body[0][0])
    if labelled:
        cols, labels = header[1:], [r[0].strip() for r in body]
        vals = [r[1:] for r in body]
    else:
        cols, labels = header, [f"B{i + 1}" for i in range(len(body))]
        vals = body
    try:
        M = np.array([[float(c) for c in r] for r in vals])
    except ValueError as exc:
        raise InvalidComposition(f"{path}: {exc}") from None
    if M.ndim != 2 or M.shape[1] != len(cols):
        raise ShapeMismatch(f"{path}: ragged rows")
    return M, labels, cols


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _close_rows(M: np.ndarray, what: str, tol: float = 1e-4) -> np.ndarray:
    """Accept rows rounded on output (e.g. 6 significant digits) and close them."""
    if np.any(M < -COEF_TOL):
        raise InvalidComposition(f"{what} has negative entries")
    s = M.sum(axis=1)
    if np.any(np.abs(s - 1) > tol):
        raise InvalidComposition(f"{what} rows must sum to 1 (got {s.round(6).tolist()})")
    return np.clip(M, 0, None) / s[:, None]


def _manifest(args, command: str, inputs=()) -> RunManifest:
    arguments = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_RECORDED}
    return RunManifest.build(command, arguments, getattr(args, "seed", None), inputs)


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -------------------------------------------------------------------- fit


def _write_fit(out: Path, coefficients, fitted, resp_names, doc: dict):
    if isinstance(coefficients, list):
        B = np.vstack([c.B for c in coefficients])
        labels = [f"P{m + 1}:{p}" for m, c in enumerate(coefficients) for p in c.predictor_names]
    else:
        B, labels = coefficients.B, list(coefficients.predictor_names)
    write_matrix_csv(out / "coefficients.csv", B, resp_names, labels)
    with open(out / "coefficients.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_matrix_csv(out / "fitted.csv", fitted, resp_names, fmt="%.10g")


def cmd_fit(args) -> int:
    Y, groups = _read(args.response, args.force_closure, args.group_column)
    out = _outdir(args.out)
    names = list(Y.names)
    inputs = [args.response]
    if args.lag1:
        if args.predictor:
            raise InvalidConfig("--lag1 uses the response as its own predictor; drop --predictor")
        fit = fit_ar1(Y, groups, args.alpha)
        _write_fit(out, fit.coefficients, fit.fitted, names, fit.to_dict())
    else:
        if not args.predictor:
            raise InvalidConfig("at least one --predictor is required")
        Xs = [_read(p, args.force_closure)[0] for p in args.predictor]
        inputs += args.predictor
        if args.model == "tflr":
            if len(Xs) != 1:
                raise InvalidConfig("TFLR takes exactly one predictor")
            tf = fit_tflr(Y, Xs[0], alpha=args.alpha, max_iter=args.max_iter)
            _write_fit(out, tf.coefficients, tf.fitted, names, tf.to_dict())
        else:
            if len(Xs) == 1:
                if args.weighted:
                    raise InvalidConfig("--weighted needs two or more predictors")
                fit = fit_alpha_scls(Y, Xs[0], args.alpha)
            else:
                if args.alpha != 1:
                    raise InvalidConfig("--alpha is only supported with a single predictor")
                fit = fit_weighted(Y, Xs) if args.weighted else fit_multi(Y, Xs)
            _write_fit(out, fit.coefficients, fit.fitted, names, fit.to_dict())
    _manifest(args, "fit", inputs).write(out / "manifest.json")
    return 0


def cmd_predict(args) -> int:
    fit = load_fit_json(args.fit)
    Xs = [_read(p, args.force_closure)[0] for p in args.predictor]
    Yhat = predict(fit, Xs if fit.is_multi else Xs[0])
    cols = (fit.coefficients[0] if fit.is_multi else fit.coefficients).response_names
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out, Yhat, cols, fmt="%.10g")
    return 0


# ------------------------------------------------------------------- test


def cmd_test(args) -> int:
    Y, _ = _read(args.response, args.force_closure)
    X, _ = _read(args.predictor, args.force_closure)
    inputs = [args.response, args.predictor]
    if args.kind == "independence":
        res = test_independence(Y, X, args.permutations, args.seed, args.model, threads=args.threads)
    elif args.kind == "coefficients":
        if args.b0 is None:
            raise InvalidConfig("--b0 is required for the coefficient test")
        B0 = _close_rows(_read_matrix_csv(args.b0)[0], "B0")
        inputs.append(args.b0)
        res = test_coefficients(Y, X, B0, args.permutations, args.seed, rows=args.rows, threads=args.threads)
    else:
        if args.l1 is None or args.l2 is None:
            raise InvalidConfig("--l1 and --l2 are required for the amalgamation test")
        res = test_amalgamation(Y, X, args.l1, args.l2, args.permutations, args.seed, threads=args.threads)
    text = res.to_json(args.include_replicates) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = _outdir(args.out)
        (out / "result.json").write_text(text)
        _manifest(args, f"test {args.kind}", inputs).write(out / "manifest.json")
    return 0


# --------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    rows = []
    if args.kind == "benchmark":
        rows = run_benchmark(args.n, args.dr, args.repetitions, args.seed)
        columns = list(BENCHMARK_COLUMNS)
    else:
        for n in args.n:
            for dr in args.dr:
                cfg = SimConfig(
                    n=n, D_r=dr, replicates=args.replicates, R=args.permutations, seed=args.seed
                )
                if args.kind == "type1":
                    rows += run_type1(cfg, args.models, threads=args.threads)
                elif args.kind == "power":
                    rows += run_power(cfg, None, args.models, threads=args.threads)
                else:
                    rows += run_discrepancy(cfg, None, args.models, threads=args.threads)
        columns = list(rows[0].keys())
    if args.out:
        out = _outdir(args.out)
        write_table(out / f"{args.kind}.csv", rows, columns)
        _manifest(args, f"simulate {args.kind}").write(out / "manifest.json")
    else:
        write_table(sys.stdout, rows, columns)
    return 0


# -------------------------------------------------------------- bootstrap


def cmd_bootstrap(args) -> int:
    Y, _ = _read(args.response, args.force_closure)
    X, _ = _read(args.predictor, args.force_closure)
    boots = bootstrap_coefficients(Y, X, args.n_boot, args.seed, threads=args.threads)
    doc = {
        "n_boot": args.n_boot,
        "seed": args.seed,
        "predictor_names": list(X.names),
        "response_names": list(Y.names),
        "B": [b.B.tolist() for b in boots],
    }
    if Y.D == 3:
        doc["ellipses"], doc["degenerate_rows"] = [], []
        for j in range(X.D):
            try:
                doc["ellipses"].append(confidence_ellipse(boots, j, args.level).to_dict())
            except DegenerateScatter as exc:
                # Rows pinned to an edge of the simplex have no 2-D region.
                log.warning("row %d: %s", j, exc.detail)
                doc["degenerate_rows"].append(
                    {"row_index": j, "direction": np.round(exc.direction, 12).tolist()}
                )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _manifest(args, "bootstrap", [args.response, args.predictor]).write(
        out.with_name(out.stem + ".manifest.json")
    )
    return 0


# ------------------------------------------------------------------- plot


def cmd_plot(args) -> int:
    from .plotting import entropy_svg, ternary_svg

    if args.kind == "entropy":
        svg = entropy_svg(args.resolution, title=args.title)
    else:
        if args.coefficients is None:
            raise InvalidConfig("--coefficients is required for a ternary plot")
        B, _, cols = _read_matrix_csv(args.coefficients)
        if B.shape[1] != 3:
            raise ShapeMismatch(f"ternary plots need 3 response components, got {B.shape[1]}")
        B = _close_rows(B, "coefficients", tol=0.25)
        ellipses = []
        if args.ellipses:
            doc = json.loads(Path(args.ellipses).read_text())
            ellipses = [ConfidenceEllipse.from_dict(e) for e in doc.get("ellipses", [])]
        svg = ternary_svg(B, cols, ellipses, args.title)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    return 0


# --------------------------------------------------------------- crossval


def cmd_crossval(args) -> int:
    Y, _ = _read(args.response, args.force_closure)
    X, _ = _read(args.predictor, args.force_closure)
    res = cross_validate(
        Y, X, args.folds, args.repeats, args.metric, args.model, args.alpha_grid, args.seed,
        threads=args.threads,
    )
    out = _outdir(args.out)
    write_table(out / "crossval.csv", res.to_rows(), ["alpha", "repeat", res.metric], fmt="%.10g")
    curve = [
        {"alpha": a, "mean": float(v.mean()), "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0}
        for a, v in zip(res.alphas, res.values)
    ]
    write_table(out / "curve.csv", curve, ["alpha", "mean", "sd"], fmt="%.10g")
    _manifest(args, "crossval", [args.response, args.predictor]).write(out / "manifest.json")
    return 0


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simplicial", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, threads=True):
        sp.add_argument("--force-closure", action="store_true",
                        help="close rows that do not sum to 1 instead of rejecting them")
        if threads:
            sp.add_argument("--threads", type=int, default=None,
                            help="worker threads (default: $SCLS_THREADS or 1); never changes results")

    f = sub.add_parser("fit", help="fit SCLS or TFLR")
    f.add_argument("--response", required=True)
    f.add_argument("--predictor", action="append", default=[])
    f.add_argument("--alpha", type=float, default=1.0)
    f.add_argument("--weighted", action="store_true")
    f.add_argument("--model", choices=("scls", "tflr"), default="scls")
    f.add_argument("--max-iter", type=int, default=5000, help="TFLR EM update cap")
    f.add_argument("--lag1", action="store_true", help="AR(1): regress each row on the previous one")
    f.add_argument("--group-column", default=None)
    f.add_argument("--out", default=".")
    common(f)
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", help="predict from a saved fit")
    pr.add_argument("--fit", required=True, help="coefficients.json written by fit")
    pr.add_argument("--predictor", action="append", required=True)
    pr.add_argument("--out", required=True)
    common(pr, threads=False)
    pr.set_defaults(func=cmd_predict)

    t = sub.add_parser("test", help="permutation tests")
    t.add_argument("kind", choices=("independence", "coefficients", "amalgamation"))
    t.add_argument("--response", required=True)
    t.add_argument("--predictor", required=True)
    t.add_argument("--model", choices=("scls", "tflr"), default="scls")
    t.add_argument("--b0", default=None, help="CSV of hypothesised coefficients")
    t.add_argument("--rows", type=_int_list, default=None, help="0-based rows of B fixed by --b0")
    t.add_argument("--l1", type=int, default=None)
    t.add_argument("--l2", type=int, default=None)
    t.add_argument("--permutations", type=int, default=999)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--include-replicates", action="store_true")
    t.add_argument("--out", default=None)
    common(t)
    t.set_defaults(func=cmd_test)

    s = sub.add_parser("simulate", help="Monte-Carlo studies")
    s.add_argument("kind", choices=("type1", "power", "discrepancy", "benchmark"))
    s.add_argument("--n", type=_int_list, default=[100])
    s.add_argument("--dr", type=_int_list, default=[3])
    s.add_argument("--replicates", type=int, default=200)
    s.add_argument("--permutations", type=int, default=199)
    s.add_argument("--repetitions", type=int, default=20, help="benchmark timing repetitions")
    s.add_argument("--models", type=lambda v: v.split(","), default=["scls", "tflr"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    common(s)
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bootstrap", help="bootstrap coefficients and ternary ellipses")
    b.add_argument("--response", required=True)
    b.add_argument("--predictor", required=True)
    b.add_argument("--n-boot", type=int, default=1000)
    b.add_argument("--level", type=float, default=0.95)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    common(b)
    b.set_defaults(func=cmd_bootstrap)

    pl = sub.add_parser("plot", help="SVG plots")
    pl.add_argument("kind", choices=("ternary", "entropy"))
    pl.add_argument("--coefficients", default=None)
    pl.add_argument("--ellipses", default=None, help="JSON written by bootstrap")
    pl.add_argument("--resolution", type=int, default=30)
    pl.add_argument("--title", default=None)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    c = sub.add_parser("crossval", help="repeated K-fold cross-validation")
    c.add_argument("--response", required=True)
    c.add_argument("--predictor", required=True)
    c.add_argument("--folds", type=int, default=10)
    c.add_argument("--repeats", type=int, default=20)
    c.add_argument("--metric", choices=("kld", "jsd"), default="kld")
    c.add_argument("--model", choices=("scls", "tflr"), default="scls")
    c.add_argument("--alpha-grid", type=_float_list, default=None)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=".")
    common(c)
    c.set_defaults(func=cmd_crossval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if hasattr(args, "threads"):
            args.threads = resolve_threads(args.threads)
        return args.func(args)
    except NumericalError as exc:
        print(f"ERROR {exc.code}: {exc.detail}", file=sys.stderr)
        return 3
    except SimplicialError as exc:
        print(f"ERROR {exc.code}: {exc.detail}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"ERROR FileNotFound: {exc.filename}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
