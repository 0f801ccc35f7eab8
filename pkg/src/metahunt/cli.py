"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 data error.  Data goes to ``--out``
or, when that is absent, to stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

import numpy as np

from . import simulation as sim
from .basis_hunting import EmptyAfterDenoisingError, geometry_diagnostics
from .conformal import (
    Functional, cross_conformal, evaluate_coverage, split_conformal, weighted_conformal,
)
from .formats import (
    FormatError, StudyBundle, bundle_from_simulation, read_csv, read_pipeline, rows_to_csv,
    write_pipeline, dumps, pipeline_to_dict,
)
from .function_space import l2_norm
from .pipeline import PipelineConfig, fit_pipeline
from .weight_estimation import cv_select_k, elbow_curve
from .weight_model import FitError

log = logging.getLogger("metahunt")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _emit(text: str, out):
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _parse_floats(s: str, what: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in s.split(",") if v.strip()], dtype=float)
    except ValueError:
        raise UsageError(f"{what} must be comma-separated numbers, got {s!r}")


def _parse_ints(s: str, what: str) -> list:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers, got {s!r}")


def _read_bundle(path) -> StudyBundle:
    try:
        return StudyBundle.read(path)
    except FileNotFoundError as exc:
        raise DataError(str(exc))
    except FormatError as exc:
        raise DataError(str(exc))


def _pipeline_config(args, k=None) -> PipelineConfig:
    return PipelineConfig(
        k=int(k if k is not None else getattr(args, "k", 4) or 4),
        denoise=not getattr(args, "no_denoise", False),
        N=getattr(args, "n_param", None),
        delta=getattr(args, "delta", None),
        weight_model=getattr(args, "weight_model", "dirichlet"),
        feature_kind="polynomial" if getattr(args, "degree", 1) > 1 else "identity",
        feature_degree=getattr(args, "degree", 1),
        ridge_lambda=getattr(args, "ridge", 0.0),
    )


def _check_w0(w0, W):
    if w0.shape[0] != W.shape[1]:
        raise UsageError(f"--w0 has {w0.shape[0]} values, studies have {W.shape[1]} covariates")


# ------------------------------------------------------------ subcommands

def cmd_simulate(args):
    if args.paper_defaults:
        cfg = sim.paper_defaults(seed=args.seed)
    else:
        cfg = sim.GenerativeConfig(m=args.m if args.m is not None else 100,
                                   n_per_study=args.n if args.n is not None else 200,
                                   seed=args.seed)
    if args.m is not None and args.paper_defaults:
        cfg = replace(cfg, m=args.m)
    if args.n is not None and args.paper_defaults:
        cfg = replace(cfg, n_per_study=args.n)
    if cfg.m < 1 or cfg.n_per_study < 10:
        raise UsageError("need --m >= 1 and --n >= 10")
    if args.grid_size < 2:
        raise UsageError("--grid-size must be >= 2")
    data = sim.generate(cfg, args.grid_size)
    bundle = bundle_from_simulation(data, {"grid_size": args.grid_size})
    _emit(bundle.dumps(), args.out)


def _select(args, W, F, grid, cfg):
    kmax = args.k_max
    if args.select_k == "elbow":
        rep = elbow_curve(F, grid, kmax, cfg.denoise_params(F, grid) if cfg.denoise else None)
    else:
        cands = _parse_ints(args.k_candidates, "--k-candidates") if args.k_candidates \
            else list(range(1, kmax + 1))
        rep = cv_select_k((W, F), grid, cands, args.folds, cfg, seed=args.seed)
    return rep


def cmd_hunt(args):
    bundle = _read_bundle(args.inp)
    W, F = bundle.arrays()
    m = F.shape[0]
    if args.k is None and args.select_k is None:
        raise UsageError("give --k or --select-k")
    extra = {}
    cfg = _pipeline_config(args, k=args.k or 1)
    if args.k is not None:
        if args.k < 1 or args.k > m:
            raise UsageError(f"--k {args.k} is outside 1..{m} (number of studies)")
        k = args.k
    else:
        if args.k_max > m:
            raise UsageError(f"--k-max {args.k_max} exceeds the {m} studies")
        rep = _select(args, W, F, bundle.grid, cfg)
        k = rep.chosen_k
        extra["k_selection"] = {"method": rep.method, "chosen_k": k, "rows": rep.rows()}
    cfg = replace(cfg, k=k)
    pipe = fit_pipeline(W, F, bundle.grid, cfg)
    extra["chosen_k"] = k
    wp = pipe.weight_params
    if wp.kind == "dirichlet":
        extra["weight_fit"] = {"converged": wp.converged, "n_iter": wp.n_iter}
    truth = _true_basis(bundle)
    if truth is not None and truth.shape[0] == k:
        diag = geometry_diagnostics(F, truth, bundle.grid)
        extra["diagnostics"] = diag.__dict__
    if args.out:
        write_pipeline(pipe, args.out, extra)
    else:
        sys.stdout.write(dumps(pipeline_to_dict(pipe, extra)))


def _true_basis(bundle):
    cfg = bundle.meta.get("config")
    if not cfg or "bases" not in cfg:
        return None
    return sim.paper_basis(bundle.grid.x)


def cmd_select_k(args):
    bundle = _read_bundle(args.inp)
    W, F = bundle.arrays()
    if args.k_max > F.shape[0]:
        raise UsageError(f"--k-max {args.k_max} exceeds the {F.shape[0]} studies")
    args.select_k = args.method
    rep = _select(args, W, F, bundle.grid, _pipeline_config(args, k=1))
    log.info("chosen K = %d (%s)", rep.chosen_k, rep.method)
    _emit(rows_to_csv(rep.rows(), ["k", "recon_error", "cv_error"]), args.out)


def _load_artifact(path):
    try:
        return read_pipeline(path)
    except FileNotFoundError as exc:
        raise DataError(str(exc))
    except FormatError as exc:
        raise DataError(str(exc))


def cmd_predict(args):
    pipe, _ = _load_artifact(args.artifact)
    w0 = _parse_floats(args.w0, "--w0")
    dim = pipe.weight_params.feature_map.mean.shape[0]
    if w0.shape[0] != dim:
        raise UsageError(f"--w0 has {w0.shape[0]} values, the artifact expects {dim}")
    values = pipe.predict_values(w0[None, :])[0]
    rows = [{"x": x, "f_tilde": v} for x, v in zip(pipe.grid.points[:, 0], values)]
    _emit(rows_to_csv(rows, ["x", "f_tilde"]), args.out)


def cmd_conformal(args):
    bundle = _read_bundle(args.inp)
    W, F = bundle.arrays()
    w0 = _parse_floats(args.w0, "--w0")
    _check_w0(w0, W)
    grid = bundle.grid
    if args.functional == "ate":
        fn = Functional.mean(grid)
    elif args.x:
        fn = Functional.point_eval(grid, _parse_floats(args.x, "--x"))
    else:
        fn = Functional.pointwise(grid)
    cfg = _pipeline_config(args)
    if cfg.k > F.shape[0]:
        raise UsageError(f"--k {cfg.k} exceeds the {F.shape[0]} studies")
    studies = (W, F)
    if args.method == "split":
        iv = split_conformal(studies, w0, fn, args.alpha, args.split_fraction, args.seed, cfg, grid)
    elif args.method == "cross":
        iv = cross_conformal(studies, w0, fn, args.alpha, args.folds, args.seed, cfg, grid)
    else:
        iv = weighted_conformal(studies, w0, fn, args.alpha, args.bandwidth_multiplier,
                                args.split_fraction, args.seed, cfg, grid)
        if iv.flags.get("unweighted_fallback"):
            log.warning("all study covariates coincide; used unweighted quantile")
    key = "functional" if args.functional == "ate" else "x"
    rows = [{key: r["x"], **{k: r[k] for k in ("center", "lo", "hi", "method", "alpha")}}
            for r in iv.rows()]
    _emit(rows_to_csv(rows, [key, "center", "lo", "hi", "method", "alpha"]), args.out)


def cmd_evaluate(args):
    bundle = _read_bundle(args.inp)
    grid = bundle.grid
    if args.intervals:
        rows = read_csv(args.intervals)
        st = [s for s in bundle.studies if s.id == args.study]
        if not st:
            raise UsageError(f"no study with id {args.study!r} in the bundle")
        s = st[0]
        target = (s.f_true or s.f_hat).values
        if not rows or "x" not in rows[0]:
            raise DataError("interval table needs an 'x' column")
        xs = np.array([float(r["x"]) for r in rows])
        idx = np.abs(grid.x[None, :] - xs[:, None]).argmin(axis=1)
        lo = np.array([float(r["lo"]) for r in rows])
        hi = np.array([float(r["hi"]) for r in rows])
        rep = evaluate_coverage(target[idx], lo, hi)
        out = [{"study": s.id, "coverage": rep["coverage"], "mean_length": rep["mean_length"],
                "n": rep["n"]}]
        _emit(rows_to_csv(out), args.out)
        return
    if not args.artifact:
        raise UsageError("give --artifact or --intervals")
    pipe, _ = _load_artifact(args.artifact)
    W, F = bundle.arrays()
    pred = pipe.predict_values(W)
    out = []
    for j, s in enumerate(bundle.studies):
        r = {"study": s.id, "err_f_hat": float(l2_norm(pred[j] - F[j], grid))}
        r["err_f_true"] = float(l2_norm(pred[j] - s.f_true.values, grid)) if s.f_true else None
        out.append(r)
    _emit(rows_to_csv(out, ["study", "err_f_hat", "err_f_true"]), args.out)


def _runs(args):
    return 200 if args.full else args.runs


def cmd_mse_experiment(args):
    cfg = sim.paper_defaults()
    rows = sim.run_mse_experiment(cfg, _parse_ints(args.m_values, "--m-values"),
                                  _parse_ints(args.k_values, "--k-values"), _runs(args),
                                  args.targets, args.grid_size, args.seed,
                                  delta_schedule=args.delta_schedule)
    _emit(rows_to_csv(rows, ["m", "k", "mse", "se", "runs"]), args.out)


def cmd_coverage_experiment(args):
    cfg = sim.paper_defaults()
    rep = sim.run_coverage_experiment(cfg, args.alpha, _runs(args), args.targets, args.grid_size,
                                      seed=args.seed, oracle=args.oracle)
    rows = [{"x_lo": b["x_lo"], "x_hi": b["x_hi"], "x_mid": b["x_mid"], "coverage": b["coverage"],
             "mean_length": b["mean_length"], "n": b["n"]} for b in rep["bins"]]
    rows.append({"x_lo": "all", "x_hi": "all", "x_mid": "", "coverage": rep["coverage"],
                 "mean_length": rep["mean_length"], "n": rep["n"]})
    log.info("overall coverage %.4f over %d runs", rep["coverage"], len(rep["per_run"]))
    _emit(rows_to_csv(rows, ["x_lo", "x_hi", "x_mid", "coverage", "mean_length", "n"]), args.out)


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_pipeline_flags(p):
    p.add_argument("--k", type=int, default=None, help="number of basis functions")
    p.add_argument("--n-param", type=int, default=None, help="denoising count N")
    p.add_argument("--delta", type=float, default=None, help="denoising radius")
    p.add_argument("--no-denoise", action="store_true", help="plain fSPA")
    p.add_argument("--weight-model", choices=["dirichlet", "logratio"], default="dirichlet")
    p.add_argument("--degree", type=int, default=1, help="polynomial feature degree")
    p.add_argument("--ridge", type=float, default=0.0, help="log-ratio ridge penalty")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metahunt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a study bundle")
    s.add_argument("--m", type=int, default=None)
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid-size", type=int, default=1000)
    s.add_argument("--paper-defaults", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    h = sub.add_parser("hunt", help="recover bases and fit the weight model")
    h.add_argument("--in", dest="inp", required=True)
    _add_pipeline_flags(h)
    h.add_argument("--select-k", choices=["elbow", "cv"], default=None)
    h.add_argument("--k-max", type=int, default=8)
    h.add_argument("--k-candidates", default=None)
    h.add_argument("--folds", type=int, default=5)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--out")
    h.set_defaults(func=cmd_hunt)

    k = sub.add_parser("select-k", help="reconstruction / CV error per K")
    k.add_argument("--in", dest="inp", required=True)
    k.add_argument("--method", choices=["elbow", "cv"], default="elbow")
    k.add_argument("--k-max", type=int, default=8)
    k.add_argument("--k-candidates", default=None)
    k.add_argument("--folds", type=int, default=5)
    k.add_argument("--seed", type=int, default=0)
    _add_pipeline_flags(k)
    k.add_argument("--out")
    k.set_defaults(func=cmd_select_k)

    pr = sub.add_parser("predict", help="predict the target function")
    pr.add_argument("--artifact", required=True)
    pr.add_argument("--w0", required=True, help="comma-separated target covariates")
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)

    c = sub.add_parser("conformal", help="conformal prediction intervals")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--w0", required=True)
    c.add_argument("--alpha", type=float, default=0.05)
    c.add_argument("--method", choices=["split", "cross", "weighted"], default="split")
    c.add_argument("--x", default=None, help="comma-separated x values (default: whole grid)")
    c.add_argument("--x-grid", action="store_true", help="intervals at every grid point")
    c.add_argument("--functional", choices=["point", "ate"], default="point")
    c.add_argument("--split-fraction", type=float, default=0.7)
    c.add_argument("--folds", type=int, default=5)
    c.add_argument("--bandwidth-multiplier", type=float, default=3.0)
    c.add_argument("--seed", type=int, default=0)
    _add_pipeline_flags(c)
    c.add_argument("--out")
    c.set_defaults(func=cmd_conformal)

    e = sub.add_parser("evaluate", help="prediction errors or interval coverage")
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--artifact")
    e.add_argument("--intervals")
    e.add_argument("--study")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    ms = sub.add_parser("mse-experiment", help="target MSE versus m and K")
    ms.add_argument("--m-values", default="50,100,200,400")
    ms.add_argument("--k-values", default="2,4,6,8")
    ms.add_argument("--runs", type=int, default=50)
    ms.add_argument("--full", action="store_true", help="200 runs")
    ms.add_argument("--targets", type=int, default=100)
    ms.add_argument("--grid-size", type=int, default=1000)
    ms.add_argument("--delta-schedule", action="store_true")
    ms.add_argument("--seed", type=int, default=0)
    ms.add_argument("--out")
    ms.set_defaults(func=cmd_mse_experiment)

    cv = sub.add_parser("coverage-experiment", help="split-conformal coverage versus x")
    cv.add_argument("--alpha", type=float, default=0.05)
    cv.add_argument("--runs", type=int, default=50)
    cv.add_argument("--full", action="store_true", help="200 runs")
    cv.add_argument("--targets", type=int, default=100)
    cv.add_argument("--grid-size", type=int, default=1000)
    cv.add_argument("--oracle", action="store_true", help="feed true study functions")
    cv.add_argument("--seed", type=int, default=0)
    cv.add_argument("--out")
    cv.set_defaults(func=cmd_coverage_experiment)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr,
                        format="metahunt: %(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.INFO)
        args.func(args)
    except UsageError as exc:
        print(f"metahunt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EmptyAfterDenoisingError as exc:
        print(f"metahunt: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FitError, FormatError) as exc:
        print(f"metahunt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"metahunt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"metahunt: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
