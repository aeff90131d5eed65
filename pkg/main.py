"""
Command-line entry point: simulate, fit, estimate-cov, wcr, diagnose, scenario.

Exit codes: 0 success, 1 usage error, 2 data or numerical failure.
Structured output (CSV or JSON) goes to --out or standard output; logs and
diagnostics go to standard error.
"""
import argparse
import json
import logging
import os
import re
import sys
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from analysis.cov_estimation import fit_covariance
from analysis.diagnostics import serial_diagnostic
from analysis.gee_core import FitConfig, fit_gee, working_variances
from analysis.models import CovMethod, CovParamEstimate, VarianceKind, WorkingCovariance
from analysis.sim_harness import preset_scenarios, run_scenario
from analysis.simulate import ConstantGamma, DesignSpec, GoupParams, LinearGamma, calibrated, simulate_panel
from analysis.subject_level import alpha_irls, alpha_ls
from analysis.wcr import SeparatedBlocks, SingleTrip, Srs, SystematicSeparated, run_wcr
from constants import COV_N_BINS, DEFAULT_THREADS, DESK_SCALE, DIAG_N_BINS, LOG_LEVEL, WCR_BLOCK, WCR_REPS, WCR_SEP
from data.data_models import Panel, PanelError
from data.panel_io import PanelSchema, load_panel, write_panel
from utils import (api_resp, configure_logging, error_resp, to_jsonable, validate_gamma_linear, validate_scale,
                   validate_seed, validate_threads)

__version__ = "0.1.0"

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; this CLI reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class UsageError(Exception):
    """Invalid option values; exit code 1 like argparse errors."""


class CliFailure(Exception):
    """A failure reported as a JSON envelope and exit code 2."""

    def __init__(self, message: str, error_type: str = "data_error"):
        super().__init__(message)
        self.error_type = error_type


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _names(text: Optional[str]) -> Optional[list[str]]:
    if text is None:
        return None
    return [v.strip() for v in text.split(",") if v.strip()]


def _open_out(path: Optional[str]):
    return sys.stdout if path in (None, "-") else open(path, "w", newline="")


def _write_json(payload: api_resp, out: Optional[str]) -> None:
    text = json.dumps(to_jsonable(payload), indent=2)
    stream = _open_out(out)
    try:
        stream.write(text + "\n")
    finally:
        if stream is not sys.stdout:
            stream.close()


def _write_frame(frame: pd.DataFrame, out: Optional[str]) -> None:
    stream = _open_out(out)
    try:
        frame.to_csv(stream, index=False, float_format="%.10g")
    finally:
        if stream is not sys.stdout:
            stream.close()


def _require(check) -> None:
    is_valid, error = check
    if not is_valid:
        raise UsageError(error)


def _options(model, **values):
    """Build a pydantic model from option values; invalid values are usage errors."""
    try:
        return model(**values)
    except ValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or model.__name__
        raise UsageError(f"invalid value for {field}: {first['msg']}") from exc


def _load(args) -> Panel:
    """Load --panel; without --z-cols/--x-cols, columns named z<d>/x<d> are used."""
    z_cols, x_cols = _names(args.z_cols), _names(args.x_cols)
    if (z_cols is None or x_cols is None) and os.path.exists(args.panel):
        header = list(pd.read_csv(args.panel, nrows=0).columns)
        if z_cols is None:
            z_cols = [c for c in header if re.fullmatch(r"z\d+", c)]
        if x_cols is None:
            x_cols = [c for c in header if re.fullmatch(r"x\d+", c)]
    return load_panel(args.panel, PanelSchema(z_cols=z_cols or [], x_cols=x_cols or []))


def _cov_params(args, panel: Panel) -> Optional[CovParamEstimate]:
    if args.cov_params is None:
        return None
    if args.cov_params == "auto":
        if args.cov_method:
            method = CovMethod(args.cov_method)
        else:
            method = CovMethod.FSE_LS if args.fse else CovMethod.NO_FSE
        estimate = fit_covariance(panel, method)
        if estimate.na_flag:
            raise CliFailure(f"covariance estimation failed: {estimate.na_reason}", "na_estimate")
        return estimate
    with open(args.cov_params) as fh:
        payload = json.load(fh)
    if "data" in payload and isinstance(payload["data"], dict):
        payload = payload["data"]
    return CovParamEstimate.model_validate(payload.get("cov_params", payload))


def _fit_config(args, cov: Optional[CovParamEstimate]) -> FitConfig:
    working = WorkingCovariance(args.working)
    if working == WorkingCovariance.SUPPLIED and cov is None:
        raise UsageError("--working goup needs --cov-params FILE or --cov-params auto")
    return FitConfig(
        use_fse=args.fse, working_cov=working, cov_params=cov if working == WorkingCovariance.SUPPLIED else None,
        variance_kind=VarianceKind(args.variance), one_step=getattr(args, "one_step", False),
    )


def cmd_simulate(args) -> int:
    _require(validate_seed(args.seed))
    if args.gamma_linear:
        _require(validate_gamma_linear(args.gamma_linear))
        g0, g1 = _floats(args.gamma_linear)
        gamma = _options(LinearGamma, gamma0=g0, gamma1=g1)
    else:
        gamma = _options(ConstantGamma, gamma=args.gamma)
    alpha = _floats(args.alpha)
    params = _options(
        GoupParams, nu_star=args.nu_star or 0.0, alpha=alpha, beta=(args.beta,),
        sigma2_b=args.sigma_b, sigma2_c=args.sigma_c, sigma2_e=args.sigma_e, gamma=gamma,
    )
    design = _options(
        DesignSpec, n_subjects=args.n, trips_per_subject=args.k, z_prob=(0.5,) * len(alpha),
        target_mean_count=args.target_mean,
    )
    if args.nu_star is None:
        params = calibrated(params, design)
        logger.info(f"calibrated nu_star={params.nu_star:.6f} for mean count {args.target_mean}")
    panel = simulate_panel(params, design, np.random.default_rng(args.seed))
    write_panel(panel, args.out or "-")
    return EXIT_OK


def cmd_fit(args) -> int:
    if args.alpha and not args.fse:
        raise UsageError("--alpha needs --fse")
    panel = _load(args)
    cov = _cov_params(args, panel)
    fit = fit_gee(panel, _fit_config(args, cov))
    if fit.na_flag:
        raise CliFailure(f"GEE fit not available: {fit.na_reason}", "na_fit")

    data = {"fit": fit.to_report(), "cov_params": cov}
    if args.alpha:
        z = panel.select(fit.subject_ids).z_matrix
        if args.alpha == "ls":
            result = alpha_ls(fit.nu_hat, z)
        else:
            result = alpha_irls(fit.nu_hat, z, fit.cov_nu_given_nu)
        data["alpha"] = result.to_report()
    _write_json(api_resp(success=True, message="GEE fit complete", data=data), args.out)
    return EXIT_OK


def cmd_estimate_cov(args) -> int:
    panel = _load(args)
    estimate = fit_covariance(panel, CovMethod(args.method), args.bins)
    if estimate.na_flag:
        raise CliFailure(f"covariance estimation failed: {estimate.na_reason}", "na_estimate")
    message = "covariance parameters estimated" if estimate.converged else "nonlinear fit did not converge; initial values returned"
    _write_json(api_resp(success=True, message=message, data=estimate), args.out)
    return EXIT_OK


def cmd_wcr(args) -> int:
    _require(validate_seed(args.seed))
    _require(validate_threads(args.threads))
    schemes = {
        "single": lambda: SingleTrip(),
        "srs": lambda: _options(Srs, R=args.R),
        "systematic": lambda: _options(SystematicSeparated, S=args.sep),
        "sb": lambda: _options(SeparatedBlocks, B=args.block, S=args.sep),
    }
    scheme = schemes[args.scheme]()
    panel = _load(args)
    cov = _cov_params(args, panel)
    result = run_wcr(panel, scheme, args.reps, _fit_config(args, cov), seed=args.seed, threads=args.threads)
    if result.na_flag:
        raise CliFailure(f"WCR not available: {result.na_reason}", "na_fit")
    _write_json(api_resp(success=True, message="WCR estimate complete", data=result.to_report()), args.out)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    panel = _load(args)
    cov = _cov_params(args, panel)
    fit = fit_gee(panel, FitConfig(use_fse=args.fse))
    if fit.na_flag:
        raise CliFailure(f"working-independence fit not available: {fit.na_reason}", "na_fit")
    retained = panel.select(fit.subject_ids)
    binned = serial_diagnostic(retained, fit.fitted, working_variances(retained, fit, cov), args.bins)
    _write_frame(binned.to_frame(), args.out)
    return EXIT_OK


def cmd_scenario(args) -> int:
    _require(validate_scale(args.scale))
    presets = preset_scenarios(args.scale)
    if args.list:
        stream = _open_out(args.out)
        try:
            stream.write("\n".join(presets) + "\n")
        finally:
            if stream is not sys.stdout:
                stream.close()
        return EXIT_OK
    if args.preset is None:
        raise UsageError("--preset is required unless --list is given")
    if args.preset not in presets:
        raise UsageError(f"unknown preset '{args.preset}'; see scenario --list")
    _require(validate_seed(args.seed))
    _require(validate_threads(args.threads))
    scenario = presets[args.preset].model_copy(update={"seed": args.seed})
    summary = run_scenario(scenario, threads=args.threads)
    _write_frame(summary.to_frame(), args.out)
    return EXIT_OK


def _panel_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--panel", required=True, help="panel CSV (subject,time,offset,count[,trip_index,block],...)")
    p.add_argument("--z-cols", help="comma-separated subject covariate columns (default: columns z1, z2, ...)")
    p.add_argument("--x-cols", help="comma-separated trip covariate columns (default: columns x1, x2, ...)")
    p.add_argument("--out", default="-", help="output path, '-' for standard output")


def _model_args(p: argparse.ArgumentParser, variance_default: str = "both") -> None:
    p.add_argument("--fse", action="store_true", help="fixed subject effects")
    p.add_argument("--working", choices=[w.value for w in WorkingCovariance], default="independence")
    p.add_argument("--cov-params", help="CovParamEstimate JSON file, or 'auto' to estimate from the panel")
    p.add_argument("--cov-method", choices=[m.value for m in CovMethod], help="method used with --cov-params auto")
    p.add_argument("--variance", choices=[v.value for v in VarianceKind], default=variance_default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="goup-gee", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a GOUP panel")
    p.add_argument("--n", type=int, default=40, help="number of subjects")
    p.add_argument("--k", type=int, default=1500, help="trips per subject")
    p.add_argument("--sigma-b", type=float, default=1.0, help="variance of the subject effect")
    p.add_argument("--sigma-c", type=float, default=1.0, help="variance of the serial process")
    p.add_argument("--sigma-e", type=float, default=1.0, help="variance of the overdispersion term")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--gamma", type=float, default=300.0, help="constant decay rate")
    g.add_argument("--gamma-linear", help="decay rate linear in time, given as g0,g1")
    p.add_argument("--alpha", default="0", help="comma-separated subject-level coefficients")
    p.add_argument("--beta", type=float, default=0.0, help="coefficient of trip time")
    p.add_argument("--nu-star", type=float, help="intercept (default: calibrated to --target-mean)")
    p.add_argument("--target-mean", type=float, default=1.0, help="marginal mean count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("fit", help="fit a marginal Poisson GEE")
    _panel_args(p)
    _model_args(p)
    p.add_argument("--one-step", action="store_true", help="single scoring step from the working-independence fit")
    p.add_argument("--alpha", choices=["ls", "irls"], help="second-stage regression of FSE on Z")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("estimate-cov", help="estimate covariance parameters from residuals")
    _panel_args(p)
    p.add_argument("--method", choices=[m.value for m in CovMethod], default=CovMethod.FSE_LS.value)
    p.add_argument("--bins", type=int, default=COV_N_BINS)
    p.set_defaults(handler=cmd_estimate_cov)

    p = sub.add_parser("wcr", help="within-cluster resampling estimate")
    _panel_args(p)
    _model_args(p, variance_default="robust")
    p.add_argument("--scheme", choices=["single", "srs", "systematic", "sb"], default="sb")
    p.add_argument("--R", type=int, default=100, help="trips per subject for srs")
    p.add_argument("--block", type=int, default=WCR_BLOCK)
    p.add_argument("--sep", type=int, default=WCR_SEP)
    p.add_argument("--reps", type=int, default=WCR_REPS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=DEFAULT_THREADS)
    p.set_defaults(handler=cmd_wcr)

    p = sub.add_parser("diagnose", help="binned serial-correlation diagnostic")
    _panel_args(p)
    p.add_argument("--fse", action="store_true")
    p.add_argument("--cov-params", help="standardize with the working variance of this CovParamEstimate (or 'auto')")
    p.add_argument("--cov-method", choices=[m.value for m in CovMethod])
    p.add_argument("--bins", type=int, default=DIAG_N_BINS)
    p.set_defaults(handler=cmd_diagnose)

    p = sub.add_parser("scenario", help="run a simulation preset")
    p.add_argument("--preset")
    p.add_argument("--list", action="store_true", help="print preset names")
    p.add_argument("--scale", type=float, default=DESK_SCALE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=DEFAULT_THREADS)
    p.add_argument("--out", default="-")
    p.set_defaults(handler=cmd_scenario)

    for choice in sub.choices.values():
        choice.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    configure_logging("DEBUG" if args.verbose else LOG_LEVEL)

    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"goup-gee: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CliFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.command != "diagnose" and args.command != "scenario":
            _write_json(api_resp(success=False, message=str(exc), error=error_resp(code=EXIT_DATA, details=str(exc)),
                                 error_type=exc.error_type), args.out)
        return EXIT_DATA
    except (PanelError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
