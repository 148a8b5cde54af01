"""Command-line front end: fit, bands, test, simulate, residuals.

Every command writes its outputs plus a manifest (config snapshot, input
digest, seed, library versions, output list, wall time) so a run can be
replayed exactly. Exit codes: 0 success, 2 usage or validation problem,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np
import scipy

from . import __version__
from .data import AnalysisConfig, DataError, load_dataset, validate
from .diagnostics import residual_sum_check, residual_surface, wald_marginal
from .estimator import (
    EstimationError,
    baseline_surface,
    fit_profile,
)
from .inference import (
    MIN_RESAMPLES,
    InferenceError,
    cumulative_curves,
    cv_pointwise_band,
    cv_simultaneous_band_bridge,
    multiplier_band,
    test_h10,
    test_h20,
    variance_bundle,
    ve_pointwise_band,
)
from .simulate import (
    MCConfig,
    SimModelSpec,
    SimulationError,
    run_study,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


@dataclass
class RunManifest:
    """Everything needed to replay a command run byte-for-byte."""

    command: str
    config: dict
    input_digest: str
    seed: object
    versions: dict
    outputs: list
    wall_time_s: float

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(asdict(self), handle, indent=2, default=repr)
            handle.write("\n")


def _versions() -> dict:
    return {
        "markhaz": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": sys.version.split()[0],
    }


def _digest(path) -> str:
    if path is None or not os.path.exists(path):
        return ""
    sha = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            sha.update(block)
    return sha.hexdigest()


def _parse_grid(text):
    if "," in text:
        return tuple(float(x) for x in text.split(","))
    return int(text)


def _default_threads() -> int:
    env = os.environ.get("MARKHAZ_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _analysis_config(args) -> AnalysisConfig:
    return AnalysisConfig(
        bandwidth=args.bandwidth,
        interval=tuple(args.interval),
        grid=args.grid,
        kernel=args.kernel,
        alpha=args.alpha,
        resamples=args.resamples,
        seed=getattr(args, "seed", None),
        a1=getattr(args, "a1", None),
    )


def _fit_with_report(args):
    dataset = load_dataset(args.data)
    config = _analysis_config(args)
    report = validate(dataset, config)
    for flag in report.flags:
        print(f"note: {flag}", file=sys.stderr)
    profile = fit_profile(dataset, config)
    return dataset, config, profile


def _require_full_convergence(profile):
    mask = profile.converged_mask
    if not mask.all():
        bad = ", ".join(f"{v:g}" for v in profile.grid[~mask])
        raise EstimationError(f"estimation failed at grid points: {bad}")


def _finish(args, command, config_dict, outputs, started, seed=None):
    manifest_path = os.path.join(args.out_dir, "manifest.json")
    RunManifest(
        command=command,
        config=config_dict,
        input_digest=_digest(getattr(args, "data", None)),
        seed=seed,
        versions=_versions(),
        outputs=[os.path.basename(p) for p in outputs] + ["manifest.json"],
        wall_time_s=time.time() - started,
    ).write(manifest_path)
    return EXIT_OK


def _config_snapshot(args, skip=("func", "config")):
    return {k: repr(v) for k, v in sorted(vars(args).items()) if k not in skip}


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #


def cmd_fit(args) -> int:
    started = time.time()
    dataset, config, profile = _fit_with_report(args)
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []

    profile_path = os.path.join(args.out_dir, "profile.csv")
    bundle = None
    try:
        bundle = variance_bundle(profile)
    except InferenceError:
        pass
    with open(profile_path, "w", encoding="utf-8") as handle:
        p = profile.p
        cols = (
            ["v"]
            + [f"beta_{j+1}" for j in range(p)]
            + [f"se_{j+1}" for j in range(p)]
            + ["converged", "iterations"]
        )
        handle.write(",".join(cols) + "\n")
        nh = dataset.n * config.bandwidth
        for i, fit in enumerate(profile.fits):
            if bundle is not None and bundle.ok[i]:
                se = np.sqrt(np.diag(bundle.sandwich[i]) / nh)
            else:
                se = np.full(p, np.nan)
            row = (
                [repr(float(fit.v))]
                + [repr(float(x)) for x in fit.beta_hat]
                + [repr(float(x)) for x in se]
                + [str(int(fit.converged)), str(fit.iterations)]
            )
            handle.write(",".join(row) + "\n")
    outputs.append(profile_path)

    baseline_path = os.path.join(args.out_dir, "baseline.csv")
    surface = baseline_surface(dataset, profile)
    with open(baseline_path, "w", encoding="utf-8") as handle:
        handle.write("time,mark,increment\n")
        for row in zip(surface.times, surface.marks, surface.increments):
            handle.write(",".join(repr(float(x)) for x in row) + "\n")
    outputs.append(baseline_path)

    code = _finish(args, "fit", _config_snapshot(args), outputs, started)
    _require_full_convergence(profile)
    return code


def cmd_bands(args) -> int:
    started = time.time()
    if args.resamples < MIN_RESAMPLES:
        raise DataError(
            f"--resamples must be at least {MIN_RESAMPLES} for simultaneous bands"
        )
    dataset, config, profile = _fit_with_report(args)
    _require_full_convergence(profile)
    bundle = variance_bundle(profile)
    curves = cumulative_curves(profile, bundle, dataset)
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []
    for name, band in (
        ("ve_pointwise.csv", ve_pointwise_band(profile, bundle, config.alpha)),
        ("cv_pointwise.csv", cv_pointwise_band(curves, config.alpha)),
    ):
        path = os.path.join(args.out_dir, name)
        with open(path, "w", encoding="utf-8") as handle:
            band.to_csv(handle)
        outputs.append(path)
    if args.method == "multiplier":
        band = multiplier_band(
            dataset, profile, curves, config.alpha, config.resamples, config.seed
        )
    else:
        band = cv_simultaneous_band_bridge(
            curves, config.alpha, config.resamples, config.seed
        )
    path = os.path.join(args.out_dir, "cv_simultaneous.csv")
    with open(path, "w", encoding="utf-8") as handle:
        band.to_csv(handle)
    outputs.append(path)
    return _finish(args, "bands", _config_snapshot(args), outputs, started, args.seed)


def cmd_test(args) -> int:
    started = time.time()
    if args.resamples < MIN_RESAMPLES:
        raise DataError(f"--resamples must be at least {MIN_RESAMPLES}")
    grid = np.asarray(args.test_grid, dtype=float) if args.test_grid else None
    if grid is not None and grid.size < 2:
        raise DataError("the test grid needs at least two points")
    dataset, config, profile = _fit_with_report(args)
    _require_full_convergence(profile)
    bundle = variance_bundle(profile)
    curves = cumulative_curves(profile, bundle, dataset)
    seeds = np.random.SeedSequence(int(args.seed)).spawn(2)
    payload = {}
    if args.family in ("h10", "both"):
        payload["h10"] = test_h10(
            curves, config.alpha, config.resamples, seeds[0], grid=grid
        ).to_dict()
    if args.family in ("h20", "both"):
        payload["h20"] = test_h20(
            curves, config.a1, config.alpha, config.resamples, seeds[1], grid=grid
        ).to_dict()
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "tests.json")
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")
    return _finish(args, "test", _config_snapshot(args), [path], started, args.seed)


def cmd_simulate(args) -> int:
    started = time.time()
    if args.resamples < MIN_RESAMPLES:
        raise DataError(f"--resamples must be at least {MIN_RESAMPLES}")
    if args.params is not None:
        a, b, g = args.params
        model = SimModelSpec(
            kind="mark13", alpha=a, beta=b, gamma=g,
            censoring_target=args.censoring, label="custom",
        )
    elif args.model is not None:
        model = SimModelSpec.from_name(args.model, censoring_target=args.censoring)
    else:
        raise DataError("provide --model or --params")
    config = AnalysisConfig(
        bandwidth=args.bandwidth,
        interval=tuple(args.interval),
        grid=args.grid,
        kernel=args.kernel,
        alpha=args.alpha,
        resamples=args.resamples,
        seed=args.seed,
        a1=args.a1,
    )
    mc = MCConfig(
        model=model,
        n=args.n,
        replications=args.reps,
        analysis=config,
        do_wald=(model.kind == "crossing") or args.wald,
        pointwise_marks=tuple(args.pointwise or ()),
        n_jobs=args.threads,
    )
    report = run_study(mc)
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []
    path = os.path.join(args.out_dir, "mc_report.json")
    with open(path, "w", encoding="utf-8") as handle:
        report.to_json(handle)
    outputs.append(path)
    path = os.path.join(args.out_dir, "mc_table.csv")
    with open(path, "w", encoding="utf-8") as handle:
        report.to_table_csv(handle)
    outputs.append(path)
    return _finish(args, "simulate", _config_snapshot(args), outputs, started, args.seed)


def cmd_residuals(args) -> int:
    started = time.time()
    dataset, config, profile = _fit_with_report(args)
    _require_full_convergence(profile)
    surface = baseline_surface(dataset, profile)
    res = residual_surface(dataset, profile, surface)
    values = res.evaluate(dataset.tau, config.b)
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []
    path = os.path.join(args.out_dir, "residuals.csv")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("subject,residual\n")
        for i, r in enumerate(values):
            handle.write(f"{i},{repr(float(r))}\n")
    outputs.append(path)
    check = residual_sum_check(dataset, profile, surface, tolerance=args.tolerance)
    wald = wald_marginal(dataset)
    path = os.path.join(args.out_dir, "residual_check.json")
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(
            {
                "sup_value": check.sup_value,
                "at_time": check.at_time,
                "at_mark": check.at_mark,
                "tolerance": check.tolerance,
                "passed": check.passed,
                "wald_z": wald.z,
                "wald_p_two_sided": wald.p_two_sided,
                "wald_p_one_sided": wald.p_one_sided,
            },
            handle,
            indent=2,
        )
        handle.write("\n")
    outputs.append(path)
    return _finish(args, "residuals", _config_snapshot(args), outputs, started)


# --------------------------------------------------------------------------- #
# parser
# --------------------------------------------------------------------------- #


def _add_fit_arguments(sp, seed_required=False):
    sp.add_argument("--data", required=True, help="input CSV (time,status,mark,z1..zp)")
    sp.add_argument("--bandwidth", type=float, required=True, help="kernel bandwidth h")
    sp.add_argument(
        "--interval", type=float, nargs=2, default=(0.1, 0.9), metavar=("A", "B"),
        help="mark interval [a, b] for inference (default 0.1 0.9)",
    )
    sp.add_argument(
        "--grid", type=_parse_grid, default=33,
        help="fit grid: point count or comma-separated marks (default 33)",
    )
    sp.add_argument("--kernel", default="epanechnikov",
                    choices=("epanechnikov", "uniform", "biweight"))
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--resamples", type=int, default=10_000)
    sp.add_argument("--seed", type=int, required=seed_required,
                    help="resampling seed" + (" (required)" if seed_required else ""))
    sp.add_argument("--a1", type=float, default=None,
                    help="left endpoint of the constant-efficacy test range")
    sp.add_argument("--out-dir", default=".", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="markhaz",
        description="Mark-specific proportional hazards: fitting, bands, tests, simulation",
    )
    parser.add_argument("--config", default=None,
                        help="JSON file of default option values (flags override)")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("fit", help="fit the coefficient profile and baseline")
    _add_fit_arguments(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("bands", help="pointwise and simultaneous confidence bands")
    _add_fit_arguments(sp, seed_required=True)
    sp.add_argument("--method", choices=("bridge", "multiplier"), default="bridge")
    sp.set_defaults(func=cmd_bands)

    sp = sub.add_parser("test", help="zero-efficacy and constant-efficacy tests")
    _add_fit_arguments(sp, seed_required=True)
    sp.add_argument("--family", choices=("h10", "h20", "both"), default="both")
    sp.add_argument("--test-grid", type=float, nargs="+", default=None,
                    help="explicit test grid points (default: 8-point rule)")
    sp.set_defaults(func=cmd_test)

    sp = sub.add_parser("simulate", help="Monte Carlo size/power/coverage study")
    sp.add_argument("--model", default=None,
                    help="m1..m8 or crossing (alternative to --params)")
    sp.add_argument("--params", type=float, nargs=3, default=None,
                    metavar=("ALPHA", "BETA", "GAMMA"),
                    help="log-linear model constants")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--reps", type=int, required=True)
    sp.add_argument("--bandwidth", type=float, required=True)
    sp.add_argument("--interval", type=float, nargs=2, default=(0.1, 0.9))
    sp.add_argument("--grid", type=_parse_grid, default=33)
    sp.add_argument("--kernel", default="epanechnikov",
                    choices=("epanechnikov", "uniform", "biweight"))
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--resamples", type=int, default=10_000)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--a1", type=float, default=None)
    sp.add_argument("--censoring", type=float, default=0.25,
                    help="target censoring fraction (default 0.25)")
    sp.add_argument("--wald", action="store_true",
                    help="also report the marginal Wald rejection rate")
    sp.add_argument("--pointwise", type=float, nargs="*", default=None,
                    help="marks at which to track pointwise efficacy coverage")
    sp.add_argument("--threads", type=int, default=_default_threads())
    sp.add_argument("--out-dir", default=".")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("residuals", help="martingale residuals and the sum check")
    _add_fit_arguments(sp)
    sp.add_argument("--tolerance", type=float, default=0.5,
                    help="threshold for the normalized residual-sum supremum")
    sp.set_defaults(func=cmd_residuals)

    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    parser = build_parser()
    if known.config:
        try:
            with open(known.config, "r", encoding="utf-8") as handle:
                defaults = json.load(handle)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config file: {exc}", file=sys.stderr)
            return EXIT_USAGE
        parser.set_defaults(**defaults)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EstimationError, InferenceError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
