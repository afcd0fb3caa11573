"""Command-line interface: ``meaflow {run,bench,certify,distance,check-grad}``.

Exit codes: 0 success, 1 failed check, 2 diverged run, 3 certificate failure
under ``--require-optimal``, 64 malformed configuration or input.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext

from .errors import ConfigurationError, DivergedError, IntegrationError, MeaflowError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_DIVERGED = 2
EXIT_NOT_OPTIMAL = 3
EXIT_CONFIG = 64


def _blas_single_thread():
    """Pin BLAS to one thread so results do not depend on the worker count."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional dependency
        return nullcontext()
    return threadpool_limits(limits=1)


def _out_dir(configured, default: str) -> str:
    env = os.environ.get("MEAFLOW_OUT")
    if env:
        return env
    return configured or default


def _write(path: str, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def _config_stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    from .certificates import certify, default_grid
    from .config import load_json, parse_run_config, resolve_config_path
    from .flow import export_trajectory, initialize, run
    from .problems import objective

    path = resolve_config_path(args.config)
    cfg = parse_run_config(load_json(path), args.seed, base_dir=os.path.dirname(os.path.abspath(path)))
    problem, teacher = cfg.build_problem()
    out = _out_dir(cfg.output["directory"], os.path.join("meaflow_out", _config_stem(path)))
    os.makedirs(out, exist_ok=True)
    sampler = teacher.sample if (teacher is not None and cfg.integrator.method == "sgd") else None
    try:
        state0 = initialize(problem, cfg.init_scheme())
        result = run(problem, state0, cfg.integrator, sampler=sampler)
    except (DivergedError, IntegrationError) as exc:
        _write(os.path.join(out, "status.json"),
               json.dumps({"status": "diverged", "message": str(exc),
                           "step": getattr(exc, "step", None)}, sort_keys=True) + "\n")
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    export_trajectory(result, os.path.join(out, "trajectory"), problem)
    mu = result.state.measure
    formats = cfg.output["formats"]
    if "json" in formats:
        _write(os.path.join(out, "final_measure.json"), mu.to_json() + "\n")
    if "csv" in formats:
        _write(os.path.join(out, "final_measure.csv"), mu.to_csv())
    grid = default_grid(problem, mu, cfg.certificate["grid_points"], seed=cfg.seed)
    report = certify(problem, mu, grid, cfg.certificate["tolerance"],
                     cfg.certificate["support_threshold"])
    _write(os.path.join(out, "certificate.json"), report.to_json() + "\n")
    summary = {
        "status": "ok",
        "stop_reason": result.stop_reason,
        "steps": result.state.step_index,
        "time": result.state.time,
        "objective": objective(problem, mu),
        "certificate": report.passed,
    }
    _write(os.path.join(out, "status.json"), json.dumps(summary, sort_keys=True) + "\n")
    print(f"{result.stop_reason} after {result.state.step_index} steps, "
          f"F={summary['objective']:.10g}; certificate {report.summary()}")
    if args.require_optimal and not report.passed:
        return EXIT_NOT_OPTIMAL
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import particle_complexity_sweep
    from .config import load_json, parse_bench_config, resolve_config_path

    path = resolve_config_path(args.config)
    cfg = parse_bench_config(load_json(path), args.seed)
    out = _out_dir(cfg.output["directory"], os.path.join("meaflow_out", _config_stem(path)))
    os.makedirs(out, exist_ok=True)
    threads = args.threads or os.cpu_count() or 1
    result = particle_complexity_sweep(cfg.sweep_config(), cfg.m_list, cfg.seeds, threads=threads)
    _write(os.path.join(out, "sweep.csv"), result.to_csv(with_wallclock=cfg.output["wallclock"]))
    summary = result.summary()
    summary["family"] = cfg.family
    summary["seeds"] = cfg.seeds
    _write(os.path.join(out, "summary.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for meth, means in sorted(result.geometric_means.items()):
        cells = " ".join(f"m={m}:{v:.3e}" for m, v in sorted(means.items()))
        print(f"{meth}: {cells}")
    return EXIT_OK


def cmd_certify(args) -> int:
    from .certificates import certify, default_grid, escape_set
    from .config import load_json, parse_run_config, resolve_config_path
    from .measures import ParticleMeasure

    path = resolve_config_path(args.config)
    cfg = parse_run_config(load_json(path), args.seed, base_dir=os.path.dirname(os.path.abspath(path)))
    problem, _ = cfg.build_problem()
    try:
        mu = ParticleMeasure.load(args.measure)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigurationError(f"cannot read measure {args.measure}: {exc}") from exc
    tol = args.tolerance if args.tolerance is not None else cfg.certificate["tolerance"]
    grid = default_grid(problem, mu, cfg.certificate["grid_points"], seed=cfg.seed)
    report = certify(problem, mu, grid, tol, cfg.certificate["support_threshold"])
    diag = escape_set(problem, mu, grid=grid, tolerance=tol)
    out = _out_dir(cfg.output["directory"], os.path.join("meaflow_out", "certify"))
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "certificate.json"), report.to_json() + "\n")
    _write(os.path.join(out, "escape.json"), json.dumps(diag.to_dict(), sort_keys=True) + "\n")
    print(report.summary())
    if args.require_optimal and not report.passed:
        return EXIT_NOT_OPTIMAL
    return EXIT_OK


def cmd_distance(args) -> int:
    from .measures import ParticleMeasure, w2_distance

    try:
        mu = ParticleMeasure.load(args.first)
        nu = ParticleMeasure.load(args.second)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigurationError(f"cannot read measure: {exc}") from exc
    d = w2_distance(mu, nu)
    print(repr(d))
    out = os.environ.get("MEAFLOW_OUT")
    if out:
        os.makedirs(out, exist_ok=True)
        _write(os.path.join(out, "distance.json"), json.dumps({"w2": d}) + "\n")
    return EXIT_OK


def cmd_check_grad(args) -> int:
    from .certificates import finite_difference_check
    from .config import load_json, parse_run_config, resolve_config_path

    path = resolve_config_path(args.config)
    cfg = parse_run_config(load_json(path), args.seed, base_dir=os.path.dirname(os.path.abspath(path)))
    problem, _ = cfg.build_problem()
    report = finite_difference_check(problem, n_points=args.points, seed=cfg.seed)
    print(f"max relative error: f_prime_grad {report.max_rel_error_fprime:.3e}, "
          f"velocity {report.max_rel_error_velocity:.3e} over {report.n_points} points")
    out = os.environ.get("MEAFLOW_OUT")
    if out:
        os.makedirs(out, exist_ok=True)
        _write(os.path.join(out, "check_grad.json"), json.dumps(report.to_dict(), sort_keys=True) + "\n")
    return EXIT_OK if report.max_rel_error <= args.threshold else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meaflow", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="worker processes for sweeps (default: number of cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    def seeded(p):
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        return p

    p = seeded(sub.add_parser("run", help="integrate a particle flow and certify the result"))
    p.add_argument("config")
    p.add_argument("--require-optimal", action="store_true")
    p.set_defaults(func=cmd_run)

    p = seeded(sub.add_parser("bench", help="particle-complexity sweep"))
    p.add_argument("config")
    p.set_defaults(func=cmd_bench)

    p = seeded(sub.add_parser("certify", help="optimality certificate of a stored measure"))
    p.add_argument("measure")
    p.add_argument("config")
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--require-optimal", action="store_true")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("distance", help="W2 distance between two stored measures")
    p.add_argument("first")
    p.add_argument("second")
    p.set_defaults(func=cmd_distance)

    p = seeded(sub.add_parser("check-grad", help="finite-difference check of the derivatives"))
    p.add_argument("config")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--threshold", type=float, default=1e-6)
    p.set_defaults(func=cmd_check_grad)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with _blas_single_thread():
            return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MeaflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
