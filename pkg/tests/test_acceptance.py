"""Acceptance criteria at their stated tolerances, one report line per criterion.

Run with ``pytest -s tests/test_acceptance.py`` to see the lines as they are
produced; they are also collected in the terminal summary.
"""
import copy
import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import report_criterion, small_problems

from meaflow.bench import consistency_sweep, fixed_grid_baseline, make_teacher, particle_complexity_sweep
from meaflow.certificates import certify, escape_set, finite_difference_check
from meaflow.cli import EXIT_OK, main
from meaflow.config import load_json, parse_bench_config, parse_run_config, resolve_config_path
from meaflow.flow import InitScheme, IntegratorConfig, initialize, run
from meaflow.problems import objective

TESTS = Path(__file__).parent


def bundled(name):
    return load_json(resolve_config_path(name))


def same_tree(a: Path, b: Path) -> bool:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return fa == fb and all((a / p).read_bytes() == (b / p).read_bytes() for p in fa)


# -- 1 ----------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    worst = {}
    for name, prob in small_problems(11).items():
        rep = finite_difference_check(prob, n_points=100, seed=1, h=1e-5)
        assert rep.n_points == 100
        worst[name] = rep.max_rel_error
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-6 and elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    report_criterion(1, "gradient correctness", ok, detail)
    assert ok


# -- 2 ----------------------------------------------------------------------


def _random_state(prob, rng, m=8):
    if prob.family == "deconvolution":
        U = np.column_stack([rng.standard_normal(m), rng.random(m)])
    else:
        U = rng.standard_normal((m, prob.dim))
    tags = tuple(1 - 2 * (k % 2) for k in range(m)) if prob.uses_tags else None
    return initialize(prob, InitScheme("custom", m, positions=tuple(map(tuple, U)), tags=tags))


def test_criterion_2_energy_decay():
    t0 = time.perf_counter()
    cfg = IntegratorConfig(monotone=False, max_steps=100, tolerance=0.0, snapshots=False,
                           history_every=1)
    bad, steps = [], 0
    for seed in range(50):
        for name, prob in small_problems(seed).items():
            state = _random_state(prob, np.random.default_rng([seed, 7]))
            res = run(prob, state, cfg)
            e = np.array([v for _, v in res.state.energy_history])
            steps += e.size - 1
            if np.any(e[1:] > e[:-1] + 1e-10 * (1 + np.abs(e[:-1]))):
                bad.append((name, seed))
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 60
    report_criterion(2, "energy decay at the default step", ok,
                     f"{steps} steps on 250 instances, violations {bad[:5]}; {elapsed:.1f}s")
    assert ok


# -- 3 and 4 share one deconvolution sweep -----------------------------------


@pytest.fixture(scope="module")
def deconvolution_sweep():
    cfg = parse_bench_config(bundled("deconv_fig4a_bench.json"))
    assert cfg.m_list == [6, 10, 20, 50, 100] and cfg.seeds == list(range(10))
    sweep_cfg = cfg.sweep_config()
    t0 = time.perf_counter()
    result = particle_complexity_sweep(sweep_cfg, cfg.m_list, cfg.seeds, threads=1)
    return sweep_cfg, result, time.perf_counter() - t0


def test_criterion_3_spike_recovery_by_particle_count(deconvolution_sweep):
    cfg, result, _ = deconvolution_sweep
    flows = [r for r in result.records if r.method == "particle-flow"]
    passed = {m: sum(bool(r.certified) for r in flows if r.m == m) for m in (6, 10, 100)}
    nonempty = 0
    for r in flows:
        if r.m == 6 and r.final_measure is not None:
            _, prob = make_teacher(cfg.family, cfg.m0, r.seed, **cfg.teacher)
            diag = escape_set(prob, r.final_measure, tolerance=cfg.certificate_tolerance)
            nonempty += not diag.sublevel_empty
    elapsed = sum(r.wallclock_ms for r in flows if r.m in (6, 10, 100)) / 1e3
    ok = passed[100] == 10 and passed[10] >= 8 and nonempty >= 1 and elapsed < 300
    report_criterion(3, "certified recovery at m = 100, 10, 6", ok,
                     f"certified m=100 {passed[100]}/10, m=10 {passed[10]}/10, m=6 {passed[6]}/10; "
                     f"nonempty sublevel set at m=6 for {nonempty} seeds; flow time {elapsed:.0f}s")
    assert ok


def test_criterion_4_particle_complexity_ordering(deconvolution_sweep):
    _, result, elapsed = deconvolution_sweep
    flow = result.geometric_means["particle-flow"]
    grid = result.geometric_means["fixed-grid"]
    below = [m for m, v in grid.items() if v < 1e-3]
    ok = flow[10] < 1e-3 and grid[10] > 1e-2 and all(m >= 50 for m in below) and elapsed < 600
    detail = ("flow " + " ".join(f"{m}:{v:.1e}" for m, v in sorted(flow.items()))
              + "; grid " + " ".join(f"{m}:{v:.1e}" for m, v in sorted(grid.items()))
              + f"; {elapsed:.0f}s")
    report_criterion(4, "particle flow beats the fixed grid", ok, detail)
    assert ok


# -- 5 ----------------------------------------------------------------------


def _relu_population_losses(name, seeds):
    losses = []
    for seed in seeds:
        cfg = parse_run_config(bundled(name), seed)
        prob, teacher = cfg.build_problem()
        res = run(prob, cfg.init_scheme(), cfg.integrator, sampler=teacher.sample)
        losses.append(objective(prob, res.state.measure))
    return losses


def test_criterion_5_relu_networks():
    t0 = time.perf_counter()
    big = _relu_population_losses("relu_fig3_m100.json", range(10))
    small = _relu_population_losses("relu_fig3_m10.json", range(10))
    fig3_time = time.perf_counter() - t0
    ok_big = sum(v < 1e-3 for v in big)
    ok_small = sum(v < 1e-3 for v in small)

    t0 = time.perf_counter()
    bcfg = parse_bench_config(bundled("relu_d20_bench.json"))
    assert bcfg.m_list == [40] and len(bcfg.seeds) == 5
    sweep = particle_complexity_sweep(bcfg.sweep_config(), bcfg.m_list, bcfg.seeds)
    wide_time = time.perf_counter() - t0
    flow = sweep.geometric_means["particle-flow"][40]
    grid = sweep.geometric_means["fixed-grid"][40]

    ok = ok_big == 10 and ok_small >= 7 and grid >= 10 * flow and fig3_time + wide_time < 300
    failing = [f"seed {s}: {v:.2e}" for s, v in enumerate(big) if not v < 1e-3]
    report_criterion(5, "ReLU networks from a small sphere", ok,
                     f"d=2 loss < 1e-3 at m=100 {ok_big}/10 ({', '.join(failing) or 'none failing'}), "
                     f"m=10 {ok_small}/10; d=20 m=40 flow {flow:.2e} vs grid {grid:.2e} "
                     f"(ratio {grid / flow:.0f}); {fig3_time + wide_time:.0f}s")
    assert ok


# -- 6 ----------------------------------------------------------------------


def test_criterion_6_certificate_soundness():
    t0 = time.perf_counter()
    tol = 1e-3
    rows = []
    for seed in range(3):
        _, prob = make_teacher("deconvolution", 3, seed, noise=1e-3, n=64, order=5)
        res = run(prob, InitScheme("grid_zero_slice", 20),
                  IntegratorConfig(safety=0.55, tolerance=1e-12, max_steps=10**7, snapshots=False,
                                   history_every=10**9))
        mu = res.state.measure
        passed = certify(prob, mu, tolerance=tol).passed
        best_grid = fixed_grid_baseline(prob, np.arange(64) / 64, tol=1e-12).objective
        rows.append((passed, objective(prob, mu), best_grid))
    elapsed = time.perf_counter() - t0
    sound = all(f <= g + 10 * tol for p, f, g in rows if p)
    ok = sound and all(p for p, _, _ in rows) and elapsed < 30
    report_criterion(6, "certificate soundness against a 64-point grid", ok,
                     "; ".join(f"pass={p} F={f:.6f} grid={g:.6f}" for p, f, g in rows)
                     + f"; {elapsed:.1f}s")
    assert ok


# -- 7 ----------------------------------------------------------------------


def test_criterion_7_many_particle_consistency():
    t0 = time.perf_counter()
    table = {}
    for seed in range(3):
        _, prob = make_teacher("deconvolution", 5, seed, noise=1e-3)
        table[seed] = dict(consistency_sweep(prob, [25, 100], horizon=5.0))
    elapsed = time.perf_counter() - t0
    ok = all(d[100] <= d[25] for d in table.values()) and elapsed < 120
    report_criterion(7, "distance to the 4m flow shrinks with m", ok,
                     "; ".join(f"seed {s}: {d[25]:.3e} -> {d[100]:.3e}" for s, d in table.items())
                     + f"; {elapsed:.1f}s")
    assert ok


# -- 8 ----------------------------------------------------------------------


INVARIANT_TESTS = [
    "test_measures.py::test_h1_single_particle",
    "test_measures.py::test_h1_cancellation_matches_test_function_integral",
    "test_measures.py::test_h1_is_linear_under_mixtures",
    "test_measures.py::test_h2_single_particle",
    "test_measures.py::test_h2_two_particles_match_test_functions",
    "test_measures.py::test_h2_dilation_covariance",
    "test_measures.py::test_w2_diracs_and_identity",
    "test_measures.py::test_w2_two_point_example",
    "test_measures.py::test_w2_matches_permutation_enumeration",
    "test_measures.py::test_w2_symmetry_and_triangle_inequality",
    "test_problems.py::test_prox_is_nonexpansive_in_weight",
    "test_problems.py::test_first_variation_is_one_homogeneous_in_weight",
    "test_certificates.py::test_slice_values_scale_with_weight",
]


def test_criterion_8_lifting_and_homogeneity_invariants():
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           *[str(TESTS / t) for t in INVARIANT_TESTS]],
                          capture_output=True, text=True, cwd=TESTS.parent)
    elapsed = time.perf_counter() - t0
    last = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and elapsed < 30
    report_criterion(8, "lifting and homogeneity invariants", ok, f"{last}; {elapsed:.1f}s")
    assert ok, proc.stdout[-3000:]


# -- 9 ----------------------------------------------------------------------


def _cli(out: Path, monkeypatch, *argv) -> int:
    monkeypatch.setenv("MEAFLOW_OUT", str(out))
    return main(list(argv))


def test_criterion_9_determinism(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    checks = {}
    # single runs, repeated with different worker counts
    for name in ("deconv_fig2_m6.json", "relu_fig3_m10.json"):
        codes = [_cli(tmp_path / name / str(k), monkeypatch, "--threads", str(k), "run", name, "--seed", "3")
                 for k in (1, 2)]
        checks[name] = codes == [EXIT_OK, EXIT_OK] and same_tree(tmp_path / name / "1",
                                                                 tmp_path / name / "2")
    # sweeps on fewer cells than the full acceptance runs
    for name, m_list, n_seeds in (("deconv_fig4a_bench.json", [6, 10], 3),
                                  ("relu_d20_bench.json", [40], 2)):
        data = copy.deepcopy(bundled(name))
        data["sweep"].update(m_list=m_list, n_seeds=n_seeds)
        if "max_steps" in data["sweep"]["integrator"] and name.startswith("relu"):
            data["sweep"]["integrator"]["max_steps"] = 5000
        cfg = tmp_path / name
        cfg.write_text(json.dumps(data))
        codes = [_cli(tmp_path / f"{name}.out" / str(k), monkeypatch, "--threads", str(k), "bench", str(cfg))
                 for k in (1, 2)]
        checks[name] = codes == [EXIT_OK, EXIT_OK] and same_tree(tmp_path / f"{name}.out" / "1",
                                                                 tmp_path / f"{name}.out" / "2")
    elapsed = time.perf_counter() - t0
    ok = all(checks.values())
    report_criterion(9, "bit-identical outputs across repeats and worker counts", ok,
                     ", ".join(f"{k} {'same' if v else 'DIFFERENT'}" for k, v in checks.items())
                     + f"; {elapsed:.0f}s")
    assert ok
