"""Initialization, single steps and long runs of the particle flow."""
import json
import math
import os

import numpy as np
import pytest

from conftest import small_problems
from meaflow.bench import make_teacher
from meaflow.errors import ConfigurationError, DivergedError, IntegrationError
from meaflow.flow import (
    FlowState,
    InitScheme,
    IntegratorConfig,
    default_dt,
    export_trajectory,
    initialize,
    run,
    sphere_directions,
    step_forward_backward,
    step_sgd,
)
from meaflow.measures import ParticleMeasure
from meaflow.problems import (
    ReluNetClassic,
    ReluNetSignedSquare,
    SigmoidNet,
    SparseDeconvolution,
    objective,
    velocity,
)


def kernel_norm_sq_by_cosines(theta, n, order):
    xs = np.arange(n) / n
    vals = [sum(math.cos(2 * math.pi * k * (x - theta)) for k in range(-order, order + 1)) for x in xs]
    return sum(v * v for v in vals) / n


def state_of(problem, positions, tags=None):
    return initialize(problem, InitScheme("custom", len(positions), positions=tuple(map(tuple, positions)),
                                          tags=None if tags is None else tuple(tags)))


# -- initialization ------------------------------------------------------


def test_grid_on_zero_slice_torus():
    st = initialize(SparseDeconvolution(np.zeros(32), order=3), InitScheme("GridOnZeroSlice", 4))
    np.testing.assert_array_equal(st.measure.positions, [[0, 0], [0, 0.25], [0, 0.5], [0, 0.75]])
    np.testing.assert_array_equal(st.measure.masses, 0.25)
    assert st.time == 0 and st.step_index == 0


def test_sphere_directions_in_the_plane():
    d = sphere_directions(4, 2)
    angles = np.mod(np.arctan2(d[:, 1], d[:, 0]), 2 * np.pi)
    np.testing.assert_allclose(angles, [0, np.pi / 2, np.pi, 3 * np.pi / 2], atol=1e-15)


@pytest.mark.parametrize("dim", [3, 5, 20])
def test_sphere_directions_are_unit_and_seeded(dim):
    a, b = sphere_directions(50, dim, seed=3), sphere_directions(50, dim, seed=3)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, rtol=1e-14)


def test_sphere_shell_radius_and_tags():
    X = np.random.default_rng(0).standard_normal((20, 1))
    prob = ReluNetSignedSquare(X, np.zeros(20))
    st = initialize(prob, InitScheme("SphereShell", 4, r0=0.1))
    np.testing.assert_allclose(np.linalg.norm(st.measure.positions, axis=1), 0.1, rtol=1e-14)
    assert sorted(st.measure.tags.tolist()) == [-1, -1, 1, 1]
    classic = ReluNetClassic(np.zeros((5, 1)), np.zeros(5))
    shell = initialize(classic, InitScheme("SphereShell", 7, r0=0.3, seed=2)).measure
    np.testing.assert_allclose(np.linalg.norm(shell.positions, axis=1), 0.3, rtol=1e-14)


def test_scheme_family_mismatch():
    with pytest.raises(ConfigurationError):
        initialize(SparseDeconvolution(np.zeros(32), order=3), InitScheme("SphereShell", 4))
    X = np.zeros((5, 1))
    with pytest.raises(ConfigurationError):
        initialize(ReluNetSignedSquare(X, np.zeros(5)), InitScheme("GridOnZeroSlice", 4))
    with pytest.raises(ConfigurationError):
        InitScheme("GridOnZeroSlice", 0)


def test_offset_slice_levels():
    prob = SigmoidNet(np.zeros((4, 2)), np.zeros(4))
    st = initialize(prob, InitScheme("OffsetSlice", 9, offset=1.0, box=2.0))
    np.testing.assert_array_equal(st.measure.positions[:, 0], 1.0)
    assert np.all(np.abs(st.measure.positions[:, 1:]) <= 2.0)


# -- single steps --------------------------------------------------------


@pytest.mark.parametrize("dt", [1e-3, 0.01, 0.05])
def test_single_particle_step_without_signal(dt):
    prob = SparseDeconvolution(np.zeros(64), order=7, lam=0.8, reg_weight=1.0)
    theta = 0.3
    st = state_of(prob, [[1.0, theta]])
    nxt = step_forward_backward(prob, st, dt)
    vw = -(1.0 / 0.8) * kernel_norm_sq_by_cosines(theta, 64, 7)
    moved = 1.0 + dt * vw
    expected = math.copysign(max(abs(moved) - dt, 0.0), moved)
    assert nxt.measure.positions[0, 0] == pytest.approx(expected, abs=1e-12)
    assert nxt.measure.positions[0, 0] < 1.0
    assert nxt.measure.positions[0, 1] == pytest.approx(theta, abs=1e-12)
    assert nxt.time == dt and nxt.step_index == 1


def test_fixed_point_is_unchanged():
    prob = SparseDeconvolution(np.zeros(64))
    st = initialize(prob, InitScheme("GridOnZeroSlice", 16))
    nxt = step_forward_backward(prob, st, 0.01)
    np.testing.assert_array_equal(nxt.measure.positions, st.measure.positions)


def test_step_energy_decreases_on_random_instances():
    for seed in range(50):
        _, prob = make_teacher("deconvolution", 3, seed, noise=1e-3, n=64, order=5)
        rng = np.random.default_rng(seed)
        U = np.column_stack([rng.standard_normal(8), rng.random(8)])
        st = state_of(prob, U)
        dt = default_dt(prob, st.measure)
        nxt = step_forward_backward(prob, st, dt)
        assert nxt.energy <= st.energy + 1e-10 * (1 + abs(st.energy))


def test_step_rejects_nonpositive_dt():
    prob = SparseDeconvolution(np.zeros(32), order=3)
    with pytest.raises(ConfigurationError):
        step_forward_backward(prob, initialize(prob, InitScheme("GridOnZeroSlice", 2)), 0.0)


def test_classic_relu_kink_names_particle():
    prob = ReluNetClassic(np.random.default_rng(0).standard_normal((10, 1)), np.ones(10))
    st = state_of(prob, [[1.0, 0.5, 0.1], [2.0, 0.0, 0.0]])
    with pytest.raises(IntegrationError) as info:
        step_forward_backward(prob, st, 0.1)
    assert info.value.index == 1


# -- stochastic steps ----------------------------------------------------


def test_full_batch_sgd_equals_forward_backward():
    prob = small_problems()["sigmoid"]
    rng = np.random.default_rng(1)
    st = state_of(prob, rng.standard_normal((5, prob.dim)))
    a = step_sgd(prob, st, 0.05, batch_size=prob.n_quad, seed=3)
    b = step_forward_backward(prob, st, 0.05)
    np.testing.assert_array_equal(a.measure.positions, b.measure.positions)


def test_sgd_is_deterministic_per_seed():
    prob = small_problems()["relu_signed_square"]
    st = initialize(prob, InitScheme("SphereShell", 6, r0=0.5))
    cfg = IntegratorConfig(method="sgd", dt=0.05, max_steps=30, batch_size=8, sgd_seed=11,
                           tolerance=0.0)
    a, b = run(prob, st, cfg), run(prob, st, cfg)
    np.testing.assert_array_equal(a.state.measure.positions, b.state.measure.positions)
    c = run(prob, st, IntegratorConfig(method="sgd", dt=0.05, max_steps=30, batch_size=8,
                                       sgd_seed=12, tolerance=0.0))
    assert not np.array_equal(a.state.measure.positions, c.state.measure.positions)


def test_sgd_velocity_is_unbiased():
    prob = small_problems()["relu_classic"]  # no regularizer: step / dt is the velocity
    rng = np.random.default_rng(2)
    st = state_of(prob, rng.standard_normal((3, prob.dim)))
    dt = 1.0
    full = velocity(prob, st.measure)
    draws = np.array([
        (step_sgd(prob, st, dt, batch_size=8, seed=s).measure.positions - st.measure.positions) / dt
        for s in range(10_000)
    ])
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert np.all(np.abs(mean - full) <= 3 * se + 1e-12)


def test_sgd_rejects_deconvolution():
    prob = SparseDeconvolution(np.zeros(32), order=3)
    with pytest.raises(ConfigurationError):
        step_sgd(prob, initialize(prob, InitScheme("GridOnZeroSlice", 2)), 0.1, 4, 0)


# -- runs ----------------------------------------------------------------


def _deconv(seed=0, m0=3, n=64, order=5):
    return make_teacher("deconvolution", m0, seed, noise=1e-3, n=n, order=order)[1]


def test_zero_steps_returns_initial_state():
    prob = _deconv()
    init = initialize(prob, InitScheme("GridOnZeroSlice", 10))
    res = run(prob, InitScheme("GridOnZeroSlice", 10), IntegratorConfig(max_steps=0))
    np.testing.assert_array_equal(res.state.measure.positions, init.measure.positions)
    assert res.stop_reason == "max_steps" and res.state.step_index == 0
    assert res.state.energy_history == init.energy_history


def test_stationarity_bound_at_tolerance_stop():
    prob = _deconv(1)
    tol = 1e-8
    res = run(prob, InitScheme("GridOnZeroSlice", 12),
              IntegratorConfig(safety=0.55, tolerance=tol, max_steps=2_000_000, snapshots=False,
                               history_every=1000))
    assert res.stop_reason == "tolerance"
    v = velocity(prob, res.state.measure)
    assert np.max(np.linalg.norm(v, axis=1)) <= math.sqrt(res.state.measure.m * tol)


def test_horizon_is_hit_exactly():
    prob = _deconv(2)
    res = run(prob, InitScheme("GridOnZeroSlice", 8),
              IntegratorConfig(dt=3e-4, horizon=0.1, max_steps=10**6, tolerance=0.0))
    assert res.stop_reason == "horizon"
    assert res.state.time == pytest.approx(0.1, rel=1e-12)


def test_snapshots_at_powers_of_two():
    prob = _deconv(3)
    res = run(prob, InitScheme("GridOnZeroSlice", 8),
              IntegratorConfig(dt=1e-4, max_steps=20, tolerance=0.0))
    assert [s for s, _, _ in res.snapshots] == [0, 1, 2, 4, 8, 16, 20]


def test_mass_and_count_are_conserved():
    prob = _deconv(4)
    res = run(prob, InitScheme("GridOnZeroSlice", 9),
              IntegratorConfig(dt=1e-4, max_steps=200, tolerance=0.0))
    for _, _, mu in res.snapshots:
        assert mu.m == 9
        np.testing.assert_array_equal(mu.masses, np.full(9, 1 / 9))


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
@pytest.mark.parametrize("use_kernel", [True, False])
def test_divergence_is_reported(use_kernel):
    prob = _deconv(5)
    with pytest.raises(DivergedError) as info:
        run(prob, InitScheme("GridOnZeroSlice", 8),
            IntegratorConfig(dt=5.0, monotone=False, max_steps=10**5, tolerance=0.0,
                             use_kernel=use_kernel))
    assert info.value.step is not None and info.value.step > 0


@pytest.mark.parametrize("use_kernel", [True, False])
def test_guard_undoes_energy_increases(use_kernel):
    prob = _deconv(6)
    res = run(prob, InitScheme("GridOnZeroSlice", 8),
              IntegratorConfig(dt=0.2, max_steps=400, tolerance=0.0, use_kernel=use_kernel))
    energies = [e for _, e in res.state.energy_history]
    for a, b in zip(energies, energies[1:]):
        assert b <= a + 1e-10 * (1 + abs(a))
    assert any(reason == "energy increase" for *_, reason in res.dt_log)
    assert res.dt_log[-1][1] < 0.2


def test_kernel_and_array_paths_agree():
    prob = _deconv(7, n=256, order=7)
    cfg = dict(dt=2e-4, max_steps=300, tolerance=0.0, monotone=False)
    a = run(prob, InitScheme("GridOnZeroSlice", 20), IntegratorConfig(use_kernel=True, **cfg))
    b = run(prob, InitScheme("GridOnZeroSlice", 20), IntegratorConfig(use_kernel=False, **cfg))
    np.testing.assert_allclose(a.state.measure.positions, b.state.measure.positions, atol=1e-11)
    ea = np.array([e for _, e in a.state.energy_history])
    eb = np.array([e for _, e in b.state.energy_history])
    np.testing.assert_allclose(ea, eb, rtol=1e-11)


def test_discrete_energy_identity():
    # smooth objective: sigmoid network with no weight penalty
    base = small_problems()["sigmoid"]
    prob = SigmoidNet(base.X, base.targets, reg_weight=0.0)
    U = np.random.default_rng(3).standard_normal((5, prob.dim))
    st = state_of(prob, U)
    msv = st.grad_norm_history[-1][1]
    gaps = []
    for dt in (1e-2, 5e-3, 2.5e-3):
        nxt = step_forward_backward(prob, st, dt)
        # masses are 1/m, so dF/dt = -(1/m) sum |v|^2 = -mean squared velocity
        gaps.append(abs((st.energy - nxt.energy) / dt - msv))
    # the gap is O(dt): halving dt roughly halves it
    assert gaps[1] < 0.6 * gaps[0] and gaps[2] < 0.6 * gaps[1]
    assert gaps[2] < 0.05 * msv


def test_initial_chain_keeps_winding_around_the_torus():
    # Particles start on the weight-zero slice in grid order.  Joined in that order they form
    # a closed chain that winds once around the torus, which separates negative from positive
    # weights.  The flow deforms the chain continuously, so with short links the winding
    # number stays one.
    prob = _deconv(8, n=256, order=7)
    res = run(prob, InitScheme("GridOnZeroSlice", 64),
              IntegratorConfig(safety=0.55, max_steps=5000, tolerance=0.0))
    for _, _, mu in res.snapshots:
        th = mu.positions[:, 1]
        gaps = np.diff(np.append(th, th[0]))
        wrapped = gaps - np.round(gaps)
        assert np.max(np.abs(wrapped)) < 0.25
        assert np.sum(wrapped) == pytest.approx(1.0, abs=1e-9)


def test_norm_monitor_reports_first_excursion():
    prob = _deconv(9)
    res = run(prob, InitScheme("GridOnZeroSlice", 8),
              IntegratorConfig(safety=0.55, max_steps=3000, tolerance=0.0, norm_bound=0.9))
    assert res.norm_violation is not None
    step, big = res.norm_violation
    assert big > 0.9 and step > 0


def test_config_validation():
    for bad in (dict(dt=-1.0), dict(max_steps=-1), dict(tolerance=-1.0), dict(method="euler"),
                dict(history_every=0), dict(batch_size=0)):
        with pytest.raises(ConfigurationError):
            IntegratorConfig(**bad)


def test_export_is_reproducible(tmp_path):
    prob = _deconv(10)
    res = run(prob, InitScheme("GridOnZeroSlice", 6), IntegratorConfig(dt=1e-4, max_steps=9,
                                                                        tolerance=0.0))
    a, b = tmp_path / "a", tmp_path / "b"
    export_trajectory(res, a, prob)
    export_trajectory(res, b, prob)
    names = sorted(os.listdir(a))
    assert names == sorted(os.listdir(b))
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert len(manifest["snapshots"]) == len(res.snapshots)
    last = ParticleMeasure.load(a / manifest["snapshots"][-1]["file"])
    np.testing.assert_array_equal(last.positions, res.state.measure.positions)


def test_run_continues_from_a_state():
    prob = _deconv(11)
    cfg = IntegratorConfig(dt=1e-4, max_steps=50, tolerance=0.0, monotone=False)
    whole = run(prob, InitScheme("GridOnZeroSlice", 6), IntegratorConfig(dt=1e-4, max_steps=100,
                                                                          tolerance=0.0,
                                                                          monotone=False))
    half = run(prob, InitScheme("GridOnZeroSlice", 6), cfg)
    rest = run(prob, half.state, cfg)
    np.testing.assert_allclose(rest.state.measure.positions, whole.state.measure.positions, atol=1e-14)
    assert rest.state.step_index == 100
    assert isinstance(rest.state, FlowState)
