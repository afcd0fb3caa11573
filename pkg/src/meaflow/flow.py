"""Time integration of particle gradient flows.

A flow moves the ``m`` particles of a measure with masses ``1/m`` along the
min-norm velocity field of the objective.  Discrete time uses either the
forward-backward scheme (explicit step on the loss, proximal step on the
regularizer) or its stochastic variant where the loss gradient comes from a
fresh mini-batch.

The step functions (:func:`step_forward_backward`, :func:`step_sgd`) return new
states with one more history entry.  :func:`run` drives long trajectories with
an allocation-free inner loop, and a compiled kernel for deconvolution.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from . import _kernels
from .errors import (
    ConfigurationError,
    DivergedError,
    IntegrationError,
    NonDifferentiableError,
)
from .measures import ParticleMeasure
from .problems import Problem, SparseDeconvolution, reg_minnorm_correction

__all__ = [
    "FlowState",
    "InitScheme",
    "IntegratorConfig",
    "RunResult",
    "initialize",
    "estimate_lipschitz",
    "default_dt",
    "step_forward_backward",
    "step_sgd",
    "run",
    "export_trajectory",
    "sphere_directions",
]

BatchSampler = Callable[[np.random.Generator, int], tuple]


# ---------------------------------------------------------------------------
# State and initialization
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FlowState:
    """A particle measure at a point of its trajectory.

    ``energy_history`` and ``grad_norm_history`` hold ``(time, value)`` pairs
    measured at the recorded states; the gradient norm is the mean squared
    min-norm velocity.
    """

    measure: ParticleMeasure
    time: float = 0.0
    step_index: int = 0
    energy_history: tuple = ()
    grad_norm_history: tuple = ()

    @property
    def energy(self) -> float:
        return self.energy_history[-1][1] if self.energy_history else float("nan")


_SCHEMES = ("grid_zero_slice", "sphere_shell", "offset_slice", "custom")
_SCHEME_ALIASES = {
    "GridOnZeroSlice": "grid_zero_slice",
    "SphereShell": "sphere_shell",
    "OffsetSlice": "offset_slice",
    "Custom": "custom",
}


@dataclass(frozen=True)
class InitScheme:
    """How to place the initial particles.

    Parameters
    ----------
    kind : str
        ``grid_zero_slice`` (weights 0, parameters on a grid),
        ``sphere_shell`` (all particles at radius ``r0``),
        ``offset_slice`` (weights equal to ``offset``, parameters on a grid) or
        ``custom`` (explicit ``positions`` and optional ``tags``).
    m : int
        Number of particles.
    r0 : float
        Shell radius for ``sphere_shell``.
    offset : float
        Weight level for ``offset_slice``.
    box : float
        Half-width of the box holding the parameter grid when the parameter
        space is not the torus.
    seed : int
        Seed of the scrambled low-discrepancy sequences.
    """

    kind: str
    m: int
    r0: float = 0.1
    offset: float = 1.0
    box: float = 3.0
    seed: int = 0
    positions: Optional[tuple] = None
    tags: Optional[tuple] = None

    def __post_init__(self):
        kind = _SCHEME_ALIASES.get(self.kind, self.kind)
        if kind not in _SCHEMES:
            raise ConfigurationError(f"unknown init scheme {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if int(self.m) < 1:
            raise ConfigurationError("an initialization needs m >= 1 particles")
        if not self.r0 > 0 or not self.box > 0:
            raise ConfigurationError("r0 and box must be positive")


def sphere_directions(count: int, dim: int, seed: int = 0) -> np.ndarray:
    """Quasi-uniform unit vectors in ``R^dim``.

    In the plane the directions are equispaced starting at angle 0.  In higher
    dimension a scrambled Halton sequence is pushed through the normal inverse
    CDF and normalized.
    """
    if dim < 1:
        raise ConfigurationError("dimension must be positive")
    if dim == 1:
        return np.where(np.arange(count) % 2 == 0, 1.0, -1.0)[:, None]
    if dim == 2:
        ang = 2 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(ang), np.sin(ang)])
    from scipy.stats import norm

    sampler = qmc.Halton(d=dim, scramble=True, seed=seed)
    pts = sampler.random(count)
    g = norm.ppf(np.clip(pts, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _parameter_grid(problem: Problem, m: int, box: float, seed: int) -> np.ndarray:
    if isinstance(problem, SparseDeconvolution):
        return (np.arange(m) / m)[:, None]
    k = problem.dim - 1
    if k == 1:
        return np.linspace(-box, box, m)[:, None]
    pts = qmc.Halton(d=k, scramble=True, seed=seed).random(m)
    return (2.0 * pts - 1.0) * box


def initialize(problem: Problem, scheme: InitScheme) -> FlowState:
    """Initial state with uniform masses ``1/m`` (energy recorded at time 0)."""
    m = int(scheme.m)
    tags = None
    if scheme.kind in ("grid_zero_slice", "offset_slice"):
        if problem.homogeneity != "partial1":
            raise ConfigurationError(f"{scheme.kind} needs a family with a weight coordinate")
        level = 0.0 if scheme.kind == "grid_zero_slice" else float(scheme.offset)
        theta = _parameter_grid(problem, m, scheme.box, scheme.seed)
        pos = np.column_stack([np.full(m, level), theta])
    elif scheme.kind == "sphere_shell":
        if problem.homogeneity != "two":
            raise ConfigurationError("sphere_shell needs a 2-homogeneous family")
        if problem.uses_tags:
            n_plus = (m + 1) // 2
            dirs = np.vstack([
                sphere_directions(n_plus, problem.dim, scheme.seed),
                sphere_directions(m - n_plus, problem.dim, scheme.seed + 1),
            ])
            tags = np.concatenate([np.ones(n_plus), -np.ones(m - n_plus)])
        else:
            dirs = sphere_directions(m, problem.dim, scheme.seed)
        pos = scheme.r0 * dirs
    else:
        if scheme.positions is None:
            raise ConfigurationError("custom initialization needs positions")
        pos = np.asarray(scheme.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        if pos.shape[0] != m:
            raise ConfigurationError(f"custom positions hold {pos.shape[0]} particles, m={m}")
        tags = None if scheme.tags is None else np.asarray(scheme.tags)
    problem.check_positions(pos)
    if problem.uses_tags and tags is None:
        raise ConfigurationError(f"{problem.family} needs particle tags")
    mu = ParticleMeasure.uniform(pos, tags if problem.uses_tags else None)
    energy, msv = _measure_state(problem, mu)
    return FlowState(mu, 0.0, 0, ((0.0, energy),), ((0.0, msv),))


# ---------------------------------------------------------------------------
# Step-size selection
# ---------------------------------------------------------------------------


def _smooth_velocity_array(problem: Problem, U, tags, masses) -> np.ndarray:
    mu = ParticleMeasure(U, masses, tags)
    g = problem.residual_representer(mu)
    return -problem.adjoint_grad(mu.positions, problem.tags_for(mu, mu.m), g)


def estimate_lipschitz(problem: Problem, mu: ParticleMeasure, iters: int = 30,
                       h: float = 1e-6, start: Optional[np.ndarray] = None):
    """Power-iteration estimate of the Lipschitz constant of the loss velocity.

    The velocity field ``U -> v_tilde(U)`` of all particles jointly is the
    negative gradient of ``m`` times the smooth part of the discretized
    objective; its Jacobian is symmetric and its spectral radius is estimated
    from central finite differences of the field.

    Returns ``(estimate, direction)``; ``direction`` can warm-start a later call.
    """
    U = np.array(mu.positions)
    tags = mu.tags
    if start is None:
        v = np.random.default_rng(0).standard_normal(U.shape)
    else:
        v = np.array(start, dtype=float).reshape(U.shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        hv = -(_smooth_velocity_array(problem, U + h * v, tags, mu.masses)
               - _smooth_velocity_array(problem, U - h * v, tags, mu.masses)) / (2 * h)
        est = float(np.linalg.norm(hv))
        if not est > 0 or not math.isfinite(est):
            break
        v = hv / est
    return est, v


def default_dt(problem: Problem, mu: ParticleMeasure, safety: float = 10.0) -> float:
    """``1 / (safety * L)`` with ``L`` the estimate of :func:`estimate_lipschitz`."""
    est, _ = estimate_lipschitz(problem, mu)
    return 1.0 / (safety * max(est, 1e-8))


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------


def _measure_state(problem: Problem, mu: ParticleMeasure):
    """Energy and mean squared min-norm velocity at ``mu`` (nan when undefined)."""
    f = problem.embed(mu)
    reg = float(np.dot(mu.masses, problem.regularizer.value(mu.positions)))
    energy = problem.loss.value(f, problem.targets, problem.quad_weights) + problem.reg_weight * reg
    try:
        g = problem.loss.grad(f, problem.targets)
        vt = -problem.adjoint_grad(mu.positions, problem.tags_for(mu, mu.m), g)
    except NonDifferentiableError:
        return energy, float("nan")
    v = reg_minnorm_correction(problem, mu.positions, vt)
    return energy, float(np.mean(np.sum(v * v, axis=1)))


def _prox_step(problem: Problem, U, vt, dt) -> np.ndarray:
    moved = U + dt * vt
    if problem.reg_weight == 0:
        return moved
    return problem.regularizer.prox(moved, dt * problem.reg_weight)


def _checked_smooth_velocity(problem: Problem, mu: ParticleMeasure, g=None) -> np.ndarray:
    try:
        if g is None:
            g = problem.residual_representer(mu)
        return -problem.adjoint_grad(mu.positions, problem.tags_for(mu, mu.m), g)
    except NonDifferentiableError as exc:
        raise IntegrationError(f"cannot step: {exc}", index=exc.index) from exc


def _advance_state(problem, state: FlowState, new_positions, dt) -> FlowState:
    mu = state.measure.with_positions(new_positions)
    energy, msv = _measure_state(problem, mu)
    t = state.time + dt
    return FlowState(mu, t, state.step_index + 1,
                     state.energy_history + ((t, energy),),
                     state.grad_norm_history + ((t, msv),))


def step_forward_backward(problem: Problem, state: FlowState, dt: float) -> FlowState:
    """One step ``u+ = prox_{dt * reg_weight * V}(u + dt * v_tilde(u))`` per particle."""
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    vt = _checked_smooth_velocity(problem, state.measure)
    return _advance_state(problem, state, _prox_step(problem, state.measure.positions, vt, dt), dt)


def batch_rng(seed: int, step_index: int) -> np.random.Generator:
    """Generator for the mini-batch of a given step (independent of history)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step_index)]))


def _draw_batch(problem: Problem, rng, batch_size: int, sampler: Optional[BatchSampler]):
    if sampler is not None:
        return sampler(rng, batch_size)
    n = problem.n_quad
    if batch_size >= n:
        return problem.X, problem.targets
    idx = rng.integers(0, n, size=batch_size)
    return problem.X[idx], problem.targets[idx]


def _sgd_velocity(problem, mu, batch_size, seed, step_index, sampler):
    if isinstance(problem, SparseDeconvolution) or not hasattr(problem, "X"):
        raise ConfigurationError("mini-batch steps need a network family")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be at least 1")
    X, y = _draw_batch(problem, batch_rng(seed, step_index), batch_size, sampler)
    batch_problem = problem.with_data(X, y)
    return _checked_smooth_velocity(batch_problem, mu)


def step_sgd(problem: Problem, state: FlowState, dt: float, batch_size: int,
             seed: int, sampler: Optional[BatchSampler] = None) -> FlowState:
    """Forward-backward step with the loss gradient taken on a mini-batch.

    The batch for step ``k`` comes from ``SeedSequence([seed, k])``: drawn from
    ``sampler(rng, batch_size)`` when given (a generative teacher), otherwise
    resampled with replacement from the problem's dataset.  A batch at least as
    large as the dataset uses the dataset itself, reproducing the full step.
    Recorded energies are evaluated on the full dataset.
    """
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    vt = _sgd_velocity(problem, state.measure, batch_size, seed, state.step_index, sampler)
    return _advance_state(problem, state, _prox_step(problem, state.measure.positions, vt, dt), dt)


# ---------------------------------------------------------------------------
# Long runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntegratorConfig:
    """Settings for :func:`run`.

    Parameters
    ----------
    method : str
        ``forward_backward`` or ``sgd``.
    dt : float, optional
        Fixed step.  When omitted the step is ``1 / (safety * L)`` with ``L``
        estimated by :func:`estimate_lipschitz` at the initial state, and
        re-estimated every ``refresh_every`` steps if that is set.
    monotone : bool
        Deterministic runs only.  A step that raises the energy by more than
        ``1e-10 * (1 + |F|)`` is undone, ``L`` is re-estimated at the current
        state and the step becomes ``min(1 / (safety * L), dt / 2)``.
    max_steps : int
        Hard cap on the number of steps.
    tolerance : float
        Stop once the mean squared min-norm velocity is at most this value.
    horizon : float, optional
        Stop when the flow time reaches this value (the last step is shortened).
    history_every : int
        Record energy and velocity every this many steps.
    snapshots : bool
        Keep copies of the measure at steps 0, 1, 2, 4, 8, ... and at the end.
    norm_bound : float
        Report the first step where a particle norm exceeds this bound.
    batch_size, sgd_seed : int
        Mini-batch settings for ``method="sgd"``.
    """

    method: str = "forward_backward"
    dt: Optional[float] = None
    safety: float = 10.0
    refresh_every: Optional[int] = None
    monotone: bool = True
    max_steps: int = 10000
    tolerance: float = 1e-10
    horizon: Optional[float] = None
    history_every: int = 1
    snapshots: bool = True
    norm_bound: float = math.inf
    batch_size: int = 64
    sgd_seed: int = 0
    use_kernel: bool = True

    def __post_init__(self):
        if self.method not in ("forward_backward", "sgd"):
            raise ConfigurationError(f"unknown integrator method {self.method!r}")
        if self.dt is not None and not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigurationError("dt must be positive and finite")
        if not self.safety > 0:
            raise ConfigurationError("safety must be positive")
        if self.refresh_every is not None and self.refresh_every < 1:
            raise ConfigurationError("refresh_every must be at least 1")
        if self.max_steps < 0:
            raise ConfigurationError("max_steps must be nonnegative")
        if self.tolerance < 0:
            raise ConfigurationError("tolerance must be nonnegative")
        if self.horizon is not None and not self.horizon >= 0:
            raise ConfigurationError("horizon must be nonnegative")
        if self.history_every < 1:
            raise ConfigurationError("history_every must be at least 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")


ENERGY_SLACK = 1e-10
_MAX_SHRINKS = 60


@dataclass
class RunResult:
    """Final state of a run with its trajectory metadata.

    ``dt_log`` lists ``(step, dt, lipschitz_estimate, reason)`` for every step
    size in use; ``reason`` is ``"fixed"``, ``"initial"``, ``"refresh"`` or
    ``"energy increase"``.
    """

    state: FlowState
    stop_reason: str
    snapshots: list = field(default_factory=list)  # (step, time, ParticleMeasure)
    dt_log: list = field(default_factory=list)
    norm_violation: Optional[tuple] = None  # (step, max norm) of the first excursion


class _Driver:
    """Mutable bookkeeping shared by the kernel and numpy paths of :func:`run`."""

    def __init__(self, problem, cfg: IntegratorConfig, state: FlowState):
        self.problem = problem
        self.cfg = cfg
        self.start = state.step_index
        self.step = state.step_index
        self.time = state.time
        self.energy = list(state.energy_history)
        self.grad = list(state.grad_norm_history)
        self.first_recorded = bool(state.energy_history) and state.energy_history[-1][0] == state.time
        self.snapshots = []
        self.next_snapshot = 1
        self.norm_violation = None
        self.dt_log = []
        self.lip_vec = None
        self.shrinks = 0

    # -- history ---------------------------------------------------------
    def due(self, k: int) -> bool:
        return k % self.cfg.history_every == 0 and not (self.first_recorded and k == self.start)

    def record(self, t, e, v2):
        self.energy.append((t, float(e)))
        self.grad.append((t, float(v2)))

    def take_snapshot(self, mu):
        self.snapshots.append((self.step, self.time, mu))
        while self.next_snapshot <= self.step:
            self.next_snapshot *= 2

    def watch_norms(self, U):
        if self.norm_violation is None and math.isfinite(self.cfg.norm_bound):
            big = float(np.max(np.linalg.norm(U, axis=1)))
            if big > self.cfg.norm_bound:
                self.norm_violation = (self.step, big)

    # -- step size -------------------------------------------------------
    def lipschitz_dt(self, mu):
        est, self.lip_vec = estimate_lipschitz(self.problem, mu, start=self.lip_vec)
        return 1.0 / (self.cfg.safety * max(est, 1e-8)), est

    def shrink(self, mu, dt):
        self.shrinks += 1
        if self.shrinks > _MAX_SHRINKS:
            raise DivergedError(f"no stable step found at step {self.step}", step=self.step)
        new_dt, est = self.lipschitz_dt(mu)
        new_dt = min(new_dt, 0.5 * dt)
        self.dt_log.append((self.step, new_dt, est, "energy increase"))
        return new_dt

    def chunk_length(self, dt, next_refresh, chunk=4096):
        """Steps until the next event (snapshot, refresh, horizon, cap)."""
        cfg = self.cfg
        n = min(cfg.max_steps - (self.step - self.start), chunk)
        if cfg.snapshots:
            n = min(n, self.next_snapshot - self.step)
        if next_refresh is not None:
            n = min(n, next_refresh - self.step)
        if cfg.horizon is not None:
            full = int(math.floor((cfg.horizon - self.time) / dt * (1 + 1e-12)))
            n = min(n, max(full, 1))
        return max(n, 1)


def _stable(e_new, e_old) -> bool:
    return e_new <= e_old + ENERGY_SLACK * (1.0 + abs(e_old))


def run(problem: Problem, init, config: IntegratorConfig = IntegratorConfig(),
        sampler: Optional[BatchSampler] = None) -> RunResult:
    """Integrate the particle flow from ``init`` (an :class:`InitScheme` or a state).

    Stops when ``max_steps`` is reached, the horizon is reached, or the mean
    squared min-norm velocity drops to ``tolerance``.  Raises
    :class:`DivergedError` with the offending step when the energy or the
    positions stop being finite.
    """
    state = initialize(problem, init) if isinstance(init, InitScheme) else init
    cfg = config
    mu0 = state.measure
    U = np.array(mu0.positions)
    tags, masses = mu0.tags, mu0.masses
    drv = _Driver(problem, cfg, state)
    if cfg.snapshots:
        drv.take_snapshot(mu0)
        drv.next_snapshot = max(1, state.step_index + 1)
    drv.watch_norms(U)

    if cfg.dt is None:
        dt, est = drv.lipschitz_dt(mu0)
        drv.dt_log.append((drv.step, dt, est, "initial"))
    else:
        dt = float(cfg.dt)
        drv.dt_log.append((drv.step, dt, None, "fixed"))
    next_refresh = (state.step_index + cfg.refresh_every
                    if cfg.dt is None and cfg.refresh_every else None)
    deterministic = cfg.method == "forward_backward"
    guard = deterministic and cfg.monotone

    use_kernel = deterministic and cfg.use_kernel and isinstance(problem, SparseDeconvolution)
    if use_kernel:
        yhat = problem.target_fourier()
        yr, yi = np.ascontiguousarray(yhat.real), np.ascontiguousarray(yhat.imag)
        rest = float(np.mean(problem.targets ** 2) - yhat[0].real ** 2 - yhat[0].imag ** 2
                     - 2.0 * np.sum(np.abs(yhat[1:]) ** 2))
        w = np.ascontiguousarray(U[:, 0])
        th = np.ascontiguousarray(U[:, 1])
        q = np.ascontiguousarray(masses)
        w_prev, th_prev = w.copy(), th.copy()

    # previous state, for undoing a step that raised the energy
    e_prev = math.nan
    U_prev = U.copy()
    last_dt = dt

    stop_reason = None
    if state.grad_norm_history and state.grad_norm_history[-1][1] <= cfg.tolerance:
        stop_reason = "tolerance"
    while stop_reason is None:
        if drv.step - drv.start >= cfg.max_steps:
            stop_reason = "max_steps"
            break
        if cfg.horizon is not None and cfg.horizon - drv.time <= 1e-9 * dt:
            stop_reason = "horizon"
            break
        if next_refresh is not None and drv.step >= next_refresh:
            cur = np.column_stack([w, th]) if use_kernel else U
            dt, est = drv.lipschitz_dt(ParticleMeasure(cur, masses, tags))
            drv.dt_log.append((drv.step, dt, est, "refresh"))
            next_refresh = drv.step + cfg.refresh_every
        n = drv.chunk_length(dt, next_refresh)
        step_dt = dt
        if cfg.horizon is not None and cfg.horizon - drv.time < dt * (1 - 1e-9):
            n, step_dt = 1, cfg.horizon - drv.time

        if use_kernel:
            energy, msv, done, status = _kernels.deconv_fb_chunk(
                w, th, q, yr, yi, rest, problem.lam, problem.reg_weight, step_dt,
                problem.order, n, cfg.tolerance, w_prev, th_prev, e_prev,
                ENERGY_SLACK if guard else -1.0)
            recorded = done + 1 if status in (_kernels.STATUS_DIVERGED,
                                              _kernels.STATUS_CONVERGED) else done
            for s in range(max(recorded, 0)):
                if drv.due(drv.step + s):
                    drv.record(drv.time + s * step_dt, energy[s], msv[s])
            if status == _kernels.STATUS_DIVERGED:
                raise DivergedError(f"energy is not finite at step {drv.step + done}",
                                    step=drv.step + done)
            if done >= 0:
                drv.step += done
                drv.time += done * step_dt
                if done > 0:
                    e_prev = float(energy[done - 1])
                    last_dt = step_dt
            else:
                # the last step of the previous chunk was undone
                drv.step -= 1
                drv.time -= last_dt
            if status == _kernels.STATUS_INCREASE:
                e_prev = math.nan
                dt = drv.shrink(ParticleMeasure(np.column_stack([w, th]), masses, tags), dt)
                if next_refresh is not None:
                    next_refresh = drv.step + cfg.refresh_every
            elif status == _kernels.STATUS_CONVERGED:
                stop_reason = "tolerance"
            U = np.column_stack([w, th])
        else:
            for _ in range(n):
                mu = ParticleMeasure(U, masses, tags)
                rec = drv.due(drv.step)
                if deterministic or rec:
                    e, v2 = _measure_state(problem, mu)
                    if not (math.isfinite(e) and np.all(np.isfinite(U))):
                        raise DivergedError(f"energy is not finite at step {drv.step}", step=drv.step)
                    if guard and math.isfinite(e_prev) and not _stable(e, e_prev):
                        U = U_prev
                        drv.step -= 1
                        drv.time -= last_dt
                        e_prev = math.nan
                        dt = drv.shrink(ParticleMeasure(U, masses, tags), dt)
                        if next_refresh is not None:
                            next_refresh = drv.step + cfg.refresh_every
                        break
                    if rec:
                        drv.record(drv.time, e, v2)
                    if v2 <= cfg.tolerance:
                        stop_reason = "tolerance"
                        break
                    e_prev = e
                if deterministic:
                    vt = _checked_smooth_velocity(problem, mu)
                else:
                    vt = _sgd_velocity(problem, mu, cfg.batch_size, cfg.sgd_seed, drv.step, sampler)
                U_prev = U
                U = _prox_step(problem, U, vt, step_dt)
                if not np.all(np.isfinite(U)):
                    raise DivergedError(f"positions are not finite after step {drv.step}",
                                        step=drv.step + 1)
                drv.step += 1
                drv.time += step_dt
                last_dt = step_dt
        drv.watch_norms(U)
        if cfg.snapshots and drv.step == drv.next_snapshot:
            drv.take_snapshot(ParticleMeasure(U, masses, tags))

    final_mu = ParticleMeasure(U, masses, tags)
    e, v2 = _measure_state(problem, final_mu)
    if not math.isfinite(e):
        raise DivergedError(f"energy is not finite at step {drv.step}", step=drv.step)
    if guard and math.isfinite(e_prev) and not _stable(e, e_prev) and stop_reason != "tolerance":
        # the very last step raised the energy: undo it rather than report it
        U = U_prev if not use_kernel else np.column_stack([w_prev, th_prev])
        drv.step -= 1
        drv.time -= last_dt
        final_mu = ParticleMeasure(U, masses, tags)
        e, v2 = _measure_state(problem, final_mu)
    if not drv.energy or drv.energy[-1][0] != drv.time:
        drv.record(drv.time, e, v2)
    final = FlowState(final_mu, drv.time, drv.step, tuple(drv.energy), tuple(drv.grad))
    if cfg.snapshots and (not drv.snapshots or drv.snapshots[-1][0] != drv.step):
        drv.snapshots.append((drv.step, drv.time, final_mu))
    return RunResult(final, stop_reason, drv.snapshots, drv.dt_log, drv.norm_violation)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def export_trajectory(result: RunResult, directory, problem: Optional[Problem] = None) -> str:
    """Write ``manifest.json``, ``energy.csv`` and one CSV per snapshot.

    Returns the manifest path.  Output is a pure function of the result, so
    repeated exports are byte-identical.
    """
    os.makedirs(directory, exist_ok=True)
    files = []
    for step, time, mu in result.snapshots:
        name = f"snapshot_{step:09d}.csv"
        with open(os.path.join(directory, name), "w") as fh:
            fh.write(mu.to_csv())
        files.append({"step": int(step), "time": repr(float(time)), "file": name})
    with open(os.path.join(directory, "energy.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time", "energy", "mean_sq_velocity"])
        for (t, e), (_, g) in zip(result.state.energy_history, result.state.grad_norm_history):
            writer.writerow([repr(float(t)), repr(float(e)), repr(float(g))])
    manifest = {
        "family": problem.family if problem is not None else None,
        "m": result.state.measure.m,
        "final_step": int(result.state.step_index),
        "final_time": repr(float(result.state.time)),
        "final_energy": repr(float(result.state.energy)),
        "stop_reason": result.stop_reason,
        "dt_log": [[int(s), repr(float(d)), None if e is None else repr(float(e)), why]
                   for s, d, e, why in result.dt_log],
        "norm_violation": None if result.norm_violation is None
        else [int(result.norm_violation[0]), repr(float(result.norm_violation[1]))],
        "snapshots": files,
        "energy": "energy.csv",
    }
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
