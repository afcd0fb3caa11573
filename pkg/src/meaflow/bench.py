"""Benchmark harnesses: teachers, the fixed-grid baseline and the sweeps."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .certificates import certify
from .errors import (
    ConfigurationError,
    DivergedError,
    InfeasibleSeparationError,
    IntegrationError,
    UnsupportedConfigurationError,
)
from .flow import InitScheme, IntegratorConfig, initialize, run
from .measures import ParticleMeasure, replicate, w2_distance
from .problems import (
    LogisticLoss,
    Problem,
    QuadraticLoss,
    ReluNetClassic,
    ReluNetSignedSquare,
    SigmoidNet,
    SparseDeconvolution,
    dirichlet_kernel,
    objective,
)

__all__ = [
    "TeacherModel",
    "make_teacher",
    "BaselineResult",
    "fixed_grid_baseline",
    "BenchmarkRecord",
    "SweepConfig",
    "SweepResult",
    "run_cell",
    "particle_complexity_sweep",
    "consistency_sweep",
    "geometric_mean",
]

EXCESS_FLOOR = 1e-10
_NET_FAMILIES = {
    "sigmoid": SigmoidNet,
    "relu_signed_square": ReluNetSignedSquare,
    "relu_classic": ReluNetClassic,
}


# ---------------------------------------------------------------------------
# Teachers
# ---------------------------------------------------------------------------


def _torus_gaps(pos: np.ndarray) -> float:
    if pos.shape[0] < 2:
        return math.inf
    d = np.abs((pos[:, None] - pos[None, :] + 0.5) % 1.0 - 0.5)
    np.fill_diagonal(d, np.inf)
    return float(d.min())


@dataclass(frozen=True, eq=False)
class TeacherModel:
    """Ground truth generating the data of a benchmark instance.

    Deconvolution: spikes at ``positions`` (on the torus) with signed
    ``weights``.  Networks: ``f(x) = sum_j weights[j] * act(positions[j] . (x, 1))``
    with inputs standard normal (``input_law="gaussian"``) or uniform on the
    unit sphere (``input_law="sphere"``).
    """

    family: str
    positions: np.ndarray
    weights: np.ndarray
    noise: float
    seed: int
    activation: str = "relu"
    input_law: str = "gaussian"

    @property
    def m0(self) -> int:
        return self.weights.shape[0]

    @property
    def input_dim(self) -> int:
        return self.positions.shape[1] - 1

    def draw_inputs(self, rng: np.random.Generator, n: int) -> np.ndarray:
        X = rng.standard_normal((n, self.input_dim))
        if self.input_law == "sphere":
            X /= np.linalg.norm(X, axis=1, keepdims=True)
        return X

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        pre = np.column_stack([X, np.ones(X.shape[0])]) @ self.positions.T
        act = np.maximum(pre, 0.0) if self.activation == "relu" else expit(pre)
        return act @ self.weights

    def sample(self, rng: np.random.Generator, n: int):
        """Fresh ``(X, y)`` pairs, labels with additive Gaussian noise."""
        X = self.draw_inputs(rng, n)
        y = self.predict(X)
        if self.noise > 0:
            y = y + self.noise * rng.standard_normal(n)
        return X, y

    def measure(self, order: int = 7) -> ParticleMeasure:
        """Deconvolution teacher as a particle measure with masses ``1/m0``."""
        if self.family != "deconvolution":
            raise ConfigurationError("only deconvolution teachers lift to a particle measure")
        m0 = self.m0
        return ParticleMeasure.uniform(np.column_stack([m0 * self.weights, self.positions[:, 0]]))


def _active_fraction_ok(b, Xprobe, lo, hi) -> bool:
    frac = np.mean(np.column_stack([Xprobe, np.ones(len(Xprobe))]) @ b > 0)
    return lo <= frac <= hi


def make_teacher(family: str, m0: int, seed: int, noise: float = 0.0, *,
                 n: int = 256, order: int = 7, lam: float = 1.0, reg_weight: Optional[float] = None,
                 input_dim: int = 1, n_test: int = 4096, min_separation: float = 0.1,
                 weight_range=(0.5, 1.5), normalize: bool = False,
                 active_range=(0.2, 0.8), loss: str = "quadratic"):
    """Build a teacher and the matching problem instance.

    Deconvolution: ``m0`` spike positions are drawn uniformly on the torus,
    rejecting draws until every pair is at least ``min_separation`` apart; the
    magnitudes are uniform in ``weight_range`` with random signs.  The target
    is the filtered spike train on an ``n``-point grid plus Gaussian noise.

    Networks: hidden weights are standard normal, each neuron redrawn until the
    fraction of inputs that activate it lies in ``active_range`` (ReLU only);
    output weights are standard normal.  With ``normalize`` the hidden weight
    rows have unit norm and output weights are scaled by ``1/sqrt(m0)``.  The
    returned problem uses ``n_test`` held-out samples as its quadrature.

    Returns
    -------
    teacher : TeacherModel
    problem : Problem
    """
    if m0 < 1:
        raise ConfigurationError("teacher needs m0 >= 1")
    rng = np.random.default_rng(seed)
    if family == "deconvolution":
        for _ in range(100000):
            pos = rng.random(m0)
            if _torus_gaps(pos) >= min_separation:
                break
        else:
            raise InfeasibleSeparationError(
                f"no {m0} spikes with separation {min_separation} after 100000 draws")
        lo, hi = weight_range
        weights = rng.uniform(lo, hi, m0) * np.where(rng.random(m0) < 0.5, -1.0, 1.0)
        grid = np.arange(n) / n
        y = sum(a * dirichlet_kernel(grid - t, order) for a, t in zip(weights, pos))
        y = y + noise * rng.standard_normal(n)
        teacher = TeacherModel(family, pos[:, None], weights, float(noise), int(seed))
        problem = SparseDeconvolution(y, order=order, lam=lam,
                                      reg_weight=1.0 if reg_weight is None else reg_weight)
        return teacher, problem
    if family not in _NET_FAMILIES:
        raise ConfigurationError(f"unknown family {family!r}")
    activation = "sigmoid" if family == "sigmoid" else "relu"
    input_law = "sphere" if family == "sigmoid" else "gaussian"
    k = input_dim + 1
    probe_rng = np.random.default_rng([seed, 2])
    probe = probe_rng.standard_normal((4096, input_dim))
    if input_law == "sphere":
        probe /= np.linalg.norm(probe, axis=1, keepdims=True)
    rows = []
    for _ in range(m0):
        for _attempt in range(100000):
            b = rng.standard_normal(k)
            if normalize:
                b /= np.linalg.norm(b)
            if activation != "relu" or _active_fraction_ok(b, probe, *active_range):
                break
        else:
            raise InfeasibleSeparationError("could not draw a teacher neuron in the activity range")
        rows.append(b)
    a = rng.standard_normal(m0)
    if normalize:
        a /= math.sqrt(m0)
    teacher = TeacherModel(family, np.array(rows), a, float(noise), int(seed),
                           activation=activation, input_law=input_law)
    X, y = teacher.sample(np.random.default_rng([seed, 1]), n_test)
    loss_obj = QuadraticLoss(lam) if loss == "quadratic" else LogisticLoss()
    if loss == "logistic":
        y = np.where(y >= 0, 1.0, -1.0)
    problem = _NET_FAMILIES[family](X, y, loss=loss_obj,
                                    reg_weight=0.0 if reg_weight is None else reg_weight)
    return teacher, problem


# ---------------------------------------------------------------------------
# Fixed-grid convex baseline
# ---------------------------------------------------------------------------


@dataclass
class BaselineResult:
    objective: float
    weights: np.ndarray
    iterations: int
    converged: bool
    step_halvings: int = 0


def _grid_columns(problem: Problem, positions, tags=None) -> np.ndarray:
    P = np.asarray(positions, dtype=float)
    P = P[:, None] if P.ndim == 1 else np.atleast_2d(P)
    if problem.homogeneity == "partial1":
        if P.shape[1] == problem.dim - 1:
            P = np.column_stack([np.ones(P.shape[0]), P])
        else:
            P = np.column_stack([np.ones(P.shape[0]), P[:, 1:]])
    return problem.features(P, problem.tags_for(tags, P.shape[0]) if problem.uses_tags else None)


def fixed_grid_baseline(problem: Problem, positions, max_iters: int = 100000,
                        tol: float = 1e-10, tags=None,
                        fit_problem: Optional[Problem] = None) -> BaselineResult:
    """Optimize only the signed weights of particles frozen at ``positions``.

    Solves ``min_c R(sum_j c_j phi_j) + reg_weight * sum_j |c_j|`` where
    ``phi_j`` is the feature of grid point ``j`` at unit weight (for
    2-homogeneous families, the feature of the frozen particle itself).  With
    a quadratic loss and no regularization the problem is a least-squares fit
    solved directly.  Otherwise accelerated proximal gradient with
    function-value restarts runs until the proximal gradient mapping is below
    ``tol``; the step is halved (up to 30 times) whenever the iterates blow up.

    ``fit_problem`` (same family, different data) is used for fitting when
    given; the reported objective is always evaluated on ``problem``.
    """
    fit = problem if fit_problem is None else fit_problem
    if problem.homogeneity == "two" and problem.reg_weight > 0:
        raise UnsupportedConfigurationError(
            "the weights-only baseline needs reg_weight = 0 for 2-homogeneous families")
    A = _grid_columns(fit, positions, tags)
    qw, y = fit.quad_weights, fit.targets
    reg = fit.reg_weight if fit.homogeneity == "partial1" else 0.0
    m = A.shape[1]

    def evaluate(c):
        A_eval = A if fit is problem else _grid_columns(problem, positions, tags)
        f = A_eval @ c
        return problem.loss.value(f, problem.targets, problem.quad_weights) + reg * np.abs(c).sum()

    if isinstance(fit.loss, QuadraticLoss) and reg == 0:
        sw = np.sqrt(qw)
        c, *_ = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)
        return BaselineResult(float(evaluate(c)), c, 1, True)

    if isinstance(fit.loss, QuadraticLoss):
        G = (A * qw[:, None]).T @ A / fit.loss.lam
        b = (A * qw[:, None]).T @ y / fit.loss.lam
        const = fit.loss.value(np.zeros_like(y), y, qw)

        def smooth(c):
            return 0.5 * c @ G @ c - b @ c + const

        def grad(c):
            return G @ c - b

        lip = float(np.linalg.eigvalsh(G)[-1]) if m else 0.0
    else:
        def smooth(c):
            return fit.loss.value(A @ c, y, qw)

        def grad(c):
            return A.T @ (qw * fit.loss.grad(A @ c, y))

        lip = 0.25 * float(np.linalg.eigvalsh((A * qw[:, None]).T @ A)[-1])

    def prox(c, s):
        return np.sign(c) * np.maximum(np.abs(c) - s * reg, 0.0)

    def total(c):
        return smooth(c) + reg * np.abs(c).sum()

    step = 1.0 / max(lip, 1e-300)
    halvings = 0
    while True:
        c = np.zeros(m)
        z = c.copy()
        t = 1.0
        f_prev = total(c)
        f0 = f_prev
        blown = False
        converged = False
        restarted = True
        it = 0
        for it in range(1, max_iters + 1):
            c_new = prox(z - step * grad(z), step)
            f_new = total(c_new)
            if not math.isfinite(f_new) or f_new > 1e6 * (1.0 + abs(f0)):
                blown = True
                break
            if f_new > f_prev and not restarted:
                # momentum overshot: take the next step from the last iterate
                z = c.copy()
                t = 1.0
                restarted = True
                continue
            # gradient mapping at the point the step was taken from
            gm = (z - c_new) / step
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            z = c_new + ((t - 1.0) / t_new) * (c_new - c)
            c, t, f_prev = c_new, t_new, f_new
            restarted = False
            if np.max(np.abs(gm)) <= tol:
                converged = True
                break
        if not blown:
            return BaselineResult(float(evaluate(c)), c, it, converged, halvings)
        halvings += 1
        if halvings > 30:
            raise DivergedError("fixed-grid baseline diverged after 30 step halvings")
        step *= 0.5


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkRecord:
    family: str
    method: str  # "particle-flow" or "fixed-grid"
    m: int
    seed: int
    objective: float
    excess_loss: float = math.nan
    wallclock_ms: float = 0.0
    certified: Optional[bool] = None
    status: str = "ok"
    # terminal particle measure of a flow cell; kept in memory only
    final_measure: Optional[ParticleMeasure] = field(default=None, repr=False, compare=False)

    def to_row(self, with_wallclock: bool = True) -> list:
        cert = "" if self.certified is None else str(bool(self.certified)).lower()
        wall = f"{self.wallclock_ms:.3f}" if with_wallclock else ""
        return [self.family, self.method, self.m, self.seed, repr(float(self.excess_loss)),
                wall, cert, repr(float(self.objective)), self.status]


CSV_HEADER = ["family", "method", "m", "seed", "excess_loss", "wallclock_ms", "certified",
              "objective", "status"]


@dataclass(frozen=True)
class SweepConfig:
    """Settings shared by every cell of a particle-complexity sweep.

    ``teacher`` holds keyword arguments of :func:`make_teacher` (besides the
    family and seed); ``init`` those of :class:`InitScheme` (besides ``m``).
    ``reference`` is ``"best"`` (best certified value per seed, otherwise the
    best value seen) or ``"zero"`` (known optimum 0, realizable teachers).
    """

    family: str = "deconvolution"
    m0: int = 5
    teacher: dict = field(default_factory=lambda: {"noise": 1e-3})
    init: dict = field(default_factory=lambda: {"kind": "grid_zero_slice"})
    integrator: IntegratorConfig = IntegratorConfig()
    certificate_tolerance: float = 1e-3
    reference: str = "best"
    baseline: bool = True
    baseline_fit_samples: int = 20000
    baseline_max_iters: int = 100000
    certify_nets: bool = False


@dataclass
class SweepResult:
    records: list
    geometric_means: dict  # {method: {m: value}}

    def to_csv(self, with_wallclock: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow(r.to_row(with_wallclock))
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "geometric_mean_excess": {
                meth: {str(m): repr(v) for m, v in sorted(d.items())}
                for meth, d in sorted(self.geometric_means.items())
            },
            "excess_floor": EXCESS_FLOOR,
            "records": len(self.records),
        }


def geometric_mean(values: Sequence[float], floor: float = EXCESS_FLOOR) -> float:
    """Geometric mean of finite values after clipping below at ``floor``."""
    v = np.array([x for x in values if math.isfinite(x)], dtype=float)
    if v.size == 0:
        return math.nan
    return float(np.exp(np.mean(np.log(np.maximum(v, floor)))))


def _teacher_for(cfg: SweepConfig, seed: int):
    return make_teacher(cfg.family, cfg.m0, seed, **cfg.teacher)


def run_cell(cfg: SweepConfig, m: int, seed: int) -> list:
    """Particle flow and (optionally) fixed-grid baseline for one ``(m, seed)``."""
    teacher, problem = _teacher_for(cfg, seed)
    records = []
    init_kw = dict(cfg.init)
    init_kw.setdefault("seed", seed)
    scheme = InitScheme(m=m, **init_kw)
    sampler = teacher.sample if cfg.integrator.method == "sgd" else None
    integ = cfg.integrator
    if integ.method == "sgd":
        integ = replace(integ, sgd_seed=int(seed))
    t0 = time.perf_counter()
    try:
        state0 = initialize(problem, scheme)
        result = run(problem, state0, integ, sampler=sampler)
        final = result.state.measure
        value = objective(problem, final)
        cert = None
        if problem.homogeneity == "partial1" or cfg.certify_nets:
            cert = certify(problem, result.state.measure,
                           tolerance=cfg.certificate_tolerance).passed
        status = "ok"
    except (DivergedError, IntegrationError) as exc:
        value, cert, status = math.nan, None, f"failed: {type(exc).__name__}"
        final = None
    records.append(BenchmarkRecord(cfg.family, "particle-flow", m, seed, float(value),
                                   wallclock_ms=1e3 * (time.perf_counter() - t0),
                                   certified=cert, status=status, final_measure=final))
    if cfg.baseline:
        t0 = time.perf_counter()
        state0 = initialize(problem, scheme)
        pos = state0.measure.positions
        fit_problem = None
        if isinstance(problem, (SigmoidNet, ReluNetClassic, ReluNetSignedSquare)):
            X, y = teacher.sample(np.random.default_rng([seed, 3]), cfg.baseline_fit_samples)
            fit_problem = problem.with_data(X, y)
        try:
            base = fixed_grid_baseline(problem, pos, max_iters=cfg.baseline_max_iters,
                                       tags=state0.measure.tags, fit_problem=fit_problem)
            value, status = base.objective, "ok" if base.converged else "ok: iteration cap"
        except DivergedError as exc:
            value, status = math.nan, f"failed: {type(exc).__name__}"
        records.append(BenchmarkRecord(cfg.family, "fixed-grid", m, seed, float(value),
                                       wallclock_ms=1e3 * (time.perf_counter() - t0),
                                       status=status))
    return records


def _cell_job(args):
    cfg, m, seed = args
    return run_cell(cfg, m, seed)


def _assign_excess(cfg: SweepConfig, records: list) -> None:
    by_seed = {}
    for r in records:
        by_seed.setdefault(r.seed, []).append(r)
    tol = cfg.certificate_tolerance
    for seed, recs in by_seed.items():
        if cfg.reference == "zero":
            ref = 0.0
        else:
            finite = [r.objective for r in recs if math.isfinite(r.objective)]
            certified = [r.objective for r in recs if r.certified and math.isfinite(r.objective)]
            ref = min(certified) if certified else (min(finite) if finite else math.nan)
        for r in recs:
            r.excess_loss = r.objective - ref if math.isfinite(r.objective) else math.nan
            if math.isfinite(r.excess_loss) and r.excess_loss < -10 * tol:
                r.status = "below reference"


def particle_complexity_sweep(cfg: SweepConfig, m_list: Sequence[int], seeds: Sequence[int],
                              threads: int = 1) -> SweepResult:
    """Run flow and baseline for every ``(m, seed)`` and summarize excess losses.

    Cells are independent; with ``threads > 1`` they run in a process pool.
    Records are ordered by ``(m, seed, method)`` regardless of completion
    order, so the output does not depend on the number of workers.
    """
    if not m_list:
        raise ConfigurationError("empty m list")
    jobs = [(cfg, int(m), int(s)) for m in m_list for s in seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_cell_job, jobs))
    else:
        chunks = [_cell_job(j) for j in jobs]
    records = [r for chunk in chunks for r in chunk]
    order = {"particle-flow": 0, "fixed-grid": 1}
    records.sort(key=lambda r: (r.m, r.seed, order.get(r.method, 2)))
    _assign_excess(cfg, records)
    means = {}
    for r in records:
        means.setdefault(r.method, {}).setdefault(r.m, []).append(r.excess_loss)
    gm = {meth: {m: geometric_mean(v) for m, v in d.items()} for meth, d in means.items()}
    return SweepResult(records, gm)


def consistency_sweep(problem: Problem, m_list: Sequence[int], horizon: float,
                      integrator: Optional[IntegratorConfig] = None, factor: int = 4,
                      init_kind: str = "grid_zero_slice", cache: Optional[dict] = None):
    """``W2`` between flows with ``m`` and ``factor * m`` particles at time ``horizon``.

    Both flows start from nested grids (the ``m`` grid is a sub-grid of the
    ``factor * m`` grid), run with the same integrator settings up to the
    horizon, and are compared after splitting each of the ``m`` particles into
    ``factor`` copies.  Positions are compared in the unwrapped coordinates.

    ``cache`` (a dict) lets callers share terminal states between sweeps.
    Returns a list of ``(m, distance)`` pairs.
    """
    if integrator is None:
        integrator = IntegratorConfig(dt=None, safety=0.55, max_steps=10**8, tolerance=0.0,
                                      snapshots=False, history_every=10**9)
    integrator = replace(integrator, horizon=horizon, tolerance=0.0)
    cache = {} if cache is None else cache

    def terminal(m):
        if m not in cache:
            scheme = InitScheme(init_kind, m)
            cache[m] = run(problem, scheme, integrator).state.measure
        return cache[m]

    out = []
    for m in m_list:
        coarse = replicate(terminal(int(m)), factor)
        fine = terminal(int(factor * m))
        out.append((int(m), w2_distance(coarse, fine)))
    return out
