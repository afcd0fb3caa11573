"""Optimality certificates, escape diagnostics and gradient checks.

A nonnegative measure ``mu`` minimizes a convex objective over measures iff
its first variation ``F'(mu)`` is nonnegative everywhere and vanishes on the
support of ``mu``.  Both conditions are checked here on finite grids:

* families that are 1-homogeneous in a weight coordinate ``w`` with
  ``V = |w|`` only need the two slices ``w = +1`` and ``w = -1``;
* 2-homogeneous families only need the unit sphere (one per tag).

The grid is part of every report, because a grid check is a relaxation of
the pointwise condition.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, NonDifferentiableError
from .flow import sphere_directions
from .measures import ParticleMeasure
from .problems import (
    Problem,
    SparseDeconvolution,
    f_prime_grad,
    f_prime_many,
    objective,
    velocity,
)

__all__ = [
    "CertGrid",
    "CertificateReport",
    "EscapeDiagnostics",
    "FiniteDifferenceReport",
    "default_grid",
    "torus_grid",
    "eval_fprime_on_grid",
    "certify",
    "escape_set",
    "support_weights",
    "finite_difference_check",
    "sample_differentiable_points",
]


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CertGrid:
    """Evaluation points for ``F'(mu)``.

    ``kind == "slice"``: ``points`` are parameters ``theta``; ``F'`` is taken
    at ``(+1, theta)`` and ``(-1, theta)``.  ``kind == "sphere"``: ``points``
    are unit vectors, with a tag per point for tagged families.  ``cell`` is
    the nearness radius used by the escape diagnostics; ``periodic`` marks the
    unit torus.
    """

    kind: str
    points: np.ndarray
    cell: float
    tags: Optional[np.ndarray] = None
    periodic: bool = False
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        object.__setattr__(self, "points", pts)
        if pts.shape[0] == 0:
            raise ConfigurationError("empty certification grid")

    @property
    def size(self) -> int:
        return self.points.shape[0]


def torus_grid(n: int) -> CertGrid:
    """``n`` equispaced points on the unit torus."""
    if n < 1:
        raise ConfigurationError("empty certification grid")
    return CertGrid("slice", np.arange(n) / n, 1.0 / n, periodic=True,
                    description={"type": "torus", "points": n})


def default_grid(problem: Problem, mu: ParticleMeasure, size: Optional[int] = None,
                 seed: int = 0) -> CertGrid:
    """Family-dependent default grid.

    Deconvolution: 1024 torus points.  Other 1-homogeneous families: ``size``
    (default 4096) seeded uniform points in a box of half-width three times the
    largest particle parameter norm (at least 1).  2-homogeneous families:
    ``size`` seeded quasi-uniform unit directions per tag.
    """
    if isinstance(problem, SparseDeconvolution):
        return torus_grid(size or 1024)
    size = size or 4096
    if problem.homogeneity == "partial1":
        k = problem.dim - 1
        radius = float(np.max(np.abs(mu.positions[:, 1:]))) if mu.m else 0.0
        half = max(1.0, 3.0 * radius)
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-half, half, size=(size, k))
        cell = 2.0 * half / size ** (1.0 / k)
        return CertGrid("slice", pts, cell, description={
            "type": "box", "half_width": half, "points": size, "seed": seed})
    d = problem.dim
    dirs = sphere_directions(size, d, seed)
    area = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    cell = (area / size) ** (1.0 / max(d - 1, 1))
    tags = None
    if problem.uses_tags:
        dirs = np.vstack([dirs, dirs])
        tags = np.concatenate([np.ones(size), -np.ones(size)])
    return CertGrid("sphere", dirs, cell, tags=tags, description={
        "type": "sphere", "points_per_tag": size, "seed": seed})


def eval_fprime_on_grid(problem: Problem, mu: ParticleMeasure, grid: CertGrid) -> np.ndarray:
    """Values of ``F'(mu)`` on the grid.

    Slice grids return an array of shape ``(2, n)`` (rows ``w = +1`` and
    ``w = -1``); sphere grids return shape ``(n,)``.
    """
    if grid.kind == "slice":
        theta = grid.points
        n = theta.shape[0]
        plus = np.column_stack([np.ones(n), theta])
        minus = np.column_stack([-np.ones(n), theta])
        return np.vstack([f_prime_many(problem, mu, plus), f_prime_many(problem, mu, minus)])
    return f_prime_many(problem, mu, grid.points, grid.tags)


def support_weights(problem: Problem, mu: ParticleMeasure) -> np.ndarray:
    """Per-particle weight used to decide support membership.

    ``mass * |w|`` for weight-homogeneous families, ``mass * |u|^2`` for
    2-homogeneous ones (the mass each particle contributes after projection).
    """
    if problem.homogeneity == "partial1":
        return mu.masses * np.abs(mu.positions[:, 0])
    return mu.masses * np.sum(mu.positions ** 2, axis=1)


# ---------------------------------------------------------------------------
# Certificate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CertificateReport:
    grid_min: float
    support_max_abs: float
    passed: bool
    tolerance: float
    support_threshold: float
    support_size: int
    grid: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def summary(self) -> str:
        verdict = "pass" if self.passed else "fail"
        return (f"{verdict} grid_min={self.grid_min:.6g} "
                f"support_max_abs={self.support_max_abs:.6g} tolerance={self.tolerance:g}")


def certify(problem: Problem, mu: ParticleMeasure, grid: Optional[CertGrid] = None,
            tolerance: float = 1e-3, support_threshold: float = 1e-8) -> CertificateReport:
    """Check ``F'(mu) >= -tolerance`` on the grid and ``|F'(mu)| <= tolerance`` on the support."""
    if not tolerance > 0:
        raise ConfigurationError("tolerance must be positive")
    if grid is None:
        grid = default_grid(problem, mu)
    values = eval_fprime_on_grid(problem, mu, grid)
    grid_min = float(np.min(values))
    support = support_weights(problem, mu) >= support_threshold
    if np.any(support):
        on_support = f_prime_many(problem, mu, mu.positions[support],
                                  None if mu.tags is None else mu.tags[support])
        support_max = float(np.max(np.abs(on_support)))
    else:
        support_max = 0.0
    passed = grid_min >= -tolerance and support_max <= tolerance
    return CertificateReport(grid_min, support_max, bool(passed), float(tolerance),
                             float(support_threshold), int(support.sum()),
                             dict(grid.description))


# ---------------------------------------------------------------------------
# Escape diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EscapeDiagnostics:
    eta: float
    sublevel_mask: np.ndarray  # (2, n) for slices (rows w=+1, w=-1); (n,) for spheres
    escape_mass: float
    verdict: str
    grid_min: float

    @property
    def sublevel_empty(self) -> bool:
        return not bool(np.any(self.sublevel_mask))

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "sublevel_counts": np.asarray(self.sublevel_mask).sum(axis=-1).tolist(),
            "sublevel_empty": self.sublevel_empty,
            "escape_mass": self.escape_mass,
            "verdict": self.verdict,
            "grid_min": self.grid_min,
        }


def _near(grid: CertGrid, sub_points: np.ndarray, query: np.ndarray) -> np.ndarray:
    if sub_points.shape[0] == 0 or query.shape[0] == 0:
        return np.zeros(query.shape[0], dtype=bool)
    if grid.periodic:
        tree = cKDTree(np.mod(sub_points, 1.0), boxsize=1.0)
        query = np.mod(query, 1.0)
    else:
        tree = cKDTree(sub_points)
    dist, _ = tree.query(query, k=1)
    return dist <= grid.cell * (1 + 1e-12)


def escape_set(problem: Problem, mu: ParticleMeasure, eta: Optional[float] = None,
               grid: Optional[CertGrid] = None,
               tolerance: Optional[float] = None) -> EscapeDiagnostics:
    """Sublevel set ``{F'(mu) <= -eta}`` on the grid and the particle mass near it.

    A particle counts toward the escape mass when it is within one grid cell
    of the sublevel set on the slice matching the sign of its weight
    (weight-homogeneous families) or, in the 2-homogeneous case, when its
    direction is within one cell of the sublevel set on the sphere.

    ``eta`` defaults to half of ``max(0, -grid_min)``, but at least ``1e-6``.
    When a certificate ``tolerance`` is given and ``grid_min >= -tolerance``
    the default is ``tolerance`` instead, so a measure that passes the
    certificate has an empty sublevel set.
    Verdicts: ``optimal`` (empty sublevel set), ``escaping`` (positive escape
    mass) and ``stuck-at-non-optimal`` (nonempty set, no mass near it).
    """
    if grid is None:
        grid = default_grid(problem, mu)
    values = eval_fprime_on_grid(problem, mu, grid)
    grid_min = float(np.min(values))
    if eta is None:
        if tolerance is not None and grid_min >= -tolerance:
            eta = float(tolerance)
        else:
            eta = max(0.5 * max(0.0, -grid_min), 1e-6)
    if not eta > 0:
        raise ConfigurationError("eta must be positive")
    mask = values <= -eta
    total = mu.total_mass()
    if grid.kind == "slice":
        w, theta = mu.positions[:, 0], mu.positions[:, 1:]
        near_plus = _near(grid, grid.points[mask[0]], theta) & (w > 0)
        near_minus = _near(grid, grid.points[mask[1]], theta) & (w < 0)
        inside = near_plus | near_minus
    else:
        norms = np.linalg.norm(mu.positions, axis=1)
        inside = np.zeros(mu.m, dtype=bool)
        nz = norms > 0
        dirs = mu.positions[nz] / norms[nz, None]
        if grid.tags is None:
            inside[nz] = _near(grid, grid.points[mask], dirs)
        else:
            ptags = mu.tags[nz]
            hit = np.zeros(dirs.shape[0], dtype=bool)
            for t in (1, -1):
                sel = ptags == t
                gsel = mask & (grid.tags == t)
                hit[sel] = _near(grid, grid.points[gsel], dirs[sel])
            inside[nz] = hit
    escape_mass = float(mu.masses[inside].sum() / total) if total > 0 else 0.0
    escape_mass = min(max(escape_mass, 0.0), 1.0)
    if not np.any(mask):
        verdict = "optimal"
    elif escape_mass > 0:
        verdict = "escaping"
    else:
        verdict = "stuck-at-non-optimal"
    return EscapeDiagnostics(float(eta), mask, escape_mass, verdict, grid_min)


# ---------------------------------------------------------------------------
# Finite-difference validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FiniteDifferenceReport:
    max_rel_error_fprime: float
    max_rel_error_velocity: float
    n_points: int
    step: float
    per_coordinate_fprime: tuple

    @property
    def max_rel_error(self) -> float:
        return max(self.max_rel_error_fprime, self.max_rel_error_velocity)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["max_rel_error"] = self.max_rel_error
        return out


def _rel_err(fd, an) -> float:
    denom = max(np.linalg.norm(an), np.linalg.norm(fd), 1e-300)
    return float(np.linalg.norm(fd - an) / denom)


def _is_smooth_point(problem: Problem, u: np.ndarray, tag: float, h: float) -> bool:
    """True when a box of radius ``h`` around ``u`` avoids every kink."""
    margin = 4.0 * h
    if problem.homogeneity == "partial1" and problem.reg_weight > 0 and not problem.regularizer.smooth:
        if abs(u[0]) <= max(margin, 1e-3):
            return False
    Z = getattr(problem, "Z", None)
    if Z is None:
        return True
    family = problem.family
    if family == "relu_signed_square":
        s = u * np.abs(u)
        pre = Z @ s
        # bound on the change of the pre-activation under an h-perturbation
        slack = np.abs(Z) @ (2.0 * np.abs(u) * h + h * h)
        return bool(np.all(np.abs(pre) > 4.0 * slack))
    if family == "relu_classic":
        if np.all(u[1:] == 0) or abs(u[0]) <= margin:
            return False
        pre = Z @ u[1:]
        slack = np.abs(Z).sum(axis=1) * h
        return bool(np.all(np.abs(pre) > 4.0 * slack))
    return True


def sample_differentiable_points(problem: Problem, count: int, seed: int = 0,
                                 h: float = 1e-5, max_tries: int = 100000):
    """Seeded random points (and tags) away from every kink of the problem.

    Returns ``(points, tags)``; ``tags`` is ``None`` for untagged families.
    """
    rng = np.random.default_rng(seed)
    pts, tags = [], []
    tries = 0
    while len(pts) < count:
        tries += 1
        if tries > max_tries:
            raise ConfigurationError("could not sample enough differentiable points")
        u = rng.standard_normal(problem.dim)
        if isinstance(problem, SparseDeconvolution):
            u[1] = rng.random()
        tag = 1.0 if rng.random() < 0.5 else -1.0
        if _is_smooth_point(problem, u, tag, h):
            pts.append(u)
            tags.append(tag)
    return np.array(pts), (np.array(tags) if problem.uses_tags else None)


def finite_difference_check(problem: Problem, mu: Optional[ParticleMeasure] = None,
                            points=None, tags=None, n_points: int = 100, seed: int = 0,
                            h: float = 1e-5) -> FiniteDifferenceReport:
    """Compare analytic derivatives with central differences of step ``h``.

    Two checks are run.  ``f_prime_grad`` at each test point against central
    differences of ``f_prime`` at fixed ``mu``, and ``velocity(mu)`` against
    ``-m`` times central differences of the discretized objective ``F_m``.
    Errors are ``|fd - an| / max(|an|, |fd|)`` per point (Euclidean norms).

    Missing ``mu`` or ``points`` are drawn with
    :func:`sample_differentiable_points` (``mu`` gets 5 particles).
    """
    if points is None:
        points, tags = sample_differentiable_points(problem, n_points, seed, h)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if problem.uses_tags and tags is None:
        raise ConfigurationError(f"{problem.family} needs tags for the test points")
    if mu is None:
        upos, utags = sample_differentiable_points(problem, 5, seed + 1, h)
        mu = ParticleMeasure.uniform(upos, utags)

    d = problem.dim
    worst = 0.0
    per_coord = np.zeros(d)
    for i, u in enumerate(points):
        tag = 1 if tags is None else int(tags[i])
        try:
            an = f_prime_grad(problem, mu, u, tag)
        except NonDifferentiableError:
            continue
        batch = np.repeat(u[None, :], 2 * d, axis=0)
        for j in range(d):
            batch[2 * j, j] += h
            batch[2 * j + 1, j] -= h
        btags = None if tags is None else np.full(2 * d, tag)
        vals = f_prime_many(problem, mu, batch, btags)
        fd = (vals[0::2] - vals[1::2]) / (2 * h)
        scale = max(np.linalg.norm(an), np.linalg.norm(fd), 1e-300)
        per_coord = np.maximum(per_coord, np.abs(fd - an) / scale)
        worst = max(worst, _rel_err(fd, an))

    # velocity against finite differences of F_m
    U = np.array(mu.positions)
    m = mu.m
    an_v = velocity(problem, mu)
    fd_v = np.zeros_like(U)
    for i in range(m):
        for j in range(d):
            up, dn = U.copy(), U.copy()
            up[i, j] += h
            dn[i, j] -= h
            fd_v[i, j] = (objective(problem, mu.with_positions(up))
                          - objective(problem, mu.with_positions(dn))) / (2 * h)
    # masses 1/m: velocity = -m grad F_m; for general masses scale row-wise
    fd_vel = -fd_v / mu.masses[:, None]
    worst_v = max(_rel_err(fd_vel[i], an_v[i]) for i in range(m))
    return FiniteDifferenceReport(float(worst), float(worst_v), int(points.shape[0]), float(h),
                                  tuple(float(x) for x in per_coord))
