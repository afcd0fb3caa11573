"""Particle measures, lifting projections and transport distances."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog

from .errors import ConfigurationError, DimensionError, UnsupportedConfigurationError

__all__ = [
    "ParticleMeasure",
    "SignedAtomicMeasure",
    "h1_project",
    "h2_project",
    "w2_distance",
    "bl_distance_grid",
    "total_variation_of_lift",
    "replicate",
]

_MAX_ASSIGNMENT = 512


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ParticleMeasure:
    """Atomic nonnegative measure ``sum_i masses[i] * delta(positions[i])``.

    ``tags`` optionally carries an immutable +1/-1 label per particle, used by
    families whose domain is a disjoint union of two copies of R^d.
    """

    positions: np.ndarray
    masses: np.ndarray
    tags: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float, copy=True)
        if pos.ndim == 1:
            pos = pos[:, None]
        if pos.ndim != 2:
            raise DimensionError("positions must be an (m, d) array")
        masses = np.array(self.masses, dtype=float, copy=True).reshape(-1)
        if pos.shape[0] != masses.shape[0]:
            raise DimensionError(
                f"{pos.shape[0]} positions but {masses.shape[0]} masses")
        if pos.shape[0] < 1:
            raise DimensionError("a particle measure needs at least one atom")
        if np.any(masses < 0) or not np.all(np.isfinite(masses)):
            raise ValueError("masses must be finite and nonnegative")
        pos.setflags(write=False)
        masses.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "masses", masses)
        if self.tags is not None:
            tags = np.array(self.tags, dtype=np.int8).reshape(-1)
            if tags.shape[0] != masses.shape[0] or not np.all(np.abs(tags) == 1):
                raise ValueError("tags must hold one +1/-1 entry per particle")
            tags.setflags(write=False)
            object.__setattr__(self, "tags", tags)

    @classmethod
    def uniform(cls, positions, tags=None) -> "ParticleMeasure":
        positions = np.asarray(positions, dtype=float)
        m = positions.shape[0]
        return cls(positions, np.full(m, 1.0 / m), tags)

    @property
    def m(self) -> int:
        return self.positions.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.positions.shape[1]

    def total_mass(self) -> float:
        return float(self.masses.sum())

    def is_probability(self, atol: float = 1e-12) -> bool:
        return abs(self.total_mass() - 1.0) <= atol

    def with_positions(self, positions) -> "ParticleMeasure":
        return ParticleMeasure(positions, self.masses, self.tags)

    def mixture(self, other: "ParticleMeasure", t: float) -> "ParticleMeasure":
        """The measure ``(1 - t) * self + t * other`` (atoms concatenated)."""
        tags = None
        if self.tags is not None or other.tags is not None:
            tags = np.concatenate([_tags_or_ones(self), _tags_or_ones(other)])
        return ParticleMeasure(
            np.vstack([self.positions, other.positions]),
            np.concatenate([(1 - t) * self.masses, t * other.masses]),
            tags,
        )

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        d = {"positions": self.positions.tolist(), "masses": self.masses.tolist()}
        if self.tags is not None:
            d["tags"] = [int(t) for t in self.tags]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ParticleMeasure":
        extra = set(d) - {"positions", "masses", "tags"}
        if extra:
            raise ConfigurationError(f"unknown measure keys: {sorted(extra)}")
        return cls(np.asarray(d["positions"], dtype=float), d["masses"], d.get("tags"))

    def to_json(self) -> str:
        # repr() of a Python float round-trips exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ParticleMeasure":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = [f"x{j}" for j in range(self.ambient_dim)] + ["mass"]
        if self.tags is not None:
            header.append("tag")
        writer.writerow(header)
        for i in range(self.m):
            row = [repr(float(v)) for v in self.positions[i]] + [repr(float(self.masses[i]))]
            if self.tags is not None:
                row.append(str(int(self.tags[i])))
            writer.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ParticleMeasure":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], [r for r in rows[1:] if r]
        has_tag = header[-1] == "tag"
        d = len(header) - (2 if has_tag else 1)
        data = [[float(v) for v in r[: d + 1]] for r in body]
        arr = np.array(data, dtype=float).reshape(len(body), d + 1)
        tags = [int(r[-1]) for r in body] if has_tag else None
        return cls(arr[:, :d], arr[:, d], tags)

    def save(self, path) -> None:
        path = str(path)
        with open(path, "w") as fh:
            fh.write(self.to_csv() if path.endswith(".csv") else self.to_json())

    @classmethod
    def load(cls, path) -> "ParticleMeasure":
        path = str(path)
        with open(path) as fh:
            text = fh.read()
        return cls.from_csv(text) if path.endswith(".csv") else cls.from_json(text)


def _tags_or_ones(mu: ParticleMeasure) -> np.ndarray:
    return mu.tags if mu.tags is not None else np.ones(mu.m, dtype=np.int8)


@dataclass(frozen=True, eq=False)
class SignedAtomicMeasure:
    """Signed atomic measure on the parameter space Theta."""

    locations: np.ndarray
    signed_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        loc = np.array(self.locations, dtype=float, copy=True)
        if loc.ndim == 1:
            loc = loc[:, None]
        wts = np.array(self.signed_weights, dtype=float, copy=True).reshape(-1)
        if loc.shape[0] != wts.shape[0]:
            raise DimensionError("locations and weights differ in length")
        loc.setflags(write=False)
        wts.setflags(write=False)
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "signed_weights", wts)

    @property
    def dim(self) -> int:
        return self.locations.shape[1]

    def total_variation(self) -> float:
        """Total variation norm, merging atoms at bitwise-equal locations first."""
        merged = _merge_atoms(self.locations, self.signed_weights)
        return float(np.abs(merged.signed_weights).sum())

    def integrate(self, fn) -> float:
        return float(sum(w * fn(x) for x, w in zip(self.locations, self.signed_weights)))


def _merge_atoms(locations: np.ndarray, weights: np.ndarray) -> SignedAtomicMeasure:
    if locations.shape[0] == 0:
        return SignedAtomicMeasure(locations.reshape(0, max(1, locations.shape[1])), weights)
    # np.unique on rows compares exact float values: no tolerance by design
    uniq, inverse = np.unique(locations, axis=0, return_inverse=True)
    merged = np.zeros(uniq.shape[0])
    np.add.at(merged, inverse.reshape(-1), weights)
    return SignedAtomicMeasure(uniq, merged)


def h1_project(mu: ParticleMeasure) -> SignedAtomicMeasure:
    """Project a measure on R x Theta to a signed measure on Theta.

    Particle ``((w, theta), q)`` becomes an atom at ``theta`` with weight ``w*q``.
    """
    if mu.ambient_dim < 2:
        raise DimensionError("h1 projection needs ambient dimension >= 2")
    return _merge_atoms(mu.positions[:, 1:], mu.positions[:, 0] * mu.masses)


def h2_project(mu: ParticleMeasure) -> ParticleMeasure | None:
    """Project onto the unit sphere with mass ``q |u|^2``.

    Atoms at the origin carry no mass.  Returns ``None`` when every atom sits
    at the origin (the zero measure).
    """
    norms = np.linalg.norm(mu.positions, axis=1)
    keep = norms > 0
    if not np.any(keep):
        return None
    dirs = mu.positions[keep] / norms[keep, None]
    tags = mu.tags[keep] if mu.tags is not None else None
    return ParticleMeasure(dirs, mu.masses[keep] * norms[keep] ** 2, tags)


def total_variation_of_lift(mu: ParticleMeasure) -> float:
    """``sum_i q_i |w_i|``: an upper bound on the total variation of ``h1(mu)``."""
    return float(np.sum(mu.masses * np.abs(mu.positions[:, 0])))


def replicate(mu: ParticleMeasure, factor: int) -> ParticleMeasure:
    """Split every atom into ``factor`` equal copies (same measure, more atoms)."""
    tags = np.repeat(mu.tags, factor) if mu.tags is not None else None
    return ParticleMeasure(
        np.repeat(mu.positions, factor, axis=0), np.repeat(mu.masses / factor, factor), tags)


def _w2_1d(x, a, y, b) -> float:
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    x, a, y, b = x[ix], a[ix], y[iy], b[iy]
    ca, cb = np.cumsum(a), np.cumsum(b)
    ca[-1] = cb[-1] = 1.0
    # walk the merged quantile breakpoints
    t = np.union1d(ca, cb)
    t = t[t > 0]
    lower = np.concatenate([[0.0], t[:-1]])
    mass = t - lower
    mid = 0.5 * (t + lower)
    qx = x[np.minimum(np.searchsorted(ca, mid), len(x) - 1)]
    qy = y[np.minimum(np.searchsorted(cb, mid), len(y) - 1)]
    return float(np.sqrt(max(0.0, np.sum(mass * (qx - qy) ** 2))))


def w2_distance(mu: ParticleMeasure, nu: ParticleMeasure) -> float:
    """Quadratic Wasserstein distance between two particle probability measures.

    One-dimensional measures use the sorted-quantile coupling and accept any
    masses.  In higher dimension both measures must have the same number of
    atoms with uniform masses; the optimal coupling is then a permutation,
    found by exact assignment (at most 512 atoms).
    """
    if mu.ambient_dim != nu.ambient_dim:
        raise DimensionError("measures live in different dimensions")
    for name, rho in (("mu", mu), ("nu", nu)):
        if not rho.is_probability(1e-9):
            raise UnsupportedConfigurationError(f"{name} is not a probability measure")
    if mu.ambient_dim == 1:
        return _w2_1d(mu.positions[:, 0], mu.masses, nu.positions[:, 0], nu.masses)
    if mu.m != nu.m or not (_is_uniform(mu) and _is_uniform(nu)):
        raise UnsupportedConfigurationError(
            "d >= 2 requires equal atom counts with uniform masses")
    if mu.m > _MAX_ASSIGNMENT:
        raise UnsupportedConfigurationError(f"exact assignment limited to {_MAX_ASSIGNMENT} atoms")
    diff = mu.positions[:, None, :] - nu.positions[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].sum() / mu.m))


def _is_uniform(mu: ParticleMeasure) -> bool:
    return bool(np.all(np.abs(mu.masses - 1.0 / mu.m) <= 1e-12))


def _grid_edges(grid: np.ndarray) -> list[tuple[int, int, float]]:
    """Pairs whose slope constraints make the grid values extend to a
    1-Lipschitz function: consecutive points in 1D, every pair in 2D."""
    if grid.shape[1] == 1:
        order = np.argsort(grid[:, 0], kind="stable")
        return [
            (int(order[k]), int(order[k + 1]), float(grid[order[k + 1], 0] - grid[order[k], 0]))
            for k in range(len(order) - 1)
        ]
    n = grid.shape[0]
    i, j = np.triu_indices(n, k=1)
    lengths = np.linalg.norm(grid[i] - grid[j], axis=1)
    return list(zip(i.tolist(), j.tolist(), lengths.tolist()))


def bl_distance_grid(mu: SignedAtomicMeasure, nu: SignedAtomicMeasure, grid) -> float:
    """Grid lower bound on the bounded-Lipschitz norm of ``mu - nu``.

    Maximizes ``sum_k phi_k (mu - nu)({g_k})`` over grid values ``phi`` with
    ``|phi| <= 1`` and ``|phi_i - phi_j| <= |g_i - g_j|``.  Any such grid
    function extends to a bounded 1-Lipschitz function, so when both measures
    are supported on grid points the value is a lower bound on the true norm
    and approaches it as the grid refines.  Atoms off the grid are moved to
    their nearest grid point.  In 2D every pair of grid points is constrained,
    which limits the grid to a few hundred points.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    if grid.shape[1] > 2:
        raise UnsupportedConfigurationError("bounded-Lipschitz grid LP supports 1D and 2D only")
    if grid.shape[0] == 0:
        raise ConfigurationError("empty grid")
    load = np.zeros(grid.shape[0])
    for rho, sign in ((mu, 1.0), (nu, -1.0)):
        if rho.locations.shape[0] == 0:
            continue
        if rho.dim != grid.shape[1]:
            raise DimensionError("measure and grid dimensions differ")
        dist = np.linalg.norm(rho.locations[:, None, :] - grid[None, :, :], axis=2)
        np.add.at(load, np.argmin(dist, axis=1), sign * rho.signed_weights)
    if not np.any(load):
        return 0.0
    edges = _grid_edges(grid)
    n = grid.shape[0]
    a_ub = b_ub = None
    if edges:
        ii = np.array([e[0] for e in edges])
        jj = np.array([e[1] for e in edges])
        lengths = np.array([e[2] for e in edges])
        # row e: phi_i - phi_j <= len; row E + e: phi_j - phi_i <= len
        cols = np.concatenate([np.stack([ii, jj], 1), np.stack([jj, ii], 1)]).reshape(-1)
        rows = np.repeat(np.arange(2 * len(edges)), 2)
        vals = np.tile([1.0, -1.0], 2 * len(edges))
        a_ub = sparse.csr_matrix((vals, (rows, cols)), shape=(2 * len(edges), n))
        b_ub = np.concatenate([lengths, lengths])
    res = linprog(-load, A_ub=a_ub, b_ub=b_ub, bounds=[(-1.0, 1.0)] * n, method="highs")
    if not res.success:
        raise RuntimeError(f"BL linear program failed: {res.message}")
    return float(max(0.0, -res.fun))


def as_points(values: Sequence) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr
