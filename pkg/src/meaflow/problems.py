"""Problem families: feature maps, losses, regularizers and the first variation.

A problem bundles a feature map ``Phi`` from particle positions to functions
sampled on a quadrature set, a convex loss ``R`` on those functions, and a
regularizer ``V`` on positions weighted by ``reg_weight``.  For a measure
``mu`` the objective is ``R(int Phi dmu) + reg_weight * int V dmu``.

All per-particle computations are vectorized; reductions over particles use
a fixed order (numpy matrix products on the same shapes), so results do not
depend on how callers batch their work.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import (
    ConfigurationError,
    DimensionError,
    NonDifferentiableError,
)
from .measures import ParticleMeasure

__all__ = [
    "FunctionSample",
    "QuadraticLoss",
    "LogisticLoss",
    "AbsWeight",
    "SquaredNorm",
    "NoRegularizer",
    "Problem",
    "SparseDeconvolution",
    "SigmoidNet",
    "ReluNetSignedSquare",
    "ReluNetClassic",
    "dirichlet_kernel",
    "phi",
    "dphi",
    "loss",
    "loss_grad",
    "reg_value",
    "prox_reg",
    "reg_minnorm_correction",
    "objective",
    "f_prime",
    "f_prime_grad",
    "velocity",
    "problem_from_dict",
    "load_dataset_csv",
]


# ---------------------------------------------------------------------------
# Function samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FunctionSample:
    """A function known through its values on a weighted quadrature set."""

    values: np.ndarray
    quad_weights: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        w = np.asarray(self.quad_weights, dtype=float).reshape(-1)
        if v.shape != w.shape:
            raise DimensionError(f"{v.size} values on {w.size} quadrature weights")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "quad_weights", w)

    def inner(self, other: "FunctionSample") -> float:
        if other.values.shape != self.values.shape:
            raise DimensionError("function samples live on different quadratures")
        return float(np.dot(self.quad_weights * self.values, other.values))

    def norm_sq(self) -> float:
        return self.inner(self)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticLoss:
    """``R(f) = (1 / 2 lam) sum_j q_j (f_j - y_j)^2``."""

    lam: float = 1.0
    name = "quadratic"

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigurationError("lam must be positive")

    def value(self, f, y, qw) -> float:
        r = f - y
        return float(np.dot(qw, r * r) / (2.0 * self.lam))

    def grad(self, f, y) -> np.ndarray:
        """Representer of the gradient (per quadrature point)."""
        return (f - y) / self.lam

    def to_dict(self) -> dict:
        return {"kind": "quadratic", "lam": self.lam}


@dataclass(frozen=True)
class LogisticLoss:
    """``R(f) = sum_j q_j log(1 + exp(-y_j f_j))`` with labels in {-1, +1}."""

    name = "logistic"

    def value(self, f, y, qw) -> float:
        return float(np.dot(qw, np.logaddexp(0.0, -y * f)))

    def grad(self, f, y) -> np.ndarray:
        return -y * expit(-y * f)

    def to_dict(self) -> dict:
        return {"kind": "logistic"}


def _loss_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", "quadratic")
    if kind == "quadratic":
        lam = d.pop("lam", 1.0)
        _reject_extra(d, "loss")
        return QuadraticLoss(float(lam))
    if kind == "logistic":
        _reject_extra(d, "loss")
        return LogisticLoss()
    raise ConfigurationError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# Regularizers (all act on the full position vector of one or many particles)
# ---------------------------------------------------------------------------


class AbsWeight:
    """``V(w, theta) = |w|`` where ``w`` is the first coordinate."""

    name = "abs_weight"
    smooth = False

    def value(self, u: np.ndarray) -> np.ndarray:
        return np.abs(u[..., 0])

    def prox(self, u: np.ndarray, tau: float) -> np.ndarray:
        out = np.array(u, dtype=float, copy=True)
        w = out[..., 0]
        out[..., 0] = np.sign(w) * np.maximum(np.abs(w) - tau, 0.0)
        return out

    def projection(self, u: np.ndarray, v: np.ndarray, c: float) -> np.ndarray:
        """Projection of ``v`` onto ``c * subdifferential of V`` at ``u``."""
        out = np.zeros_like(v, dtype=float)
        w = u[..., 0]
        out[..., 0] = np.where(w != 0, c * np.sign(w), np.clip(v[..., 0], -c, c))
        return out


class SquaredNorm:
    """``V(u) = |u|^2`` (smooth, 2-homogeneous)."""

    name = "squared_norm"
    smooth = True

    def value(self, u: np.ndarray) -> np.ndarray:
        return np.sum(np.asarray(u) ** 2, axis=-1)

    def prox(self, u: np.ndarray, tau: float) -> np.ndarray:
        return np.asarray(u, dtype=float) / (1.0 + 2.0 * tau)

    def projection(self, u: np.ndarray, v: np.ndarray, c: float) -> np.ndarray:
        return 2.0 * c * np.asarray(u, dtype=float)


class NoRegularizer:
    """``V = 0``."""

    name = "none"
    smooth = True

    def value(self, u: np.ndarray) -> np.ndarray:
        return np.zeros(np.shape(u)[:-1])

    def prox(self, u: np.ndarray, tau: float) -> np.ndarray:
        return np.array(u, dtype=float, copy=True)

    def projection(self, u: np.ndarray, v: np.ndarray, c: float) -> np.ndarray:
        return np.zeros_like(v, dtype=float)


_REGULARIZERS = {r.name: r for r in (AbsWeight, SquaredNorm, NoRegularizer)}


# ---------------------------------------------------------------------------
# Problem base class
# ---------------------------------------------------------------------------


class Problem:
    """Common machinery for all families.

    Subclasses define the quadrature (``quad_weights``), the targets
    (``targets``), the particle dimension ``dim`` and three vectorized
    primitives over a batch of positions ``U`` of shape ``(m, dim)``:

    ``features(U, tags)``
        ``(n, m)`` matrix whose column ``i`` samples ``Phi(U[i])``.
    ``adjoint(U, tags, g)``
        ``(m,)`` vector of ``<g, Phi(U[i])>``.
    ``adjoint_grad(U, tags, g)``
        ``(m, dim)`` matrix of ``<g, d_j Phi(U[i])>``.
    """

    family: str = ""
    homogeneity: str = "partial1"  # or "two"
    uses_tags: bool = False

    def __init__(self, loss, regularizer, reg_weight: float):
        if reg_weight < 0 or not math.isfinite(reg_weight):
            raise ConfigurationError("reg_weight must be finite and nonnegative")
        self.loss = loss
        self.regularizer = regularizer
        self.reg_weight = float(reg_weight)

    # -- to be provided by subclasses ------------------------------------
    dim: int
    quad_weights: np.ndarray
    targets: np.ndarray

    def features(self, U, tags=None) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def adjoint(self, U, tags, g) -> np.ndarray:  # pragma: no cover - abstract
        return (self.quad_weights * g) @ self.features(U, tags)

    def adjoint_grad(self, U, tags, g) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def feature_jacobian(self, u, tag=1) -> np.ndarray:  # pragma: no cover - abstract
        """``(dim, n)`` matrix of partial derivatives of ``Phi`` at one point."""
        raise NotImplementedError

    def to_dict(self) -> dict:  # pragma: no cover - abstract
        raise NotImplementedError

    # -- shared helpers ---------------------------------------------------

    @property
    def n_quad(self) -> int:
        return self.quad_weights.shape[0]

    def check_positions(self, U) -> np.ndarray:
        U = np.asarray(U, dtype=float)
        if U.ndim == 1:
            U = U[None, :]
        if U.shape[-1] != self.dim:
            raise DimensionError(f"{self.family} expects positions in R^{self.dim}, got {U.shape[-1]}")
        return U

    def tags_for(self, mu_or_tags, m: int) -> Optional[np.ndarray]:
        if not self.uses_tags:
            return None
        tags = mu_or_tags.tags if isinstance(mu_or_tags, ParticleMeasure) else mu_or_tags
        if tags is None:
            raise ConfigurationError(f"{self.family} needs a +1/-1 tag per particle")
        tags = np.asarray(tags, dtype=float).reshape(-1)
        if tags.shape[0] != m:
            raise DimensionError("one tag per particle required")
        return tags

    def embed(self, mu: ParticleMeasure) -> np.ndarray:
        """Values of ``int Phi dmu`` on the quadrature."""
        U = self.check_positions(mu.positions)
        return self.features(U, self.tags_for(mu, mu.m)) @ mu.masses

    def residual_representer(self, mu: ParticleMeasure) -> np.ndarray:
        """``R'(int Phi dmu)`` sampled on the quadrature."""
        return self.loss.grad(self.embed(mu), self.targets)

    def check_differentiable(self, U, tags=None) -> None:
        """Raise :class:`NonDifferentiableError` where ``Phi`` has no derivative."""

    def with_data(self, X, y) -> "Problem":
        raise ConfigurationError(f"{self.family} has no dataset to resample")


# ---------------------------------------------------------------------------
# Sparse deconvolution on the 1-torus
# ---------------------------------------------------------------------------


def dirichlet_kernel(x, order: int = 7) -> np.ndarray:
    """``psi(x) = sum_{k=-K..K} cos(2 pi k x)``, by direct summation."""
    x = np.asarray(x, dtype=float)
    ks = np.arange(1, order + 1)
    return 1.0 + 2.0 * np.cos(2 * np.pi * x[..., None] * ks).sum(axis=-1)


class SparseDeconvolution(Problem):
    """Spikes filtered by a Dirichlet kernel, observed on a uniform torus grid.

    Particles are ``u = (w, theta)`` with ``Phi(u) = w * psi(. - theta)`` and
    ``V(u) = |w|``.  The loss is quadratic with strength ``lam``.

    Parameters
    ----------
    target : array_like, shape (n,)
        Observed signal on the grid ``x_j = j / n``.
    order : int
        Cutoff frequency ``K`` of the Dirichlet kernel (needs ``2K < n``).
    lam : float
        Loss scale; the loss is ``(1 / 2 lam) mean((f - y)^2)``.
    reg_weight : float
        Multiplier of ``V``.
    """

    family = "deconvolution"
    homogeneity = "partial1"
    dim = 2

    def __init__(self, target, order: int = 7, lam: float = 1.0, reg_weight: float = 1.0):
        super().__init__(QuadraticLoss(lam), AbsWeight(), reg_weight)
        y = np.asarray(target, dtype=float).reshape(-1)
        n = y.shape[0]
        if n == 0:
            raise ConfigurationError("empty target signal")
        if order < 0 or 2 * order >= n:
            raise ConfigurationError(f"Dirichlet order {order} needs 2*order < n={n}")
        self.order = int(order)
        self.lam = float(lam)
        self.targets = y
        self.grid = np.arange(n) / n
        self.quad_weights = np.full(n, 1.0 / n)
        ks = np.arange(1, order + 1)
        self._ks = ks
        self._cos_x = np.cos(2 * np.pi * np.outer(self.grid, ks))  # (n, K)
        self._sin_x = np.sin(2 * np.pi * np.outer(self.grid, ks))

    @property
    def n(self) -> int:
        return self.targets.shape[0]

    def target_fourier(self) -> np.ndarray:
        """``y_hat_k = mean_j y_j exp(-2 pi i k x_j)`` for ``k = 0..K``."""
        return (np.fft.fft(self.targets) / self.n)[: self.order + 1]

    def _trig(self, theta):
        arg = 2 * np.pi * np.outer(theta, self._ks)
        return np.cos(arg), np.sin(arg)  # (m, K)

    def features(self, U, tags=None):
        U = self.check_positions(U)
        ct, st = self._trig(U[:, 1])
        # psi(x - t) = 1 + 2 sum_k (cos kx cos kt + sin kx sin kt)
        psi = 1.0 + 2.0 * (self._cos_x @ ct.T + self._sin_x @ st.T)
        return psi * U[:, 0]

    def _moments(self, g):
        gq = self.quad_weights * g
        return gq.sum(), gq @ self._cos_x, gq @ self._sin_x

    def adjoint(self, U, tags, g):
        U = self.check_positions(U)
        g0, a, b = self._moments(g)
        ct, st = self._trig(U[:, 1])
        return U[:, 0] * (g0 + 2.0 * (ct @ a + st @ b))

    def adjoint_grad(self, U, tags, g):
        U = self.check_positions(U)
        g0, a, b = self._moments(g)
        ct, st = self._trig(U[:, 1])
        kk = 2 * np.pi * self._ks
        val = g0 + 2.0 * (ct @ a + st @ b)
        dval = 2.0 * (ct @ (kk * b) - st @ (kk * a))
        return np.column_stack([val, U[:, 0] * dval])

    def feature_jacobian(self, u, tag=1):
        u = self.check_positions(u)[0]
        shift = self.grid - u[1]
        psi = dirichlet_kernel(shift, self.order)
        dpsi = -2.0 * (2 * np.pi * self._ks * np.sin(2 * np.pi * np.outer(shift, self._ks))).sum(1)
        # d/dtheta psi(x - theta) = -psi'(x - theta)
        return np.vstack([psi, -u[0] * dpsi])

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "order": self.order,
            "lam": self.lam,
            "reg_weight": self.reg_weight,
            "target": self.targets.tolist(),
        }


# ---------------------------------------------------------------------------
# Two-layer networks on a finite dataset
# ---------------------------------------------------------------------------


class _NetProblem(Problem):
    """Shared dataset handling.  Inputs ``x`` are augmented to ``z = (x, 1)``."""

    default_regularizer = "none"

    def __init__(self, X, y, loss=None, regularizer=None, reg_weight: float = 0.0):
        loss = QuadraticLoss(1.0) if loss is None else loss
        reg_name = self.default_regularizer if regularizer is None else regularizer
        if reg_name not in _REGULARIZERS:
            raise ConfigurationError(f"unknown regularizer {reg_name!r}")
        super().__init__(loss, _REGULARIZERS[reg_name](), reg_weight)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=float).reshape(-1)
        if X.shape[0] == 0:
            raise ConfigurationError("empty dataset")
        if X.shape[0] != y.shape[0]:
            raise DimensionError(f"{X.shape[0]} inputs but {y.shape[0]} labels")
        if isinstance(loss, LogisticLoss) and not np.all(np.abs(y) == 1):
            raise ConfigurationError("logistic loss needs labels in {-1, +1}")
        self.X = X
        self.targets = y
        self.Z = np.column_stack([X, np.ones(X.shape[0])])
        self.quad_weights = np.full(X.shape[0], 1.0 / X.shape[0])

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def with_data(self, X, y) -> "_NetProblem":
        return type(self)(X, y, loss=self.loss, regularizer=self.regularizer.name,
                          reg_weight=self.reg_weight)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "loss": self.loss.to_dict(),
            "regularizer": self.regularizer.name,
            "reg_weight": self.reg_weight,
            "data": {"X": self.X.tolist(), "y": self.targets.tolist()},
        }


class SigmoidNet(_NetProblem):
    """``Phi(w, theta)(x) = w * sigmoid(theta . (x, 1))``, ``V = |w|``."""

    family = "sigmoid"
    homogeneity = "partial1"
    default_regularizer = "abs_weight"

    @property
    def dim(self) -> int:
        return self.input_dim + 2

    def features(self, U, tags=None):
        U = self.check_positions(U)
        return expit(self.Z @ U[:, 1:].T) * U[:, 0]

    def adjoint_grad(self, U, tags, g):
        U = self.check_positions(U)
        s = expit(self.Z @ U[:, 1:].T)
        gq = self.quad_weights * g
        gw = gq @ s
        gth = ((s * (1.0 - s)) * gq[:, None]).T @ self.Z
        return np.column_stack([gw, U[:, 0:1] * gth])

    def feature_jacobian(self, u, tag=1):
        u = self.check_positions(u)[0]
        s = expit(self.Z @ u[1:])
        return np.vstack([s, u[0] * (s * (1.0 - s)) * self.Z.T])


def _heaviside(t):
    # convention: derivative of relu at 0 is 0
    return (t > 0).astype(float)


class ReluNetSignedSquare(_NetProblem):
    """``Phi(theta)(x) = tag * relu(s(theta) . (x, 1))`` with ``s(t) = t |t|``.

    Each particle carries a fixed tag in {-1, +1} selecting the output sign.
    The default regularizer is ``V(theta) = |theta|^2``.
    """

    family = "relu_signed_square"
    homogeneity = "two"
    uses_tags = True
    default_regularizer = "squared_norm"

    @property
    def dim(self) -> int:
        return self.input_dim + 1

    def features(self, U, tags=None):
        U = self.check_positions(U)
        tags = self.tags_for(tags, U.shape[0])
        return np.maximum(self.Z @ (U * np.abs(U)).T, 0.0) * tags

    def adjoint_grad(self, U, tags, g):
        U = self.check_positions(U)
        tags = self.tags_for(tags, U.shape[0])
        H = _heaviside(self.Z @ (U * np.abs(U)).T)
        gq = self.quad_weights * g
        G = (H * gq[:, None]).T @ self.Z  # (m, dim)
        return tags[:, None] * 2.0 * np.abs(U) * G

    def feature_jacobian(self, u, tag=1):
        u = self.check_positions(u)[0]
        H = _heaviside(self.Z @ (u * np.abs(u)))
        return tag * (2.0 * np.abs(u))[:, None] * (H * self.Z.T)


class ReluNetClassic(_NetProblem):
    """``Phi(w, theta)(x) = w * relu(theta . (x, 1))``.

    Not differentiable at ``theta = 0`` when ``w != 0``: derivative requests
    there raise :class:`NonDifferentiableError`.
    """

    family = "relu_classic"
    homogeneity = "two"
    default_regularizer = "none"

    @property
    def dim(self) -> int:
        return self.input_dim + 2

    def features(self, U, tags=None):
        U = self.check_positions(U)
        return np.maximum(self.Z @ U[:, 1:].T, 0.0) * U[:, 0]

    def check_differentiable(self, U, tags=None):
        U = self.check_positions(U)
        bad = np.flatnonzero(np.all(U[:, 1:] == 0, axis=1) & (U[:, 0] != 0))
        if bad.size:
            raise NonDifferentiableError(
                f"feature map has no derivative at particle {int(bad[0])} (theta = 0, w != 0)",
                index=int(bad[0]))

    def adjoint_grad(self, U, tags, g):
        U = self.check_positions(U)
        self.check_differentiable(U)
        pre = self.Z @ U[:, 1:].T
        gq = self.quad_weights * g
        gw = gq @ np.maximum(pre, 0.0)
        gth = (_heaviside(pre) * gq[:, None]).T @ self.Z
        return np.column_stack([gw, U[:, 0:1] * gth])

    def feature_jacobian(self, u, tag=1):
        u = self.check_positions(u)[0]
        self.check_differentiable(u[None, :])
        pre = self.Z @ u[1:]
        return np.vstack([np.maximum(pre, 0.0), u[0] * _heaviside(pre) * self.Z.T])


_FAMILIES = {
    cls.family: cls
    for cls in (SparseDeconvolution, SigmoidNet, ReluNetSignedSquare, ReluNetClassic)
}


# ---------------------------------------------------------------------------
# Serialization and data loading
# ---------------------------------------------------------------------------


def _reject_extra(d: dict, where: str) -> None:
    if d:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(d)}")


def load_dataset_csv(path):
    """Load ``(X, y)`` from a CSV file: one sample per row, label last.

    A non-numeric first row is treated as a header.
    """
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError:
        data = np.loadtxt(path, delimiter=",", ndmin=2, skiprows=1)
    if data.shape[1] < 2:
        raise ConfigurationError("dataset needs at least one feature column and a label column")
    return data[:, :-1], data[:, -1]


def problem_from_dict(d: dict, base_dir=None) -> Problem:
    """Rebuild a problem from :meth:`Problem.to_dict` output.

    Network families accept either inline ``data`` (``{"X": ..., "y": ...}``)
    or a ``dataset`` CSV path, resolved relative to ``base_dir``.
    """
    d = dict(d)
    family = d.pop("family", None)
    if family not in _FAMILIES:
        raise ConfigurationError(f"unknown family {family!r}; expected one of {sorted(_FAMILIES)}")
    if family == "deconvolution":
        if "target" not in d:
            raise ConfigurationError("deconvolution needs an inline 'target' signal")
        target = d.pop("target")
        kwargs = {k: d.pop(k) for k in ("order", "lam", "reg_weight") if k in d}
        _reject_extra(d, "problem")
        return SparseDeconvolution(target, **kwargs)
    loss = _loss_from_dict(d.pop("loss", {"kind": "quadratic"}))
    if "data" in d and "dataset" in d:
        raise ConfigurationError("give either 'data' or 'dataset', not both")
    if "data" in d:
        data = dict(d.pop("data"))
        X, y = data.pop("X"), data.pop("y")
        _reject_extra(data, "data")
    elif "dataset" in d:
        import os

        path = d.pop("dataset")
        if base_dir is not None and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        X, y = load_dataset_csv(path)
    else:
        raise ConfigurationError(f"{family} needs 'data' or 'dataset'")
    kwargs = {k: d.pop(k) for k in ("regularizer", "reg_weight") if k in d}
    _reject_extra(d, "problem")
    return _FAMILIES[family](X, y, loss=loss, **kwargs)


def problem_to_json(problem: Problem) -> str:
    return json.dumps(problem.to_dict())


def problem_from_json(text: str) -> Problem:
    return problem_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Functional interface
# ---------------------------------------------------------------------------


def phi(problem: Problem, u, tag: int = 1) -> FunctionSample:
    """``Phi(u)`` sampled on the problem's quadrature."""
    U = problem.check_positions(u)[:1]
    tags = np.array([tag], dtype=float) if problem.uses_tags else None
    return FunctionSample(problem.features(U, tags)[:, 0], problem.quad_weights)


def dphi(problem: Problem, u, tag: int = 1) -> list[FunctionSample]:
    """Partial derivatives ``d_j Phi(u)``, one function sample per coordinate."""
    jac = problem.feature_jacobian(u, tag)
    return [FunctionSample(row, problem.quad_weights) for row in jac]


def loss(problem: Problem, f) -> float:
    values = f.values if isinstance(f, FunctionSample) else np.asarray(f, dtype=float)
    if values.shape != problem.targets.shape:
        raise DimensionError(f"function has {values.size} samples, problem has {problem.n_quad}")
    return problem.loss.value(values, problem.targets, problem.quad_weights)


def loss_grad(problem: Problem, f) -> FunctionSample:
    values = f.values if isinstance(f, FunctionSample) else np.asarray(f, dtype=float)
    if values.shape != problem.targets.shape:
        raise DimensionError(f"function has {values.size} samples, problem has {problem.n_quad}")
    return FunctionSample(problem.loss.grad(values, problem.targets), problem.quad_weights)


def reg_value(problem: Problem, u) -> float:
    """Unweighted ``V(u)`` for one point (multiply by ``reg_weight`` for the objective)."""
    return float(problem.regularizer.value(np.asarray(u, dtype=float)))


def prox_reg(problem: Problem, u, tau: float) -> np.ndarray:
    """Proximal map of ``tau * V`` (vectorized over leading axes)."""
    if not tau > 0:
        raise ConfigurationError("prox step must be positive")
    return problem.regularizer.prox(np.asarray(u, dtype=float), tau)


def reg_minnorm_correction(problem: Problem, u, v_tilde) -> np.ndarray:
    """``v_tilde - proj_{reg_weight * dV(u)}(v_tilde)``, the min-norm velocity."""
    u = np.asarray(u, dtype=float)
    v_tilde = np.asarray(v_tilde, dtype=float)
    return v_tilde - problem.regularizer.projection(u, v_tilde, problem.reg_weight)


def objective(problem: Problem, mu: ParticleMeasure) -> float:
    """``F(mu) = R(int Phi dmu) + reg_weight * int V dmu``."""
    f = problem.embed(mu)
    reg = float(np.dot(mu.masses, problem.regularizer.value(mu.positions)))
    return problem.loss.value(f, problem.targets, problem.quad_weights) + problem.reg_weight * reg


def f_prime_many(problem: Problem, mu: ParticleMeasure, U, tags=None) -> np.ndarray:
    """``F'(mu)`` at every row of ``U`` (tags required for tagged families)."""
    U = problem.check_positions(U)
    g = problem.residual_representer(mu)
    t = problem.tags_for(tags, U.shape[0])
    return problem.adjoint(U, t, g) + problem.reg_weight * problem.regularizer.value(U)


def f_prime(problem: Problem, mu: ParticleMeasure, u, tag: int = 1) -> float:
    """``F'(mu)(u) = <R'(int Phi dmu), Phi(u)> + reg_weight * V(u)``."""
    tags = np.array([tag]) if problem.uses_tags else None
    return float(f_prime_many(problem, mu, np.atleast_2d(u), tags)[0])


def f_prime_grad(problem: Problem, mu: ParticleMeasure, u, tag: int = 1,
                 return_flag: bool = False):
    """Gradient of ``F'(mu)`` at ``u``.

    Where ``V`` has a kink (``w = 0`` for ``V = |w|``) the min-norm element of
    the subdifferential is returned; with ``return_flag=True`` the result is
    ``(grad, differentiable)``.
    """
    U = problem.check_positions(u)[:1]
    tags = np.array([tag], dtype=float) if problem.uses_tags else None
    g = problem.residual_representer(mu)
    smooth = problem.adjoint_grad(U, tags, g)[0]
    grad = -reg_minnorm_correction(problem, U[0], -smooth)
    differentiable = problem.regularizer.smooth or problem.reg_weight == 0 or U[0, 0] != 0
    return (grad, bool(differentiable)) if return_flag else grad


def smooth_velocity(problem: Problem, mu: ParticleMeasure, g=None) -> np.ndarray:
    """Loss-part velocity ``-<R', d_j Phi(u_i)>`` for every particle, shape ``(m, dim)``."""
    U = problem.check_positions(mu.positions)
    if g is None:
        g = problem.residual_representer(mu)
    return -problem.adjoint_grad(U, problem.tags_for(mu, mu.m), g)


def velocity(problem: Problem, mu: ParticleMeasure) -> np.ndarray:
    """Min-norm velocity field, one row per particle.

    Equals ``-m * grad F_m`` at differentiable points when masses are ``1/m``.
    """
    vt = smooth_velocity(problem, mu)
    return reg_minnorm_correction(problem, mu.positions, vt)
