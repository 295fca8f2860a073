"""Measure-valued post-processing.

Pairings of empirical measures with test functions, heat-kernel density
estimation, a log-log regression estimator for Hoelder exponents, and
statistical diagnostics for the martingale problem satisfied by the limit.
All operations are pure functions over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .kernels import CorrelationKernel, RhoKernel
from .particles import EmpiricalMeasure


class MeasureError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Test functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """Twice-differentiable scalar test function with explicit derivatives.

    eval: (..., d) -> (...); gradient: (..., d) -> (..., d);
    hessian: (..., d) -> (..., d, d).
    """

    dim: int
    eval: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    bounded: bool = True
    name: str = "custom"


def constant_function(value: float, dim: int = 1) -> TestFunction:
    def ev(x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], value)

    def gr(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape)

    def he(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (dim,))

    return TestFunction(dim, ev, gr, he, bounded=True, name=f"const({value})")


def coordinate_function(axis: int = 0, dim: int = 1) -> TestFunction:
    """phi(x) = x_axis; unbounded, usable on truncated domains only."""

    def ev(x):
        return np.asarray(x, dtype=float)[..., axis]

    def gr(x):
        x = np.asarray(x, dtype=float)
        g = np.zeros(x.shape)
        g[..., axis] = 1.0
        return g

    def he(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (dim,))

    return TestFunction(dim, ev, gr, he, bounded=False, name=f"coord{axis}")


def gaussian_bump(center=0.0, width=1.0, dim: int = 1) -> TestFunction:
    c = np.broadcast_to(np.asarray(center, dtype=float), (dim,))
    w2 = float(width) ** 2

    def ev(x):
        x = np.asarray(x, dtype=float)
        return np.exp(-np.sum((x - c) ** 2, axis=-1) / (2.0 * w2))

    def gr(x):
        x = np.asarray(x, dtype=float)
        return -ev(x)[..., None] * (x - c) / w2

    def he(x):
        x = np.asarray(x, dtype=float)
        diff = (x - c) / w2
        outer = diff[..., :, None] * diff[..., None, :]
        eye = np.eye(dim) / w2
        return ev(x)[..., None, None] * (outer - eye)

    return TestFunction(dim, ev, gr, he, bounded=True, name="gauss_bump")


def derivative_mismatch(phi: TestFunction, points: np.ndarray, h: float = 1e-5):
    """Max relative error of gradient/hessian against central differences."""
    points = np.atleast_2d(points)
    d = phi.dim
    g_err = 0.0
    h_err = 0.0
    grad = phi.gradient(points)
    hess = phi.hessian(points)
    scale = max(np.max(np.abs(grad)), 1e-8)
    hscale = max(np.max(np.abs(hess)), 1e-8)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        fd = (phi.eval(points + e) - phi.eval(points - e)) / (2 * h)
        g_err = max(g_err, np.max(np.abs(fd - grad[:, i])) / scale)
        for j in range(d):
            e2 = np.zeros(d)
            e2[j] = h
            fd2 = (phi.eval(points + e + e2) - phi.eval(points + e - e2)
                   - phi.eval(points - e + e2) + phi.eval(points - e - e2)) / (4 * h * h)
            h_err = max(h_err, np.max(np.abs(fd2 - hess[:, i, j])) / hscale)
    return g_err, h_err


# ---------------------------------------------------------------------------
# Grids and fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Uniform rectangular grid: origin corner, scalar spacing, node counts."""

    origin: tuple
    spacing: float
    shape: tuple

    def __post_init__(self):
        if self.spacing <= 0:
            raise MeasureError("grid spacing must be positive")

    @property
    def dim(self) -> int:
        return len(self.shape)

    def axes(self):
        return [self.origin[k] + self.spacing * np.arange(self.shape[k])
                for k in range(self.dim)]

    def nodes(self) -> np.ndarray:
        """All nodes as an (N, dim) array in C order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def node_volume(self) -> float:
        return float(self.spacing ** self.dim)


def symmetric_grid(halfwidth: float, nodes: int, dim: int = 1) -> Grid:
    spacing = 2.0 * halfwidth / (nodes - 1)
    return Grid(origin=(-halfwidth,) * dim, spacing=spacing, shape=(nodes,) * dim)


@dataclass(frozen=True)
class GridField:
    """Scalar field sampled on a Grid."""

    grid: Grid
    values: np.ndarray
    time_label: Optional[float] = None

    def __post_init__(self):
        if tuple(self.values.shape) != tuple(self.grid.shape):
            raise MeasureError("field values do not match grid shape")
        if self.values.size and not np.all(np.isfinite(self.values)):
            raise MeasureError("field values must be finite")


# ---------------------------------------------------------------------------
# Pairing and heat-kernel density estimation
# ---------------------------------------------------------------------------

def pair(mu: EmpiricalMeasure, phi: TestFunction) -> float:
    """<mu, phi> = (1/n) * sum of phi over atoms."""
    if mu.atoms.shape[0] == 0:
        return 0.0
    return float(np.sum(phi.eval(mu.atoms)) / mu.n)


def heat_kernel(eps: float, dim: int, r2: np.ndarray) -> np.ndarray:
    return (2.0 * np.pi * eps) ** (-dim / 2.0) * np.exp(-r2 / (2.0 * eps))


def kde(mu: EmpiricalMeasure, eps: float, query: Grid | GridField) -> GridField:
    """Heat-kernel smoothing of the empirical measure on the query grid."""
    if eps <= 0:
        raise MeasureError("kde bandwidth must be positive")
    grid = query.grid if isinstance(query, GridField) else query
    nodes = grid.nodes()
    d = mu.atoms.shape[1] if mu.atoms.size else grid.dim
    if grid.dim != d:
        raise MeasureError("query grid dimension does not match atoms")
    values = np.zeros(nodes.shape[0])
    atoms = mu.atoms
    chunk = max(1, int(5e6 // max(nodes.shape[0], 1)))
    for lo in range(0, atoms.shape[0], chunk):
        block = atoms[lo:lo + chunk]
        r2 = np.sum((nodes[:, None, :] - block[None, :, :]) ** 2, axis=-1)
        values += heat_kernel(eps, d, r2).sum(axis=1)
    values /= mu.n
    return GridField(grid=grid, values=values.reshape(grid.shape))


# ---------------------------------------------------------------------------
# Hoelder exponent estimation
# ---------------------------------------------------------------------------

def holder_exponent(samples: Sequence, moment_order: int = 2):
    """Hoelder exponent from lag moments by ordinary least squares.

    samples: (lag, mean |increment|^moment_order) pairs at >= 4 positive
    dyadic lags.  The slope of log(moment) against log(lag) divided by the
    moment order estimates the exponent; the second return value is its
    standard error from the regression.
    """
    lags = np.array([s[0] for s in samples], dtype=float)
    moments = np.array([s[1] for s in samples], dtype=float)
    if lags.size < 4:
        raise MeasureError("need at least 4 lags for the log-log regression")
    if np.any(lags <= 0):
        raise MeasureError("lags must be positive")
    if np.any(moments <= 0):
        raise MeasureError("zero or negative moments cannot be log-regressed")
    x = np.log(lags)
    y = np.log(moments)
    xc = x - x.mean()
    slope = float(np.dot(xc, y) / np.dot(xc, xc))
    intercept = y.mean() - slope * x.mean()
    resid = y - (intercept + slope * x)
    dof = max(lags.size - 2, 1)
    slope_se = float(np.sqrt(np.sum(resid ** 2) / dof / np.dot(xc, xc)))
    return slope / moment_order, slope_se / moment_order


# ---------------------------------------------------------------------------
# Martingale-problem diagnostics
# ---------------------------------------------------------------------------

def motion_generator(phi: TestFunction, rho: RhoKernel) -> Callable[[np.ndarray], np.ndarray]:
    """Action of the one-particle generator:
    A phi = (1/2) Laplacian phi + (1/2) sum_ij rho^ij(0) d_ij phi."""
    coeff = np.eye(rho.dim) + np.asarray(rho.rho0)

    def apply(x):
        hess = phi.hessian(x)
        return 0.5 * np.einsum("ij,...ij->...", coeff, hess)

    return apply


def _pairwise_form(meas: EmpiricalMeasure, rho: RhoKernel,
                   kappa: CorrelationKernel, phi: TestFunction) -> float:
    """X x X (grad phi* rho grad phi) + X x X (kappa phi phi) for one snapshot."""
    atoms = meas.atoms
    m = atoms.shape[0]
    if m == 0:
        return 0.0
    grads = phi.gradient(atoms)
    diffs = atoms[:, None, :] - atoms[None, :, :]
    blocks = rho.eval(diffs)
    term_env = np.einsum("ki,klij,lj->", grads, blocks, grads)
    vals = phi.eval(atoms)
    gram = kappa.eval(atoms[:, None, :], atoms[None, :, :])
    term_branch = vals @ gram @ vals
    return float((term_env + term_branch) / meas.n ** 2)


def martingale_diagnostics(replicas: Sequence, phi: TestFunction, rho: RhoKernel,
                           kappa: CorrelationKernel, *, min_replicas: int = 100,
                           qv_nodes: int = 33) -> dict:
    """Statistical check of the martingale problem on replica trajectories.

    Each replica is a list of (time, EmpiricalMeasure) snapshots on a common
    grid.  Computes per replica M_t(phi) = X_t(phi) - X_0(phi) - int X_s(A phi) ds
    (trapezoid in time) and compares the empirical variance of M_t(phi) with
    the replica estimate of the quadratic-variation integral.
    """
    if len(replicas) < min_replicas:
        raise MeasureError(f"need at least {min_replicas} replicas")
    times0 = [t for t, _ in replicas[0]]
    for rep in replicas[1:]:
        if [t for t, _ in rep] != times0:
            raise MeasureError("mismatched snapshot grids across replicas")
    times = np.array(times0)
    a_phi = motion_generator(phi, rho)

    martingales = []
    qv_estimates = []
    qv_idx = np.unique(np.linspace(0, len(times) - 1, min(qv_nodes, len(times))).astype(int))
    for rep in replicas:
        x_phi = np.array([pair(meas, phi) for _, meas in rep])
        x_aphi = np.array([float(np.sum(a_phi(meas.atoms)) / meas.n)
                           if meas.atoms.shape[0] else 0.0 for _, meas in rep])
        drift = np.trapezoid(x_aphi, times)
        martingales.append(x_phi[-1] - x_phi[0] - drift)
        q = np.array([_pairwise_form(rep[i][1], rho, kappa, phi) for i in qv_idx])
        qv_estimates.append(np.trapezoid(q, times[qv_idx]))
    martingales = np.array(martingales)
    qv_estimates = np.array(qv_estimates)

    mean = float(martingales.mean())
    se = float(martingales.std(ddof=1) / np.sqrt(len(replicas)))
    var = float(martingales.var(ddof=1))
    var_se = var * np.sqrt(2.0 / max(len(replicas) - 1, 1))
    qv_mean = float(qv_estimates.mean())
    rel_dev = abs(var - qv_mean) / max(abs(qv_mean), 1e-300)

    rows = [
        {"statistic": "martingale_mean", "value": mean, "stderr": se,
         "tolerance": 3 * se, "pass": abs(mean) <= 3 * se + 1e-12},
        {"statistic": "martingale_variance", "value": var, "stderr": var_se,
         "tolerance": None, "pass": True},
        {"statistic": "qv_integral_mean", "value": qv_mean,
         "stderr": float(qv_estimates.std(ddof=1) / np.sqrt(len(replicas))),
         "tolerance": None, "pass": True},
        {"statistic": "qv_relative_deviation", "value": rel_dev, "stderr": None,
         "tolerance": None, "pass": True},
    ]
    return {"schema": 1, "statistics": rows, "replicas": len(replicas),
            "time": float(times[-1]), "phi": phi.name,
            "test_mode": kappa.test_mode}
