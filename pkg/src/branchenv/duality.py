"""Moment oracles for the limiting measure-valued process.

The n-th moments of the limit satisfy a deterministic parabolic PDE driven by
the n-particle motion generator plus a zeroth-order branching term; moments
can also be represented through a function-valued jump process that flows
with the pure motion semigroup between multiplicative correlation jumps at
exponential times of rate n(n-1)/2.  Both routes are implemented here and
compared against the forward Monte Carlo.

The grid solver ships for n*d <= 2 (one dual particle in d <= 2, or two dual
particles in d = 1); the domain is truncated with homogeneous Dirichlet data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kernels import CorrelationKernel, RhoKernel
from .measures import Grid, GridField, MeasureError


class StabilityError(RuntimeError):
    """Requested explicit-Euler step violates the stability bound."""


class JumpBudgetError(RuntimeError):
    """Jump count exceeded the configured cap (kappa too large for t)."""


@dataclass(frozen=True)
class NParticleGenerator:
    """Generator of the n-particle motion: (1/2)(Laplacian + mixed rho terms)
    acting on fields over R^(n*d)."""

    n: int
    d: int
    rho: RhoKernel

    def __post_init__(self):
        if self.n * self.d > 2:
            raise MeasureError("shipped generator supports n*d <= 2 only")
        if self.rho.dim != self.d:
            raise MeasureError("rho dimension does not match d")

    @property
    def rho0_norm(self) -> float:
        return float(np.linalg.norm(np.asarray(self.rho.rho0)))


@dataclass
class DualJumpState:
    """State of the function-valued dual: current field, jumps so far, and the
    exponential clock rate n(n-1)/2."""

    value: GridField
    jumps_so_far: int
    clock_rate: float


def stability_limit(gen: NParticleGenerator, spacing: float) -> float:
    """Largest explicit-Euler dt: spacing^2 / (2 n d (1 + |rho(0)|))."""
    return spacing ** 2 / (2.0 * gen.n * gen.d * (1.0 + gen.rho0_norm))


# ---------------------------------------------------------------------------
# Generator stencils
# ---------------------------------------------------------------------------

def _mixed_coefficient(gen: NParticleGenerator, grid: Grid) -> np.ndarray:
    """rho(x1 - x2) sampled on the 2d grid (n=2, d=1 case)."""
    ax = grid.axes()
    diff = ax[0][:, None] - ax[1][None, :]
    return gen.rho.eval(diff[..., None])[..., 0, 0]


def _apply_generator_padded(v: np.ndarray, gen: NParticleGenerator, grid: Grid,
                            mixed: Optional[np.ndarray]) -> np.ndarray:
    """A^(n) v on the full grid, treating values beyond the domain as zero."""
    h2 = grid.spacing ** 2
    p = np.pad(v, 1)
    if gen.n == 1 and gen.d == 1:
        d11 = (p[2:] - 2.0 * p[1:-1] + p[:-2]) / h2
        return 0.5 * (1.0 + float(np.asarray(gen.rho.rho0).reshape(()))) * d11
    if gen.n == 1 and gen.d == 2:
        r0 = np.asarray(gen.rho.rho0)
        d11 = (p[2:, 1:-1] - 2.0 * p[1:-1, 1:-1] + p[:-2, 1:-1]) / h2
        d22 = (p[1:-1, 2:] - 2.0 * p[1:-1, 1:-1] + p[1:-1, :-2]) / h2
        d12 = (p[2:, 2:] + p[:-2, :-2] - p[2:, :-2] - p[:-2, 2:]) / (4.0 * h2)
        out = 0.5 * ((1.0 + r0[0, 0]) * d11 + (1.0 + r0[1, 1]) * d22)
        out += 0.5 * (r0[0, 1] + r0[1, 0]) * d12
        return out
    # n = 2, d = 1: coordinates (x1, x2); the cross term carries rho(x1 - x2)
    r0 = float(np.asarray(gen.rho.rho0).reshape(()))
    d11 = (p[2:, 1:-1] - 2.0 * p[1:-1, 1:-1] + p[:-2, 1:-1]) / h2
    d22 = (p[1:-1, 2:] - 2.0 * p[1:-1, 1:-1] + p[1:-1, :-2]) / h2
    d12 = (p[2:, 2:] + p[:-2, :-2] - p[2:, :-2] - p[:-2, 2:]) / (4.0 * h2)
    return 0.5 * (1.0 + r0) * (d11 + d22) + mixed * d12


def apply_generator(v: GridField, gen: NParticleGenerator) -> GridField:
    """Central-difference action of the n-particle generator.

    Second differences use the standard 3-point stencil per axis and the
    4-point cross stencil for the mixed term; homogeneous Dirichlet data
    beyond the truncated domain.
    """
    grid = v.grid
    if min(grid.shape) < 5:
        raise MeasureError("grid too small: need interior 2 nodes from boundary")
    expect = 2 if (gen.n, gen.d) == (1, 2) or (gen.n, gen.d) == (2, 1) else 1
    if grid.dim != expect:
        raise MeasureError("field dimension does not match generator")
    mixed = _mixed_coefficient(gen, grid) if (gen.n, gen.d) == (2, 1) else None
    out = _apply_generator_padded(v.values, gen, grid, mixed)
    return GridField(grid=grid, values=out, time_label=v.time_label)


# ---------------------------------------------------------------------------
# Moment PDE
# ---------------------------------------------------------------------------

def _branch_coefficient(gen: NParticleGenerator, kappa: Optional[CorrelationKernel],
                        grid: Grid) -> Optional[np.ndarray]:
    """(1/2) sum_{i != j} kappa(x_i, x_j) on the grid, which for n = 2 and
    symmetric kappa is kappa(x_1, x_2); None when n = 1."""
    if gen.n < 2 or kappa is None:
        return None
    ax = grid.axes()
    shape = (ax[0].size, ax[1].size)
    x1 = np.broadcast_to(ax[0][:, None], shape)[..., None]
    x2 = np.broadcast_to(ax[1][None, :], shape)[..., None]
    return kappa.eval(x1, x2)


def _evolve(values: np.ndarray, gen: NParticleGenerator, grid: Grid,
            mixed: Optional[np.ndarray], branch: Optional[np.ndarray],
            dt: float, steps: int,
            snapshots: Optional[list] = None) -> np.ndarray:
    v = values.copy()
    for _ in range(steps):
        dv = _apply_generator_padded(v, gen, grid, mixed)
        if branch is not None:
            dv = dv + branch * v
        v = v + dt * dv
        if snapshots is not None:
            snapshots.append(v.copy())
    return v


def solve_moment_pde(f: GridField, kappa: Optional[CorrelationKernel],
                     gen: NParticleGenerator, t: float, steps: int) -> GridField:
    """Explicit Euler for d/dt v = A^(n) v + (1/2) sum_{i!=j} kappa(x_i,x_j) v,
    v_0 = f, refusing steps that violate the stability bound."""
    if steps < 1:
        raise MeasureError("need at least one time step")
    dt = t / steps
    limit = stability_limit(gen, f.grid.spacing)
    if dt > limit * (1.0 + 1e-12):
        raise StabilityError(
            f"explicit Euler unstable: dt={dt:.3e} exceeds bound {limit:.3e}; "
            f"use steps >= {int(np.ceil(t / limit))}")
    mixed = _mixed_coefficient(gen, f.grid) if (gen.n, gen.d) == (2, 1) else None
    branch = _branch_coefficient(gen, kappa, f.grid) if gen.n == 2 else None
    if branch is not None:
        branch = branch.reshape(f.grid.shape)
    out = _evolve(f.values, gen, f.grid, mixed, branch, dt, steps)
    return GridField(grid=f.grid, values=out, time_label=(f.time_label or 0.0) + t)


def moment_from_dual(mu: GridField, v_t: GridField, n: int) -> float:
    """n-fold product quadrature X_0^(x n)(v_t) of the dual solution against
    the initial density."""
    if mu.grid.dim != 1 and n > 1:
        raise MeasureError("product quadrature shipped for d = 1 duals")
    if v_t.grid.dim != n * mu.grid.dim:
        raise MeasureError("dual field dimension does not match n*d")
    w = mu.values * mu.grid.node_volume
    if n == 1:
        return float(np.sum(w.ravel() * v_t.values.ravel()))
    if n == 2:
        if v_t.grid.shape[0] != mu.grid.shape[0] or v_t.grid.shape[1] != mu.grid.shape[0]:
            raise MeasureError("dual grid does not match the initial-density grid")
        return float(w @ v_t.values @ w)
    raise MeasureError("duals shipped for n in {1, 2}")


# ---------------------------------------------------------------------------
# Jump-process dual
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JumpEstimate:
    value: float
    stderr: float
    replicas: int
    mean_jumps: float


def simulate_dual_jump(f: GridField, kappa: CorrelationKernel,
                       gen: NParticleGenerator, t: float,
                       rng: np.random.Generator, replicas: int,
                       mu: GridField, *, jump_cap: int = 64,
                       steps: Optional[int] = None) -> JumpEstimate:
    """Monte Carlo over the function-valued dual: flow with the pure motion
    semigroup between exponential jumps of rate n(n-1)/2, multiply pointwise
    by kappa(x_1, x_2) at each jump, pair with mu^(x n), and weight by
    exp(rate * t).

    Jump times are snapped to the solver's Euler grid (within its intrinsic
    time-discretization error) so replicas sharing a snapped jump pattern can
    reuse the deterministic flow; the no-jump prefix is precomputed once.
    """
    if replicas < 1:
        raise MeasureError("need at least one replica")
    if gen.n != 2:
        raise MeasureError("jump dual shipped for n = 2")
    rate = 0.5 * gen.n * (gen.n - 1)
    limit = stability_limit(gen, f.grid.spacing)
    if steps is None:
        steps = int(np.ceil(t / (0.9 * limit)))
    dt = t / steps
    if dt > limit * (1.0 + 1e-12):
        raise StabilityError(
            f"jump dual stepping unstable: dt={dt:.3e} > bound {limit:.3e}")

    grid = f.grid
    mixed = _mixed_coefficient(gen, grid)
    kappa_field = _branch_coefficient(gen, kappa, grid).reshape(grid.shape)
    w = mu.values * mu.grid.node_volume

    # pure-semigroup prefix flow T_{j dt} f for every Euler index j
    prefix = [f.values.copy()]
    _evolve(f.values, gen, grid, mixed, None, dt, steps, snapshots=prefix)
    prefix = np.array(prefix)

    def pair_weighted(field):
        return float(w @ field @ w)

    no_jump_values = np.array([pair_weighted(p) for p in prefix])

    cache: dict = {}
    amplification = np.exp(rate * t)
    values = np.empty(replicas)
    jump_counts = np.empty(replicas, dtype=np.int64)
    for r in range(replicas):
        clocks = []
        elapsed = rng.exponential(1.0 / rate)
        while elapsed < t:
            clocks.append(elapsed)
            if len(clocks) > jump_cap:
                raise JumpBudgetError(
                    f"more than {jump_cap} jumps before t={t}; "
                    "kappa sup-norm too large for this horizon")
            elapsed += rng.exponential(1.0 / rate)
        jump_counts[r] = len(clocks)
        if not clocks:
            values[r] = amplification * no_jump_values[steps]
            continue
        idx = tuple(min(steps, int(round(c / dt))) for c in clocks)
        cached = cache.get(idx)
        if cached is None:
            state = DualJumpState(value=GridField(grid, prefix[idx[0]]),
                                  jumps_so_far=0, clock_rate=rate)
            field = state.value.values * kappa_field
            state.jumps_so_far = 1
            pos = idx[0]
            for nxt in idx[1:]:
                field = _evolve(field, gen, grid, mixed, None, dt, nxt - pos)
                field = field * kappa_field
                state.jumps_so_far += 1
                pos = nxt
            field = _evolve(field, gen, grid, mixed, None, dt, steps - pos)
            cached = pair_weighted(field)
            cache[idx] = cached
        values[r] = amplification * cached
    se = float(values.std(ddof=1) / np.sqrt(replicas)) if replicas > 1 else 0.0
    return JumpEstimate(value=float(values.mean()), stderr=se,
                        replicas=replicas, mean_jumps=float(jump_counts.mean()))


# ---------------------------------------------------------------------------
# Convenience constructors for the desk-scale oracles
# ---------------------------------------------------------------------------

def square_grid(halfwidth: float, nodes: int) -> Grid:
    spacing = 2.0 * halfwidth / (nodes - 1)
    return Grid(origin=(-halfwidth, -halfwidth), spacing=spacing,
                shape=(nodes, nodes))


def constant_field(grid: Grid, value: float = 1.0) -> GridField:
    return GridField(grid=grid, values=np.full(grid.shape, value))


def density_on_grid(grid: Grid, kind: str = "uniform", width: float = 1.0,
                    center: float = 0.0) -> GridField:
    """Bounded initial density sampled at grid nodes (d = 1), renormalized so
    its grid quadrature carries total mass exactly 1 (matching X_0(1) = 1)."""
    x = grid.axes()[0]
    if kind == "uniform":
        vals = ((x >= center - width / 2) & (x <= center + width / 2)).astype(float)
    elif kind == "gauss":
        vals = np.exp(-(x - center) ** 2 / (2 * width ** 2))
    else:
        raise MeasureError(f"unknown density kind {kind}")
    vals = vals / (vals.sum() * grid.spacing)
    return GridField(grid=grid, values=vals)
