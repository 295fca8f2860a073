"""Forward Monte Carlo of the branching particle system.

Between branching times the particles diffuse with the environment-coupled
covariance dt*(I + rho(x_k1 - x_k2)) per pair; at times k/n every particle
dies and leaves 0, 1 or 2 offspring at its death position, with probabilities
driven by a shared correlated field draw truncated at sqrt(n).  Snapshots of
the empirical measure use the left-limit convention at branching times.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .kernels import (CorrelationKernel, FactorizationError, RhoKernel,
                      rho_block_matrix, sample_branching_field)

MODE_COUPLED_EXACT = "coupled-exact"
MODE_FROZEN_GRID = "frozen-grid"


class BudgetError(RuntimeError):
    """Alive-particle count exceeded the configured cap."""


class SimulationError(RuntimeError):
    """Inconsistent simulation state (non-finite positions, bad times)."""


# ---------------------------------------------------------------------------
# Genealogy bookkeeping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MultiIndex:
    """Particle label: founder id plus the child digits (1 or 2) of its line."""

    root: int
    path: tuple = ()

    @property
    def generation(self) -> int:
        return len(self.path)

    def child(self, digit: int) -> "MultiIndex":
        return MultiIndex(self.root, self.path + (digit,))

    def ancestor(self, back: int) -> "MultiIndex":
        """The ancestor `back` generations up (back=0 is the particle itself)."""
        if back < 0 or back > len(self.path):
            raise ValueError("ancestor depth out of range")
        return MultiIndex(self.root, self.path[: len(self.path) - back])


@dataclass
class ParticleSystem:
    """Alive particles at branching resolution n.

    positions[i] belongs to indices[i]; every stored particle has generation
    floor(n * time) (the alive predicate).  Time is kept as an exact Fraction
    so branching times are recognized without float drift.
    """

    n: int
    time: Fraction
    indices: list
    positions: np.ndarray
    # offspring counts drawn at the most recent branching, for genealogy audits
    last_offspring: Optional[dict] = None
    # truncated field values that drove the most recent branching (per parent)
    last_field: Optional[np.ndarray] = None

    @property
    def generation(self) -> int:
        return int(self.n * self.time)

    @property
    def particles(self) -> list:
        return list(zip(self.indices, self.positions))

    @property
    def size(self) -> int:
        return len(self.indices)

    def validate(self):
        gen = self.generation
        if any(ix.generation != gen for ix in self.indices):
            raise SimulationError("stored particle not alive at current generation")
        if self.positions.shape[0] != len(self.indices):
            raise SimulationError("positions/indices length mismatch")
        if self.positions.size and not np.all(np.isfinite(self.positions)):
            raise SimulationError("non-finite particle positions")

    def measure(self) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.n, self.positions.copy())


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Atomic measure with uniform weights 1/n at the alive positions."""

    n: int
    atoms: np.ndarray

    @property
    def mass_per_atom(self) -> float:
        return 1.0 / self.n

    @property
    def total_mass(self) -> float:
        return self.atoms.shape[0] / self.n

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]


@dataclass(frozen=True)
class MotionConfig:
    """Sub-step configuration for the coupled diffusion.

    dt is exact rational bookkeeping, 1/(n*m) for m sub-steps per branching
    interval; it must divide 1/n exactly.
    """

    dt: Fraction
    rho: RhoKernel
    mode: str = MODE_COUPLED_EXACT
    # block-diagonal spatial-clustering approximation for very large systems
    cluster: bool = False
    cluster_threshold: int = 2000


def motion_config(n: int, substeps: int, rho: RhoKernel,
                  mode: str = MODE_COUPLED_EXACT, cluster: bool = False) -> MotionConfig:
    return MotionConfig(dt=Fraction(1, n * substeps), rho=rho, mode=mode,
                        cluster=cluster)


# ---------------------------------------------------------------------------
# Motion
# ---------------------------------------------------------------------------

def _coupled_covariance_factor(positions: np.ndarray, rho: RhoKernel) -> np.ndarray:
    """Cholesky factor of I + rho-blocks; eigenvalue clipping as fallback.

    The block matrix is PSD up to quadrature noise and the added identity
    keeps the full matrix strictly positive definite, so Cholesky succeeds
    except for badly broken rho values.
    """
    m, d = positions.shape
    cov = rho_block_matrix(rho, positions)
    cov[np.diag_indices_from(cov)] += 1.0
    cov = 0.5 * (cov + cov.T)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        w = np.clip(w, 0.0, None)
        factor = v * np.sqrt(w)[None, :]
        if not np.all(np.isfinite(factor)):
            raise FactorizationError(
                "motion covariance factorization failed after clipping; "
                "rho kernel is ill-conditioned")
        return factor


def _cluster_labels(positions: np.ndarray, diameter: float) -> np.ndarray:
    """Connected components of the cell-adjacency graph at the rho support
    diameter; couplings across components are exactly zero."""
    m, d = positions.shape
    cells = np.floor(positions / diameter).astype(np.int64)
    order = np.lexsort(cells.T[::-1])
    labels = -np.ones(m, dtype=np.int64)
    cell_of = {}
    for i in order:
        cell_of.setdefault(tuple(cells[i]), []).append(i)
    current = 0
    from collections import deque
    offsets = np.array(np.meshgrid(*([[-1, 0, 1]] * d), indexing="ij")).reshape(d, -1).T
    for start_cell, members in cell_of.items():
        if labels[members[0]] >= 0:
            continue
        queue = deque([start_cell])
        seen = {start_cell}
        while queue:
            cell = queue.popleft()
            for i in cell_of.get(cell, ()):
                labels[i] = current
            for off in offsets:
                nb = tuple(np.array(cell) + off)
                if nb in cell_of and nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
        current += 1
    return labels


def motion_step(positions: np.ndarray, cfg: MotionConfig,
                rng: np.random.Generator) -> np.ndarray:
    """One Euler sub-step of the coupled diffusion for m particles.

    The stacked m*d increment is mean-zero Gaussian with block covariance
    dt*(delta_{k1 k2} I + rho(x_k1 - x_k2)), rho frozen at the pre-step
    positions.
    """
    if cfg.mode != MODE_COUPLED_EXACT:
        raise SimulationError("motion_step requires coupled-exact mode")
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    m, d = positions.shape
    if m < 1:
        raise SimulationError("motion_step needs at least one particle")
    dt = float(cfg.dt)
    sqdt = np.sqrt(dt)

    if cfg.cluster and m > cfg.cluster_threshold and np.isfinite(cfg.rho.support_radius):
        labels = _cluster_labels(positions, cfg.rho.support_radius)
        out = np.empty_like(positions)
        for lab in np.unique(labels):
            sel = labels == lab
            factor = _coupled_covariance_factor(positions[sel], cfg.rho)
            z = rng.standard_normal(factor.shape[0])
            out[sel] = positions[sel] + sqdt * (factor @ z).reshape(-1, d)
        new_positions = out
    else:
        factor = _coupled_covariance_factor(positions, cfg.rho)
        z = rng.standard_normal(m * d)
        new_positions = positions + sqdt * (factor @ z).reshape(m, d)

    if not np.all(np.isfinite(new_positions)):
        raise SimulationError("motion produced non-finite positions")
    return new_positions


def simulate_single_paths(count: int, x0: np.ndarray, t: float, steps: int,
                          rho: RhoKernel, rng: np.random.Generator) -> np.ndarray:
    """Endpoints of `count` independent one-particle motions started at x0.

    This is the m=1 case of the coupled-exact motion vectorized over
    independent replicas: each increment is N(0, dt*(I + rho(0))).
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.shape[0]
    cov = np.eye(d) + rho.rho0
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    factor = v * np.sqrt(np.clip(w, 0.0, None))[None, :]
    dt = t / steps
    pos = np.tile(x0, (count, 1))
    for _ in range(steps):
        z = rng.standard_normal((count, d))
        pos += np.sqrt(dt) * z @ factor.T
    return pos


# ---------------------------------------------------------------------------
# Branching
# ---------------------------------------------------------------------------

def branch(sys: ParticleSystem, kappa: CorrelationKernel,
           rng: np.random.Generator) -> ParticleSystem:
    """One branching event at the current (exact) branching time.

    A single field draw shared by all particles, truncated at sqrt(n), sets
    per-particle offspring probabilities P(2) = xi+/sqrt(n),
    P(0) = xi-/sqrt(n), P(1) = 1 - |xi|/sqrt(n); offspring numbers are then
    conditionally independent.  Children inherit the parent's death position.
    """
    if (sys.time * sys.n).denominator != 1:
        raise SimulationError(f"branch called away from a branching time: t={sys.time}")
    if sys.size == 0:
        return ParticleSystem(sys.n, sys.time, [], sys.positions.copy(),
                              last_offspring={}, last_field=np.empty(0))
    root_n = np.sqrt(sys.n)
    xi = sample_branching_field(kappa, sys.positions, root_n, rng)
    p_two = np.clip(xi, 0.0, None) / root_n
    p_zero = np.clip(-xi, 0.0, None) / root_n
    # truncation guarantees p_two + p_zero = |xi|/sqrt(n) <= 1
    if np.any(p_two + p_zero > 1.0 + 1e-12):
        raise AssertionError("offspring probabilities left [0,1] despite truncation")
    u = rng.random(sys.size)
    counts = np.ones(sys.size, dtype=np.int64)
    counts[u < p_two] = 2
    counts[(u >= p_two) & (u < p_two + p_zero)] = 0

    new_indices = []
    rows = []
    offspring = {}
    for i, (ix, cnt) in enumerate(zip(sys.indices, counts)):
        offspring[ix] = int(cnt)
        for digit in range(1, cnt + 1):
            new_indices.append(ix.child(digit))
            rows.append(i)
    new_positions = sys.positions[rows] if rows else np.empty((0, sys.positions.shape[1]))
    return ParticleSystem(sys.n, sys.time, new_indices, np.array(new_positions),
                          last_offspring=offspring, last_field=xi)


# ---------------------------------------------------------------------------
# Full lifecycle
# ---------------------------------------------------------------------------

@dataclass
class SimulationResult:
    snapshots: list              # (float time, EmpiricalMeasure), left limits
    extinct: bool
    extinction_time: Optional[float]
    branch_events: int
    genealogy: list              # (Fraction time, {MultiIndex: offspring count})
    final: ParticleSystem


def sample_initial(n: int, dim: int, rng: np.random.Generator, kind="uniform",
                   width=1.0, center=0.0) -> EmpiricalMeasure:
    """n i.i.d. atoms from a bounded initial density (total mass exactly 1)."""
    if kind == "uniform":
        atoms = rng.uniform(center - width / 2.0, center + width / 2.0, size=(n, dim))
    elif kind == "gauss":
        atoms = center + width * rng.standard_normal((n, dim))
    else:
        raise ValueError(f"unknown initial density kind: {kind}")
    return EmpiricalMeasure(n, atoms)


def simulate(n: int, T, m: int, init: EmpiricalMeasure, rho: RhoKernel,
             kappa: CorrelationKernel, rng: np.random.Generator, *,
             mode: str = MODE_COUPLED_EXACT, particle_cap: int = 500_000,
             snapshot_substeps: bool = False, cluster: bool = False,
             record_genealogy: bool = True) -> SimulationResult:
    """Run the branching system on [0, T], alternating m motion sub-steps per
    branching interval with one branching event at each time k/n.

    Snapshots at branching times are taken before branching (left limits).
    Extinction is a valid terminal state; exceeding particle_cap raises
    BudgetError.
    """
    T = Fraction(T)
    if (T * n).denominator != 1:
        raise SimulationError("n*T must be an integer")
    if m < 1:
        raise SimulationError("need at least one sub-step per branching interval")
    cfg = MotionConfig(dt=Fraction(1, n * m), rho=rho, mode=mode, cluster=cluster)
    if (Fraction(1, n) / cfg.dt).denominator != 1:
        raise SimulationError("sub-step must divide the branching interval exactly")

    sys = ParticleSystem(n, Fraction(0), [MultiIndex(i + 1) for i in range(init.atoms.shape[0])],
                         np.array(init.atoms, dtype=float))
    snapshots = [(0.0, sys.measure())]
    genealogy = []
    branch_events = 0
    extinct = sys.size == 0
    extinction_time = 0.0 if extinct else None

    intervals = int(T * n)
    for k in range(intervals):
        for j in range(m):
            if sys.size > 0:
                sys.positions = motion_step(sys.positions, cfg, rng)
            sys.time += cfg.dt
            at_branch_time = (j == m - 1)
            if snapshot_substeps and not at_branch_time:
                snapshots.append((float(sys.time), sys.measure()))
        # left-limit snapshot at the branching time k+1/n, before branching
        snapshots.append((float(sys.time), sys.measure()))
        if sys.size > 0:
            branch_events += sys.size
            sys = branch(sys, kappa, rng)
            if record_genealogy:
                genealogy.append((sys.time, sys.last_offspring))
            if sys.size > particle_cap:
                raise BudgetError(
                    f"particle count {sys.size} exceeded cap {particle_cap}")
            if sys.size == 0 and not extinct:
                extinct = True
                extinction_time = float(sys.time)
    sys.validate()
    return SimulationResult(snapshots=snapshots, extinct=extinct,
                            extinction_time=extinction_time,
                            branch_events=branch_events, genealogy=genealogy,
                            final=sys)


def verify_genealogy(result: SimulationResult) -> bool:
    """Check every alive particle has an unbroken ancestor line: each digit in
    its path is covered by the recorded offspring count of that ancestor."""
    offspring_at = {}
    for _, record in result.genealogy:
        offspring_at.update(record)
    for ix in result.final.indices:
        for back in range(1, ix.generation + 1):
            parent = ix.ancestor(back)
            digit = ix.path[len(ix.path) - back]
            count = offspring_at.get(parent)
            if count is None or digit > count:
                return False
    return True
