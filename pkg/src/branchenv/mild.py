"""Conditional convolution (mild) representation of the density field.

Freeze one realization of the white-noise environment, estimate the
one-particle transition density conditional on it by Monte Carlo over the
driving Brownian motions, sample the spatially colored branching noise, and
Picard-iterate the convolution equation

    u_t(x) = int mu(z) p^W(0,z;t,x) dz
             + int_0^t int p^W(r,z;t,x) u_r(z) V(dr,dz),

with left-point (Ito) evaluation of the stochastic sum.  The transition
family is estimated once on a shared coarse time grid and reused across
Picard iterations, preserving the fixed-point structure.  Shipped for d = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve

from .kernels import (CorrelationKernel, MatrixKernel, WhiteNoiseGrid,
                      sample_correlated_gaussian, sample_white_noise_grid)
from .measures import Grid, GridField, MeasureError, heat_kernel


class ExitRateError(RuntimeError):
    """More than the tolerated fraction of paths left the environment grid."""


class ContractionFailure(RuntimeError):
    """Picard differences stopped decaying."""

    def __init__(self, ratio, k):
        self.ratio = ratio
        self.k = k
        super().__init__(f"Picard differences non-decaying at iteration {k}: "
                         f"ratio {ratio:.3f}")


def _step_prefix_sums(env: "FrozenEnvironment", step: int) -> np.ndarray:
    """Prefix sums of one step's increments, cached on the environment."""
    cache = env.__dict__.get("_prefix_cache")
    if cache is None:
        cache = {}
        object.__setattr__(env, "_prefix_cache", cache)
    hit = cache.get(step)
    if hit is None:
        hit = np.concatenate(([0.0], np.cumsum(env.noise.increments[step, :, 0])))
        cache[step] = hit
    return hit


# ---------------------------------------------------------------------------
# Frozen environment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrozenEnvironment:
    """One realization of the environment over [0, horizon].

    The convolution of the smoothing kernel against the stored white-noise
    increments is evaluated by grid-cell summation at arbitrary positions;
    paths whose kernel window would leave the stored domain count as exits.
    """

    noise: WhiteNoiseGrid
    kernel: MatrixKernel
    horizon: float
    seed_label: str = "env"

    @property
    def dt(self) -> float:
        return self.noise.dt

    @property
    def steps(self) -> int:
        return self.noise.steps

    @property
    def valid_interval(self) -> tuple:
        lo = float(self.noise.origin[0]) + self.kernel.support_radius
        hi = (float(self.noise.origin[0]) + self.noise.shape[0] * self.noise.spacing
              - self.kernel.support_radius)
        return lo, hi

    def _profile(self, offsets: np.ndarray) -> np.ndarray:
        if self.kernel.profile is not None:
            return self.kernel.profile(offsets[..., None])
        return self.kernel.eval(offsets[..., None])[..., 0, 0]

    def drive(self, positions: np.ndarray, step: int) -> np.ndarray:
        """Sum over cells of h(y_c - x) * dW_c for one time step.

        The indicator-profile kernel reduces to a prefix-sum difference over
        the cells whose centers fall in [x, x + scale]; general kernels use a
        windowed gather.
        """
        spacing = self.noise.spacing
        origin = float(self.noise.origin[0])
        cells = self.noise.shape[0]
        inc = self.noise.increments[step, :, 0]
        if self.kernel.box_params is not None:
            scale, amplitude = self.kernel.box_params
            prefix = _step_prefix_sums(self, step)
            lo = np.ceil((positions - origin) / spacing - 0.5).astype(np.int64)
            hi = np.floor((positions + scale - origin) / spacing - 0.5).astype(np.int64)
            lo = np.clip(lo, 0, cells)
            hi = np.clip(hi + 1, 0, cells)
            return amplitude * (prefix[hi] - prefix[np.minimum(lo, hi)])
        radius = self.kernel.support_radius
        window = int(np.ceil(2.0 * radius / spacing)) + 1
        first = np.ceil((positions - radius - origin) / spacing - 0.5).astype(np.int64)
        idx = first[:, None] + np.arange(window)[None, :]
        inside = (idx >= 0) & (idx < cells)
        centers = origin + (idx + 0.5) * spacing
        weights = self._profile(centers - positions[:, None]) * inside
        return np.einsum("qw,qw->q", weights, inc[np.clip(idx, 0, cells - 1)])


def build_environment(h: MatrixKernel, x_lo: float, x_hi: float, horizon: float,
                      time_steps: int, rng: np.random.Generator, *,
                      pad_radii: float = 4.0, spacing_divisor: float = 8.0,
                      seed_label: str = "env") -> FrozenEnvironment:
    """Environment grid padded beyond [x_lo, x_hi] by pad_radii support radii,
    with cell size support_radius / spacing_divisor."""
    if h.dim != 1:
        raise MeasureError("mild solver ships for d = 1")
    spacing = h.support_radius / spacing_divisor
    lo = x_lo - pad_radii * h.support_radius
    hi = x_hi + pad_radii * h.support_radius
    cells = int(np.ceil((hi - lo) / spacing))
    noise = sample_white_noise_grid([lo], spacing, (cells,), horizon / time_steps,
                                    time_steps, 1, rng, seed_label=seed_label)
    return FrozenEnvironment(noise=noise, kernel=h, horizon=horizon,
                             seed_label=seed_label)


def save_environment(env: FrozenEnvironment, bin_path, header_path, *,
                     seed=None) -> dict:
    """Persist the realized increments as raw little-endian doubles plus a
    JSON header sufficient for exact replay."""
    import json
    env.noise.increments.astype("<f8").tofile(bin_path)
    header = {"schema": 1, "shape": list(env.noise.increments.shape),
              "dtype": "<f8", "dt": env.noise.dt, "spacing": env.noise.spacing,
              "origin": float(env.noise.origin[0]), "horizon": env.horizon,
              "seed": seed, "seed_label": env.seed_label}
    with open(header_path, "w") as fh:
        json.dump(header, fh, indent=2)
        fh.write("\n")
    return header


def load_environment(bin_path, header_path, h: MatrixKernel) -> FrozenEnvironment:
    """Rebuild a FrozenEnvironment bit-for-bit from its persisted files."""
    import json
    with open(header_path) as fh:
        header = json.load(fh)
    shape = tuple(header["shape"])
    incs = np.fromfile(bin_path, dtype=header["dtype"]).reshape(shape).astype(float)
    noise = WhiteNoiseGrid(origin=np.array([header["origin"]]),
                           spacing=header["spacing"], shape=shape[1:-1],
                           dt=header["dt"], dim=shape[-1], increments=incs,
                           seed_label=header.get("seed_label", ""))
    return FrozenEnvironment(noise=noise, kernel=h, horizon=header["horizon"],
                             seed_label=header.get("seed_label", ""))


# ---------------------------------------------------------------------------
# Conditional transition density
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionalDensity:
    """Monte Carlo estimate of the one-particle transition density given the
    frozen environment, for a set of sources at one (r, t) pair."""

    source_time: float
    target_time: float
    sources: np.ndarray          # (S,)
    grid: Grid                   # targets
    values: np.ndarray           # (S, N), all >= 0
    paths_used: int
    bandwidth: float
    exit_fraction: float


def _binned_kde(endpoints: np.ndarray, grid: Grid, eps: float) -> np.ndarray:
    """Linear-binning KDE of (S, M) endpoints onto the grid, (S, N) out."""
    x0 = grid.origin[0]
    spacing = grid.spacing
    n = grid.shape[0]
    s, m = endpoints.shape
    halo = int(np.ceil(6.0 * np.sqrt(eps) / spacing)) + 1
    ext = n + 2 * halo
    pos = (endpoints - x0) / spacing + halo
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    keep = (base >= 0) & (base < ext - 1)
    rows = np.repeat(np.arange(s), m).reshape(s, m)
    flat_lo = (rows * ext + np.clip(base, 0, ext - 1))[keep]
    flat_hi = (rows * ext + np.clip(base + 1, 0, ext - 1))[keep]
    counts = (np.bincount(flat_lo, weights=(1.0 - frac)[keep], minlength=s * ext)
              + np.bincount(flat_hi, weights=frac[keep], minlength=s * ext))
    counts = counts.reshape(s, ext)
    offsets = np.arange(-halo, halo + 1) * spacing
    kern = heat_kernel(eps, 1, offsets ** 2)
    # FFT-backed convolution of nonnegative inputs can round to ~-1e-17
    smooth = np.maximum(convolve(counts, kern[None, :], mode="same"), 0.0)
    return smooth[:, halo:halo + n] / m


def default_bandwidth(spacing: float, elapsed: float) -> float:
    """KDE bandwidth max(spacing^2, (t - r)/16): balances binning bias against
    the short-time sharpening of the transition density."""
    return max(spacing ** 2, elapsed / 16.0)


def _simulate_bundle(env: FrozenEnvironment, sources: np.ndarray, paths: int,
                     start_step: int, stop_steps, rng: np.random.Generator):
    """Evolve paths from every source through the shared environment.

    Returns endpoints at each requested stop step, (S, paths) per stop, plus
    the count of paths that left the valid domain (frozen where they exited).
    """
    lo, hi = env.valid_interval
    s = sources.shape[0]
    pos = np.repeat(sources, paths).astype(float)
    alive = np.ones(pos.shape[0], dtype=bool)
    sqdt = np.sqrt(env.dt)
    out = {}
    stop_set = set(int(v) for v in stop_steps)
    for step in range(start_step, max(stop_set)):
        drive = env.drive(pos, step)
        move = sqdt * rng.standard_normal(pos.shape[0]) + drive
        pos = np.where(alive, pos + move, pos)
        alive &= (pos >= lo) & (pos <= hi)
        if (step + 1) in stop_set:
            out[step + 1] = pos.reshape(s, paths).copy()
    exits = int(np.count_nonzero(~alive))
    return out, exits


def estimate_conditional_density(env: FrozenEnvironment, r: float, z_set,
                                 t: float, x_grid: Grid, M: int, eps: float,
                                 rng: np.random.Generator, *,
                                 max_exit_fraction: float = 0.01) -> ConditionalDensity:
    """Estimate p^W(r, z; t, x) for each source z by running M independent
    Brownian-driven paths through the same frozen environment and smoothing
    the endpoints with the heat kernel of bandwidth eps."""
    if M < 1000:
        raise MeasureError("need at least 1e3 paths per source")
    if not r < t:
        raise MeasureError("need r < t")
    if eps <= 0:
        raise MeasureError("bandwidth must be positive")
    i0 = int(round(r / env.dt))
    i1 = int(round(t / env.dt))
    if abs(i0 * env.dt - r) > 1e-9 or abs(i1 * env.dt - t) > 1e-9:
        raise MeasureError("r and t must align with the environment time grid")
    if i1 > env.steps:
        raise MeasureError("environment does not cover [r, t]")
    sources = np.atleast_1d(np.asarray(z_set, dtype=float)).ravel()
    endpoints, exits = _simulate_bundle(env, sources, M, i0, [i1], rng)
    total = sources.size * M
    exit_fraction = exits / total
    if exit_fraction > max_exit_fraction:
        raise ExitRateError(
            f"{100 * exit_fraction:.2f}% of paths left the environment grid "
            f"(tolerated {100 * max_exit_fraction:.2f}%)")
    values = _binned_kde(endpoints[i1], x_grid, eps)
    return ConditionalDensity(source_time=r, target_time=t, sources=sources,
                              grid=x_grid, values=values, paths_used=M,
                              bandwidth=eps, exit_fraction=exit_fraction)


# ---------------------------------------------------------------------------
# Colored noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ColoredNoise:
    """Time-white, spatially kappa-correlated field increments at grid nodes."""

    grid: Grid
    dt: float
    increments: np.ndarray       # (steps, N)
    seed_label: str = "V"


def sample_colored_noise(kappa: CorrelationKernel, grid: Grid, dt: float,
                         steps: int, rng: np.random.Generator,
                         seed_label: str = "V") -> ColoredNoise:
    """Independent per-step Gaussian vectors with covariance dt * kappa."""
    nodes = grid.nodes()
    gram = kappa.eval(nodes[:, None, :], nodes[None, :, :]) * dt
    cache: dict = {}
    incs = np.array([sample_correlated_gaussian(gram, rng, cache=cache)
                     for _ in range(steps)])
    return ColoredNoise(grid=grid, dt=dt, increments=incs, seed_label=seed_label)


# ---------------------------------------------------------------------------
# Picard iteration
# ---------------------------------------------------------------------------

@dataclass
class PicardResult:
    u: GridField                 # final-time field after the last iteration
    times: np.ndarray            # (J+1,) coarse grid times
    u_times: np.ndarray          # (J+1, N) final iterate at every coarse time
    diffs: list                  # sup over the space-time grid of |u^k - u^{k-1}|
    diffs_final: list            # same sup restricted to the final time
    diff_fields: list            # final-time difference fields, one per iteration
    exit_fraction: float
    noise: ColoredNoise
    stream_log: tuple            # which substream fed which estimate


def picard_solve(mu: GridField, env: FrozenEnvironment, kappa: CorrelationKernel,
                 t: float, iterations: int, rng: np.random.Generator, *,
                 time_steps: int = 16, paths_per_source: int = 1000,
                 max_exit_fraction: float = 0.01) -> PicardResult:
    """Picard-iterate the conditional convolution equation.

    The transition family p^W(r_i, z; r_j, x) is estimated once per source
    time on the shared coarse grid {r_j = j t / time_steps} and reused across
    iterations; one colored-noise realization is shared as well.  Returns the
    final iterate and the successive sup-norm differences at time t.
    """
    grid = mu.grid
    if grid.dim != 1:
        raise MeasureError("mild solver ships for d = 1")
    if iterations < 1:
        raise MeasureError("need at least one Picard iteration")
    J = int(time_steps)
    delta = t / J
    micro = int(round(delta / env.dt))
    if micro < 1 or abs(micro * env.dt - delta) > 1e-9:
        raise MeasureError("coarse step must be a multiple of the environment step")
    if int(round(t / env.dt)) > env.steps:
        raise MeasureError("environment does not cover [0, t]")
    n = grid.shape[0]
    nodes = grid.axes()[0]
    dz = grid.spacing

    streams = rng.spawn(J + 1)
    stream_log = tuple([f"pW:{i}" for i in range(J)] + ["V"])

    # transition family P[(i, j)][s, x] = p^W(r_i, z_s; r_j, x)
    family = {}
    exits_total = 0
    paths_total = 0
    for i in range(J):
        stops = [(j + 1) * micro for j in range(i, J)]
        endpoints, exits = _simulate_bundle(env, nodes, paths_per_source,
                                            i * micro, stops, streams[i])
        exits_total += exits
        paths_total += n * paths_per_source
        for j in range(i + 1, J + 1):
            eps = default_bandwidth(dz, (j - i) * delta)
            family[(i, j)] = _binned_kde(endpoints[j * micro], grid, eps)
    exit_fraction = exits_total / paths_total
    if exit_fraction > max_exit_fraction:
        raise ExitRateError(
            f"{100 * exit_fraction:.2f}% of transition paths left the "
            f"environment grid (tolerated {100 * max_exit_fraction:.2f}%)")

    noise = sample_colored_noise(kappa, grid, delta, J, streams[J])

    w_mu = mu.values * dz
    mu_term = np.empty((J + 1, n))
    mu_term[0] = mu.values
    for j in range(1, J + 1):
        mu_term[j] = w_mu @ family[(0, j)]

    u_prev = np.tile(mu.values, (J + 1, 1))
    diffs = []
    diffs_final = []
    diff_fields = []
    for k in range(1, iterations + 1):
        u_cur = np.empty_like(u_prev)
        u_cur[0] = mu.values
        for j in range(1, J + 1):
            acc = mu_term[j].copy()
            for i in range(j):
                acc += (u_prev[i] * noise.increments[i] * dz) @ family[(i, j)]
            u_cur[j] = acc
        d_k = float(np.max(np.abs(u_cur - u_prev)))
        diffs.append(d_k)
        diffs_final.append(float(np.max(np.abs(u_cur[J] - u_prev[J]))))
        diff_fields.append(u_cur[J] - u_prev[J])
        # the decay is factorial over compositions, not per-step monotone:
        # flag only persistent failure (two consecutive rises, or no net decay)
        floor = 1e-13 * max(1.0, float(np.max(np.abs(u_cur))))
        if k >= 4 and d_k > floor:
            two_rises = diffs[-2] > diffs[-3] and d_k > diffs[-2]
            no_net_decay = d_k >= diffs[0] > floor
            if two_rises or no_net_decay:
                raise ContractionFailure(d_k / diffs[-2], k)
        u_prev = u_cur

    times = np.arange(J + 1) * delta
    u_field = GridField(grid=grid, values=u_cur[J], time_label=t)
    return PicardResult(u=u_field, times=times, u_times=u_cur, diffs=diffs,
                        diffs_final=diffs_final, diff_fields=diff_fields,
                        exit_fraction=exit_fraction, noise=noise,
                        stream_log=stream_log)


# ---------------------------------------------------------------------------
# Increment moments of the solution field (inputs for the Hoelder estimator)
# ---------------------------------------------------------------------------

def space_increment_moments(fields: np.ndarray, spacing: float, lag_nodes,
                            moment_order: int = 2) -> list:
    """(lag, mean |u(x + lag) - u(x)|^order) over rows of `fields`."""
    fields = np.atleast_2d(fields)
    out = []
    for ln in lag_nodes:
        inc = fields[:, ln:] - fields[:, :-ln]
        out.append((ln * spacing, float(np.mean(np.abs(inc) ** moment_order))))
    return out


def time_increment_moments(u_times: np.ndarray, delta: float, lag_steps,
                           min_anchor: int, moment_order: int = 2) -> list:
    """(lag, mean |u(r_j + lag, x) - u(r_j, x)|^order) over anchors j >= min_anchor.

    Anchoring away from zero avoids the short-time blowup of the density
    increments near the initial time.
    """
    u_times = np.atleast_2d(u_times)
    J = u_times.shape[0] - 1
    out = []
    for ls in lag_steps:
        if min_anchor > J - ls:
            raise MeasureError(f"lag {ls} does not fit anchors >= {min_anchor} "
                               f"on a {J}-step grid")
        incs = []
        for j in range(min_anchor, J - ls + 1):
            incs.append(u_times[j + ls] - u_times[j])
        inc = np.concatenate(incs)
        out.append((ls * delta, float(np.mean(np.abs(inc) ** moment_order))))
    return out
