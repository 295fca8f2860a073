"""Cross-module invariant battery for the `validate` experiment.

Each check runs at a small scale and yields one report row
(statistic, value, stderr-or-tolerance, pass/fail); the CLI exits nonzero
when any row fails.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from . import duality as du
from . import kernels as kn
from . import measures as ms
from . import mild as md
from . import particles as pt


def _row(statistic, value, tol, passed):
    return {"statistic": statistic, "value": float(value),
            "stderr_or_tolerance": tol, "pass": bool(passed)}


def invariant_suite(seed: int) -> list:
    from .cli import derive_seed, stream
    rows = []
    box = kn.box_kernel(dim=1)
    rho = kn.build_rho(box)

    # --- kernels ---------------------------------------------------------
    xs = np.linspace(-1.8, 1.8, 41)[:, None]
    sym = float(np.max(np.abs(rho.eval(xs) - rho.eval(-xs).transpose(0, 2, 1))))
    rows.append(_row("rho_transpose_reflection", sym, 1e-8, sym <= 1e-8))

    pos = stream(seed, "val", "psd").uniform(-2, 2, size=(10, 1))
    eig = float(np.min(np.linalg.eigvalsh(kn.rho_block_matrix(rho, pos))))
    rows.append(_row("rho_quadratic_form_min_eig", eig, -1e-8, eig >= -1e-8))

    hs = float(np.max(np.linalg.norm(rho.eval(xs), axis=(1, 2))))
    rows.append(_row("rho_hs_norm_vs_l2", hs, box.l2_norm_sq,
                     hs <= box.l2_norm_sq + 1e-8))

    trunc = np.sqrt(64.0)
    vals = kn.sample_branching_field(kn.gauss_correlation(amplitude=100.0),
                                     np.zeros((50, 1)), trunc,
                                     stream(seed, "val", "clamp"))
    clamp = float(np.max(np.abs(vals)))
    rows.append(_row("branching_field_clamped", clamp, trunc, clamp <= trunc))

    a = kn.sample_branching_field(kn.gauss_correlation(), xs[:6], 3.0,
                                  stream(seed, "val", "rep"))
    b = kn.sample_branching_field(kn.gauss_correlation(), xs[:6], 3.0,
                                  stream(seed, "val", "rep"))
    rows.append(_row("seed_reproducibility", float(np.max(np.abs(a - b))), 0.0,
                     np.array_equal(a, b)))

    noise = kn.sample_white_noise_grid([0.0], 0.25, (150,), 0.01, 80, 1,
                                       stream(seed, "val", "noise"))
    target = 0.01 * 0.25
    sample = noise.increments.ravel()
    dev = abs(float(sample.var()) - target)
    tol = 5 * target * np.sqrt(2.0 / sample.size)
    rows.append(_row("white_noise_variance", dev, tol, dev <= tol))

    # --- particles -------------------------------------------------------
    rng = stream(seed, "val", "sim")
    init = pt.sample_initial(25, 1, rng)
    res = pt.simulate(25, Fraction(1, 5), 2, init, rho, kn.gauss_correlation(), rng)
    book = all(round(meas.total_mass * 25) == meas.atoms.shape[0]
               for _, meas in res.snapshots)
    rows.append(_row("mass_bookkeeping", 1.0 if book else 0.0, 0, book))
    gene = pt.verify_genealogy(res)
    rows.append(_row("genealogy_soundness", 1.0 if gene else 0.0, 0, gene))

    paths = pt.simulate_single_paths(20000, np.zeros(1), 0.25, 8, rho,
                                     stream(seed, "val", "paths"))
    var = float(paths.var())
    tol = 5 * 0.5 * np.sqrt(2.0 / paths.shape[0])
    rows.append(_row("one_particle_variance", abs(var - 0.5), tol,
                     abs(var - 0.5) <= tol))

    masses = []
    for r in range(150):
        sub = stream(seed, "val", "mass", r)
        res_r = pt.simulate(20, Fraction(1, 4), 1, pt.sample_initial(20, 1, sub),
                            rho, kn.gauss_correlation(), sub)
        masses.append(res_r.snapshots[-1][1].total_mass)
    masses = np.array(masses)
    se = float(masses.std(ddof=1) / np.sqrt(masses.size))
    dev = abs(float(masses.mean()) - 1.0)
    rows.append(_row("total_mass_martingale", dev, 3 * se, dev <= 3 * se + 1e-12))

    # --- measures --------------------------------------------------------
    mu = pt.EmpiricalMeasure(4, np.array([[0.0], [1.0], [0.5], [-0.5]]))
    lin = abs(ms.pair(mu, ms.constant_function(1.0)) - mu.total_mass)
    rows.append(_row("pair_constant_is_mass", lin, 0.0, lin == 0.0))

    grid = ms.symmetric_grid(5.0, 161, dim=1)
    dens = ms.kde(mu, 0.05, grid)
    mass = float(dens.values.sum() * grid.spacing)
    rows.append(_row("kde_mass", abs(mass - mu.total_mass), 0.01,
                     abs(mass - mu.total_mass) <= 0.01))
    rows.append(_row("kde_nonnegative", float(dens.values.min()), 0.0,
                     dens.values.min() >= 0.0))

    lags = [0.5 ** k for k in range(1, 6)]
    exp_est, _ = ms.holder_exponent([(l, l) for l in lags])
    rows.append(_row("holder_exact_power_law", abs(exp_est - 0.5), 1e-12,
                     abs(exp_est - 0.5) <= 1e-12))

    # --- duality ---------------------------------------------------------
    gen2 = du.NParticleGenerator(2, 1, rho)
    g2 = du.square_grid(3.0, 49)
    const = du.apply_generator(du.constant_field(g2), gen2)
    cval = float(np.max(np.abs(const.values[2:-2, 2:-2])))
    rows.append(_row("generator_kills_constants", cval, 1e-12, cval <= 1e-12))

    gen1 = du.NParticleGenerator(1, 1, rho)
    g1 = ms.symmetric_grid(2.0, 41, dim=1)
    quad = du.apply_generator(ms.GridField(g1, g1.axes()[0] ** 2), gen1)
    qerr = float(np.max(np.abs(quad.values[1:-1] - 2.0)))
    rows.append(_row("generator_exact_on_quadratics", qerr, 1e-9, qerr <= 1e-9))

    mu1 = du.density_on_grid(ms.symmetric_grid(3.0, 49, dim=1), "uniform")
    f2 = du.constant_field(du.square_grid(3.0, 49))
    steps = int(np.ceil(0.25 / (0.9 * du.stability_limit(gen2, f2.grid.spacing))))
    v2 = du.solve_moment_pde(f2, kn.const_correlation(1.0), gen2, 0.25, steps)
    ode = du.moment_from_dual(mu1, v2, 2)
    rows.append(_row("ode_reduction_expt", abs(ode - np.exp(0.25)), 0.01,
                     abs(ode - np.exp(0.25)) <= 0.01))

    est = du.simulate_dual_jump(f2, kn.gauss_correlation(), gen2, 1e-4,
                                stream(seed, "val", "jump"), 200, mu1)
    direct = du.moment_from_dual(mu1, f2, 2)
    dev = abs(est.value - direct)
    rows.append(_row("jump_short_time_limit", dev, 3 * est.stderr + 1e-3,
                     dev <= 3 * est.stderr + 1e-3))

    # --- mild ------------------------------------------------------------
    mgrid = ms.symmetric_grid(2.0, 33, dim=1)
    env = md.build_environment(box, -2.0, 2.0, 0.25, 8, stream(seed, "val", "env"))
    pres = md.picard_solve(du.density_on_grid(mgrid, "uniform"), env,
                           kn.const_correlation(0.0), 0.25, 4,
                           stream(seed, "val", "picard"), time_steps=4,
                           paths_per_source=1000)
    tail = float(max(pres.diffs[1:]))
    rows.append(_row("picard_kappa0_fixed_point", tail, 0.0, tail == 0.0))

    cn = md.sample_colored_noise(kn.const_correlation(1.0), mgrid, 0.1, 3,
                                 stream(seed, "val", "colored"))
    flat = float(max(np.max(np.abs(r - r[0])) for r in cn.increments))
    rows.append(_row("colored_noise_rank_one", flat, 1e-9, flat <= 1e-9))

    c1 = md.estimate_conditional_density(env, 0.0, [0.0], 0.25, mgrid, 1000,
                                         0.01, stream(seed, "val", "cdens"))
    c2 = md.estimate_conditional_density(env, 0.0, [0.0], 0.25, mgrid, 1000,
                                         0.01, stream(seed, "val", "cdens"))
    rows.append(_row("environment_replay_identical",
                     float(np.max(np.abs(c1.values - c2.values))), 0.0,
                     np.array_equal(c1.values, c2.values)))

    # --- cli seed splitting ----------------------------------------------
    same = derive_seed(seed, ("a", 1)) == derive_seed(seed, ("a", 1))
    diff = derive_seed(seed, ("a", 1)) != derive_seed(seed, (1, "a"))
    rows.append(_row("seed_split_deterministic", 1.0 if same else 0.0, 0, same))
    rows.append(_row("seed_split_order_sensitive", 1.0 if diff else 0.0, 0, diff))
    return rows
