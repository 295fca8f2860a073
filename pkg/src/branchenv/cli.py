"""Experiment runner.

Parses flat ``section.key = value`` config files, derives per-task random
streams from a master seed by hash splitting, dispatches the experiment
families (simulate, moments, mild, holder, validate), and persists CSV/JSON
artifacts.  Identical configs (including the seed) produce byte-identical
CSV outputs.

Exit codes: 0 ok, 1 validation failure, 2 config error, 3 numeric error,
4 budget error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import duality as du
from . import kernels as kn
from . import measures as ms
from . import mild as md
from . import particles as pt

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_BUDGET = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Seed derivation
# ---------------------------------------------------------------------------

def derive_seed(master: int, labels) -> int:
    """Collision-resistant splitting of a 64-bit master seed by labels.

    SHA-256 over the decimal master seed and the ordered labels (strings or
    integers, length-prefixed so the mixing is order- and boundary-sensitive);
    the first 8 digest bytes, big-endian, form the derived stream seed.  The
    construction is frozen: same inputs yield the same seed on any platform.
    """
    hasher = hashlib.sha256()
    hasher.update(str(int(master)).encode())
    for label in labels:
        token = str(label).encode()
        hasher.update(b"|%d|" % len(token))
        hasher.update(token)
    return int.from_bytes(hasher.digest()[:8], "big")


def stream(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, labels))


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

ALLOWED_KEYS = {
    "experiment": {"simulate", "moments", "mild", "holder", "validate"},
    "run.seed": None, "run.workers": None, "run.output": None,
    "system.d": None, "system.n": None, "system.m": None, "system.T": None,
    "system.replicas": None, "system.cap": None,
    "kernel.h": {"box", "hat", "gauss", "zero"},
    "kernel.h_scale": None, "kernel.h_amplitude": None,
    "kernel.kappa": {"gauss", "const"},
    "kernel.kappa_scale": None, "kernel.kappa_amplitude": None,
    "init.density": {"uniform", "gauss"},
    "init.width": None, "init.center": None,
    "output.positions": {"full", "hist", "none"},
    "output.bins": None,
    "moments.jump_replicas": None, "moments.grid_nodes": None,
    "moments.grid_halfwidth": None,
    "mild.time_steps": None, "mild.paths": None, "mild.grid_nodes": None,
    "mild.grid_halfwidth": None, "mild.iterations": None,
    "holder.replicas": None,
}


class ExperimentConfig:
    """Ordered key-value configuration; raw strings are kept verbatim so the
    file round-trips bit-exactly and hashes are stable."""

    def __init__(self, entries):
        self.entries = list(entries)
        self._map = {}
        for key, value in self.entries:
            if key not in ALLOWED_KEYS:
                raise ConfigError(f"unknown config key: {key}")
            choices = ALLOWED_KEYS[key]
            if choices is not None and value not in choices:
                raise ConfigError(f"invalid value for {key}: {value}")
            if key in self._map:
                raise ConfigError(f"duplicate config key: {key}")
            self._map[key] = value
        self._validate()

    def _validate(self):
        if "experiment" not in self._map:
            raise ConfigError("missing config key: experiment")
        for key in ("run.seed",):
            if key not in self._map:
                raise ConfigError(f"missing config key: {key}")
        for key in ("system.d", "system.n", "system.m", "system.replicas",
                    "run.seed", "system.cap", "run.workers"):
            if key in self._map and int(self._map[key]) <= 0:
                raise ConfigError(f"config key must be positive: {key}")
        if "system.T" in self._map:
            T = Fraction(self._map["system.T"])
            if T <= 0:
                raise ConfigError("config key must be positive: system.T")
            if "system.n" in self._map:
                n = int(self._map["system.n"])
                if (T * n).denominator != 1:
                    raise ConfigError("system.T times system.n must be an integer")

    def raw(self, key, default=None):
        if key in self._map:
            return self._map[key]
        if default is None:
            raise ConfigError(f"missing config key: {key}")
        return default

    def integer(self, key, default=None) -> int:
        return int(self.raw(key, default))

    def decimal(self, key, default=None) -> float:
        return float(self.raw(key, default))

    def fraction(self, key, default=None) -> Fraction:
        return Fraction(self.raw(key, default))

    @property
    def experiment(self) -> str:
        return self._map["experiment"]

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.entries)

    def content_hash(self) -> str:
        """Git-style blob hash of the canonical config text."""
        body = self.to_text().encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()

    def kernel_h(self, d: int) -> kn.MatrixKernel:
        name = self.raw("kernel.h", "box")
        scale = self.decimal("kernel.h_scale", "1.0")
        amplitude = self.decimal("kernel.h_amplitude", "1.0")
        if name == "zero":
            return kn.zero_kernel(dim=d)
        return kn.KERNEL_FACTORIES[name](dim=d, scale=scale, amplitude=amplitude)

    def kernel_kappa(self) -> kn.CorrelationKernel:
        name = self.raw("kernel.kappa", "gauss")
        amplitude = self.decimal("kernel.kappa_amplitude", "1.0")
        if name == "const":
            return kn.const_correlation(amplitude)
        return kn.gauss_correlation(scale=self.decimal("kernel.kappa_scale", "1.0"),
                                    amplitude=amplitude)


def parse_config(text: str) -> ExperimentConfig:
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.strip()
        if not body or body.startswith("#"):
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = body.partition("=")
        entries.append((key.strip(), value.strip()))
    return ExperimentConfig(entries)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# Artifact writers
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, (int, float, np.floating, np.integer))
                             else v for v in row])


def write_json(path: Path, payload: dict):
    payload = {"schema": SCHEMA_VERSION, **payload}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=False)
        fh.write("\n")


def report_row(statistic, value, stderr_or_tol, passed) -> dict:
    return {"statistic": statistic, "value": value, "stderr_or_tolerance": stderr_or_tol,
            "pass": bool(passed)}


# ---------------------------------------------------------------------------
# Experiment families
# ---------------------------------------------------------------------------

def _system_params(cfg: ExperimentConfig):
    d = cfg.integer("system.d", "1")
    n = cfg.integer("system.n", "100")
    m = cfg.integer("system.m", "8")
    T = cfg.fraction("system.T", "1/4")
    reps = cfg.integer("system.replicas", "200")
    cap = cfg.integer("system.cap", "500000")
    return d, n, m, T, reps, cap


def _initial(cfg: ExperimentConfig, n, d, rng):
    return pt.sample_initial(n, d, rng, kind=cfg.raw("init.density", "uniform"),
                             width=cfg.decimal("init.width", "1.0"),
                             center=cfg.decimal("init.center", "0.0"))


def _run_forward_replica(cfg, seed, replica_id, d, n, m, T, cap, rho, kappa,
                         snapshot_substeps=False):
    rng = stream(seed, "simulate", replica_id)
    init = _initial(cfg, n, d, rng)
    return pt.simulate(n, T, m, init, rho, kappa, rng, particle_cap=cap,
                       snapshot_substeps=snapshot_substeps,
                       record_genealogy=False)


def _forward_masses_worker(payload):
    """Run a chunk of forward replicas; kernels are rebuilt in the worker
    (closures do not cross process boundaries). Returns final masses by id."""
    cfg_text, replica_ids, write_dir = payload
    cfg = parse_config(cfg_text)
    d, n, m, T, reps, cap = _system_params(cfg)
    seed = cfg.integer("run.seed")
    rho = kn.build_rho(cfg.kernel_h(d))
    kappa = cfg.kernel_kappa()
    mode = cfg.raw("output.positions", "full")
    bins = cfg.integer("output.bins", "64")
    out = []
    for r in replica_ids:
        res = _run_forward_replica(cfg, seed, r, d, n, m, T, cap, rho, kappa)
        out.append((r, res.snapshots[-1][1].total_mass))
        if write_dir is None:
            continue
        rows = []
        for t, meas in res.snapshots:
            row = [t, meas.atoms.shape[0]]
            if mode == "full":
                row.extend(meas.atoms.ravel())
            elif mode == "hist":
                hist, _ = np.histogram(meas.atoms[:, 0] if meas.atoms.size else [],
                                       bins=bins, range=(-4.0, 4.0))
                row.extend(hist)
            rows.append(row)
        header = ["time", "atom_count"]
        if mode == "hist":
            header.extend(f"bin_{i}" for i in range(bins))
        write_csv(Path(write_dir) / f"trajectory_{r:04d}.csv", header, rows)
    return out


def _replica_chunks(reps, workers):
    ids = list(range(reps))
    size = (reps + workers - 1) // workers
    return [ids[k: k + size] for k in range(0, reps, size)]


def _run_forward_batch(cfg: ExperimentConfig, write_dir) -> np.ndarray:
    """All replica work funnels through here; the pool size is the one
    parallelism decision and lives in the run.workers key."""
    reps = cfg.integer("system.replicas", "200")
    workers = cfg.integer("run.workers", "1")
    payloads = [(cfg.to_text(), chunk,
                 str(write_dir) if write_dir is not None else None)
                for chunk in _replica_chunks(reps, workers)]
    if workers > 1 and len(payloads) > 1:
        import multiprocessing
        with multiprocessing.Pool(workers) as pool:
            results = pool.map(_forward_masses_worker, payloads)
    else:
        results = [_forward_masses_worker(p) for p in payloads]
    masses = np.empty(reps)
    for chunk in results:
        for r, mass in chunk:
            masses[r] = mass
    return masses


def run_simulate(cfg: ExperimentConfig, outdir: Path) -> int:
    d, n, m, T, reps, cap = _system_params(cfg)
    seed = cfg.integer("run.seed")
    h = cfg.kernel_h(d)
    kappa = cfg.kernel_kappa()
    _run_forward_batch(cfg, outdir)
    write_json(outdir / "metadata.json", {
        "experiment": "simulate", "seed": seed, "n": n, "m": m, "d": d,
        "T": str(T), "replicas": reps,
        "kernel": {"h": h.name,
                   "h_scale": cfg.raw("kernel.h_scale", "1.0"),
                   "h_amplitude": cfg.raw("kernel.h_amplitude", "1.0"),
                   "kappa": kappa.name,
                   "kappa_scale": cfg.raw("kernel.kappa_scale", "1.0"),
                   "kappa_amplitude": cfg.raw("kernel.kappa_amplitude", "1.0")},
        "config_hash": cfg.content_hash(),
    })
    return EXIT_OK


def _moment_oracles(cfg, rho, kappa, t, seed):
    nodes = cfg.integer("moments.grid_nodes", "129")
    halfwidth = cfg.decimal("moments.grid_halfwidth", "4.0")
    grid1 = ms.symmetric_grid(halfwidth, nodes, dim=1)
    mu = du.density_on_grid(grid1, cfg.raw("init.density", "uniform"),
                            width=cfg.decimal("init.width", "1.0"),
                            center=cfg.decimal("init.center", "0.0"))
    gen2 = du.NParticleGenerator(2, 1, rho)
    grid2 = du.square_grid(halfwidth, nodes)
    f2 = du.constant_field(grid2)
    steps2 = int(np.ceil(t / (0.9 * du.stability_limit(gen2, grid2.spacing))))
    v2 = du.solve_moment_pde(f2, kappa, gen2, t, steps2)
    pde2 = du.moment_from_dual(mu, v2, 2)
    jump_reps = cfg.integer("moments.jump_replicas", "2000")
    est = du.simulate_dual_jump(f2, kappa, gen2, t, stream(seed, "jump"),
                                jump_reps, mu)
    # first moment: total mass is conserved in mean (T_t 1 = 1)
    pde1 = du.moment_from_dual(mu, du.constant_field(grid1), 1)
    return pde1, pde2, est


def run_moments(cfg: ExperimentConfig, outdir: Path) -> int:
    d, n, m, T, reps, cap = _system_params(cfg)
    if d != 1:
        raise ConfigError("moments experiment ships for system.d = 1")
    seed = cfg.integer("run.seed")
    h = cfg.kernel_h(d)
    rho = kn.build_rho(h)
    kappa = cfg.kernel_kappa()
    t = float(T)

    masses = _run_forward_batch(cfg, None)
    mc1 = float(masses.mean())
    mc1_se = float(masses.std(ddof=1) / np.sqrt(reps))
    mc2 = float((masses ** 2).mean())
    mc2_se = float((masses ** 2).std(ddof=1) / np.sqrt(reps))

    pde1, pde2, est = _moment_oracles(cfg, rho, kappa, t, seed)
    write_csv(outdir / "moment_replicas.csv", ["replica", "mass"],
              [[r, masses[r]] for r in range(reps)])
    rel2 = abs(mc2 - pde2) / max(abs(pde2), 1e-300)
    write_json(outdir / "moments.json", {
        "n": 2, "system_n": n, "t": t, "f_id": "constant-1",
        "mc_value": mc1, "mc_se": mc1_se,
        "mc2_value": mc2, "mc2_se": mc2_se,
        "pde_value": pde2, "pde1_value": pde1,
        "jump_value": est.value, "jump_se": est.stderr,
        "rel_dev": rel2,
        "test_mode": kappa.test_mode,
        "report": [
            report_row("mass_mean_vs_one", mc1, 3 * mc1_se,
                       abs(mc1 - 1.0) <= 3 * mc1_se),
            report_row("second_moment_vs_pde", mc2, max(3 * mc2_se, 0.1 * pde2),
                       abs(mc2 - pde2) <= max(3 * mc2_se, 0.1 * pde2)),
            report_row("jump_vs_pde", est.value, 3 * est.stderr,
                       abs(est.value - pde2) <= max(3 * est.stderr, 0.02 * pde2)),
        ],
        "config_hash": cfg.content_hash(),
    })
    return EXIT_OK


def _mild_once(cfg, seed, replica_id, h, kappa, t):
    nodes = cfg.integer("mild.grid_nodes", "257")
    halfwidth = cfg.decimal("mild.grid_halfwidth", "3.0")
    grid = ms.symmetric_grid(halfwidth, nodes, dim=1)
    mu = du.density_on_grid(grid, cfg.raw("init.density", "uniform"),
                            width=cfg.decimal("init.width", "1.0"),
                            center=cfg.decimal("init.center", "0.0"))
    time_steps = cfg.integer("mild.time_steps", "16")
    env = md.build_environment(h, -halfwidth, halfwidth, t, 2 * time_steps,
                               stream(seed, "env", replica_id))
    res = md.picard_solve(mu, env, kappa, t,
                          cfg.integer("mild.iterations", "6"),
                          stream(seed, "picard", replica_id),
                          time_steps=time_steps,
                          paths_per_source=cfg.integer("mild.paths", "1000"))
    return grid, env, res


def run_mild(cfg: ExperimentConfig, outdir: Path) -> int:
    d, n, m, T, reps, cap = _system_params(cfg)
    if d != 1:
        raise ConfigError("mild experiment ships for system.d = 1")
    seed = cfg.integer("run.seed")
    h = cfg.kernel_h(1)
    kappa = cfg.kernel_kappa()
    t = float(T)
    grid, env, res = _mild_once(cfg, seed, 0, h, kappa, t)

    x = grid.axes()[0]
    rows = []
    for j, tj in enumerate(res.times):
        for i in range(grid.shape[0]):
            rows.append([tj, x[i], res.u_times[j, i]])
    write_csv(outdir / "field.csv", ["time", "x", "value"], rows)
    write_csv(outdir / "picard_diffs.csv", ["iteration", "sup_diff"],
              [[k + 1, dv] for k, dv in enumerate(res.diffs)])
    md.save_environment(env, outdir / "environment.bin",
                        outdir / "environment.json",
                        seed=derive_seed(seed, ("env", 0)))
    write_json(outdir / "mild.json", {
        "t": t, "exit_fraction": res.exit_fraction,
        "diffs": res.diffs,
        "report": [report_row("picard_net_decay", res.diffs[-1] / res.diffs[0],
                              1.0, res.diffs[-1] < res.diffs[0])],
        "config_hash": cfg.content_hash(),
    })
    return EXIT_OK


def run_holder(cfg: ExperimentConfig, outdir: Path) -> int:
    d, n, m, T, reps_fwd, cap = _system_params(cfg)
    seed = cfg.integer("run.seed")
    h = cfg.kernel_h(1)
    kappa = cfg.kernel_kappa()
    t = float(T)
    reps = cfg.integer("holder.replicas", "8")
    space_fields = []
    time_fields = []
    time_steps = cfg.integer("mild.time_steps", "16")
    for r in range(reps):
        grid, env, res = _mild_once(cfg, seed, r, h, kappa, t)
        space_fields.append(res.u.values)
        time_fields.append(res.u_times)
    spacing = grid.spacing
    delta = t / time_steps
    space_moments = md.space_increment_moments(np.array(space_fields), spacing,
                                               [1, 2, 4, 8])
    # anchor away from t = 0; dyadic lags when the grid is deep enough
    anchor = time_steps // 2
    lags = [1, 2, 4, 8] if time_steps - anchor >= 8 else [1, 2, 3, 4]
    time_moments = md.time_increment_moments(np.concatenate(time_fields, axis=1),
                                             delta, lags, min_anchor=anchor)
    space_exp, space_se = ms.holder_exponent(space_moments)
    time_exp, time_se = ms.holder_exponent(time_moments)
    write_csv(outdir / "space_moments.csv", ["lag", "moment"], space_moments)
    write_csv(outdir / "time_moments.csv", ["lag", "moment"], time_moments)
    write_json(outdir / "holder.json", {
        "space_exponent": space_exp, "space_se": space_se,
        "time_exponent": time_exp, "time_se": time_se,
        "replicas": reps,
        "report": [
            report_row("space_exponent", space_exp, "(0.1, 1.15]",
                       0.1 < space_exp <= 1.15),
            report_row("time_exponent", time_exp, "(0.1, 0.65]",
                       0.1 < time_exp <= 0.65),
        ],
        "config_hash": cfg.content_hash(),
    })
    return EXIT_OK


def run_validate(cfg: ExperimentConfig, outdir: Path) -> int:
    from .validate import invariant_suite
    seed = cfg.integer("run.seed")
    rows = invariant_suite(seed)
    ok = all(r["pass"] for r in rows)
    write_json(outdir / "validate.json", {
        "report": rows, "all_pass": ok, "config_hash": cfg.content_hash(),
    })
    return EXIT_OK if ok else EXIT_FAIL


RUNNERS = {"simulate": run_simulate, "moments": run_moments, "mild": run_mild,
           "holder": run_holder, "validate": run_validate}


def run(cfg: ExperimentConfig) -> int:
    outdir = Path(cfg.raw("run.output", "out"))
    outdir.mkdir(parents=True, exist_ok=True)
    return RUNNERS[cfg.experiment](cfg, outdir)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="branchenv",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("config", help="path to a section.key = value config file")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return run(cfg)
    except (ConfigError, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (du.StabilityError, kn.FactorizationError, md.ExitRateError,
            md.ContractionFailure) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pt.BudgetError, du.JumpBudgetError) as err:
        print(f"budget error: {err}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
