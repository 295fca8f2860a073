"""Render simulation outputs into figures.

Five figure kinds, one per experiment family:

  mass     trajectory fan of the total mass X_t(1) from trajectory CSVs
  density  solution field u_t(x) surface from a long-format field CSV
  moments  Monte Carlo vs oracle bars with error bars from a moments JSON
  picard   iteration-difference decay curve on a log scale
  holder   log-log lag-moment regression scatter with fitted slope

Inputs are the documented CSV/JSON schemas only; JSON reports with an unknown
schema version are refused, as is overwriting an existing output without
--force.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

KNOWN_SCHEMA = 1
KINDS = ("mass", "density", "moments", "picard", "holder")


class RenderError(RuntimeError):
    pass


@dataclass
class PlotSpec:
    inputs: list
    kind: str
    output: str
    xlabel: str = ""
    ylabel: str = ""
    force: bool = False


def read_csv_columns(path, required):
    """Parse a CSV, returning the required columns as float arrays.

    Rows may carry extra unnamed fields (flattened positions); those are
    ignored here.
    """
    path = Path(path)
    if not path.exists():
        raise RenderError(f"input does not exist: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise RenderError(f"{path}: empty file")
        missing = [c for c in required if c not in header]
        if missing:
            raise RenderError(f"{path}: missing columns {', '.join(missing)}")
        idx = [header.index(c) for c in required]
        rows = [[float(row[i]) for i in idx] for row in reader if row]
    if not rows:
        raise RenderError(f"{path}: no rows")
    data = np.array(rows)
    return {c: data[:, k] for k, c in enumerate(required)}


def read_report(path):
    path = Path(path)
    if not path.exists():
        raise RenderError(f"input does not exist: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise RenderError(f"{path}: not valid JSON ({err})")
    if payload.get("schema") != KNOWN_SCHEMA:
        raise RenderError(f"{path}: unknown JSON schema version "
                          f"{payload.get('schema')!r}")
    return payload


def _new_axes(spec, default_x, default_y):
    fig, ax = plt.subplots(figsize=(6.4, 4.2), dpi=110)
    ax.set_xlabel(spec.xlabel or default_x)
    ax.set_ylabel(spec.ylabel or default_y)
    return fig, ax


def render_mass(spec):
    fig, ax = _new_axes(spec, "time", "total mass")
    for k, path in enumerate(spec.inputs):
        cols = read_csv_columns(path, ["time", "atom_count"])
        counts = cols["atom_count"]
        # n initial atoms carry total mass one, so counts[0] recovers n
        n = counts[0] if counts[0] > 0 else 1.0
        ax.plot(cols["time"], counts / n, color="#d62728", alpha=0.85,
                linewidth=1.4, antialiased=False,
                label="replica" if k == 0 else None)
    ax.set_title("total-mass trajectories")
    return fig


def render_density(spec):
    cols = read_csv_columns(spec.inputs[0], ["time", "x", "value"])
    times = np.unique(cols["time"])
    xs = np.unique(cols["x"])
    grid = np.full((times.size, xs.size), np.nan)
    t_idx = np.searchsorted(times, cols["time"])
    x_idx = np.searchsorted(xs, cols["x"])
    grid[t_idx, x_idx] = cols["value"]
    if np.any(np.isnan(grid)):
        raise RenderError(f"{spec.inputs[0]}: field rows do not fill the time/x grid")
    fig, ax = _new_axes(spec, "x", "time")
    mesh = ax.pcolormesh(xs, times, grid, shading="nearest", cmap="viridis")
    fig.colorbar(mesh, ax=ax, label="u_t(x)")
    ax.set_title("density field")
    return fig


def render_moments(spec):
    rep = read_report(spec.inputs[0])
    for key in ("mc_value", "pde_value", "jump_value"):
        if key not in rep:
            raise RenderError(f"{spec.inputs[0]}: missing columns {key}")
    labels = ["forward MC", "dual PDE", "dual jumps"]
    values = [rep["mc_value"], rep["pde_value"], rep["jump_value"]]
    errors = [3 * rep.get("mc_se", 0.0), 0.0, 3 * rep.get("jump_se", 0.0)]
    fig, ax = _new_axes(spec, "", "moment value")
    ax.bar(labels, values, yerr=errors, capsize=6,
           color=["#1f77b4", "#2ca02c", "#9467bd"])
    title = f"moment comparison (t={rep.get('t', '?')})"
    if rep.get("test_mode"):
        title += " [constant-kappa test mode]"
    ax.set_title(title)
    return fig


def render_picard(spec):
    cols = read_csv_columns(spec.inputs[0], ["iteration", "sup_diff"])
    fig, ax = _new_axes(spec, "iteration", "sup-norm difference")
    positive = cols["sup_diff"] > 0
    ax.semilogy(cols["iteration"][positive], cols["sup_diff"][positive],
                marker="o", color="#1f77b4")
    ax.set_title("Picard iteration differences")
    return fig


def render_holder(spec):
    cols = read_csv_columns(spec.inputs[0], ["lag", "moment"])
    lags, moments = cols["lag"], cols["moment"]
    if np.any(lags <= 0) or np.any(moments <= 0):
        raise RenderError(f"{spec.inputs[0]}: lags and moments must be positive")
    x, y = np.log(lags), np.log(moments)
    slope, intercept = np.polyfit(x, y, 1)
    fig, ax = _new_axes(spec, "lag", "mean squared increment")
    ax.loglog(lags, moments, "o", color="#1f77b4", label="moments")
    ax.loglog(lags, np.exp(intercept + slope * x), "-", color="#d62728",
              label=f"fit: exponent {slope / 2:.3f}")
    ax.legend()
    ax.set_title("increment moments, log-log regression")
    return fig


RENDERERS = {"mass": render_mass, "density": render_density,
             "moments": render_moments, "picard": render_picard,
             "holder": render_holder}


def render(spec: PlotSpec) -> Path:
    """Render one figure; refuses output collisions unless spec.force."""
    if spec.kind not in RENDERERS:
        raise RenderError(f"unknown plot kind: {spec.kind}")
    if not spec.inputs:
        raise RenderError("no inputs given")
    out = Path(spec.output)
    if out.exists() and not spec.force:
        raise RenderError(f"output exists (pass --force to overwrite): {out}")
    fig = RENDERERS[spec.kind](spec)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, metadata={"Software": "branchplots"})
    plt.close(fig)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="branchplots",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--kind", required=True, choices=KINDS)
    parser.add_argument("--input", dest="inputs", action="append", required=True,
                        help="input file (repeatable for trajectory fans)")
    parser.add_argument("--output", required=True, help="output image path")
    parser.add_argument("--xlabel", default="")
    parser.add_argument("--ylabel", default="")
    parser.add_argument("--force", action="store_true",
                        help="overwrite an existing output file")
    args = parser.parse_args(argv)
    spec = PlotSpec(inputs=args.inputs, kind=args.kind, output=args.output,
                    xlabel=args.xlabel, ylabel=args.ylabel, force=args.force)
    try:
        render(spec)
        return 0
    except RenderError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
