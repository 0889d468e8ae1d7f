"""Benchmark harness: sweep experiments, timing tables, and scaling fits.

Reproduces the solver study at desk scale. For each geometry family and
each sweep point the harness builds the original compressed solver once
(the sunk cost the update method reuses), then measures

* ``T_new_p`` -- precompute of the update solver: component factorizations
  of the update, dense assembly and factorization of the piece block, and
  the Woodbury capacitance setup, all reusing the original solver;
* ``T_hbs_p`` -- the comparison baseline: compressing and inverting a
  from-scratch solver on the perturbed geometry;
* ``T_new_s`` / ``T_hbs_s`` -- one solve through either solver;
* ``E`` -- relative error at interior targets against the exact potential
  of random exterior charges (the right-hand sides are manufactured, so
  the true solution is known);
* ``k``, ``k0``, optionally ``k_opt`` -- recompressed and initial rank of
  the keep-to-cut factor, and its SVD rank when the dense oracle is on.

Every timed phase runs once as a discarded warmup and then ``repeats``
more times, reporting the minimum. With a fixed seed, E and all rank
columns are bit-identical across runs; timings of course are not.

Output is one CSV per experiment (header exactly matching the row type),
a companion ``*_summary.csv`` with least-squares log-log slopes per timed
column, and optionally a minimal SVG log-log plot with a slope-1
reference line.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path

import numpy as np

from .geometry import (circle_with_bump, discretize_trapezoid, Circle,
                       make_perturbation, nose_base_width,
                       rounded_square_with_nose, star_with_refined_panels)
from .hbs import apply_inverse, compress_hbs, invert_hbs
from .kernel import assemble_dense, boundary_data, make_charges
from .oracle import DENSE_CAP, dense_block_kc, potential_error, svd_rank
from .update import (assemble_extended_rhs, build_perturbed_solver,
                     factor_update, solve_perturbed)

#: Accuracy contract on the relative interior-potential error; exceeding it
#: on any row makes the ``run`` subcommand exit with code 2.
E_THRESHOLD = 1e-8

#: Fixed window angle of the bump-fixed family: the window that holds 99
#: nodes at N_o = 2000 and proportionally more as N_o grows.
THETA_FIXED = 99 * 2 * np.pi / 2000

_EXIT_OK = 0
_EXIT_CONFIG = 1
_EXIT_ACCURACY = 2


# ---------------------------------------------------------------------------
# experiment registry
# ---------------------------------------------------------------------------


def _identity_geometry(N):
    pg = make_perturbation(discretize_trapezoid(Circle(), N), None)
    pg.label = "identity"
    return pg


@dataclass(frozen=True)
class Experiment:
    """One geometry family: a builder mapping a sweep value to a geometry.

    ``x_field`` names the row column used as abscissa for scaling fits and
    plots: N_o for the N_o sweeps, N_p for star-refine whose N_o is fixed
    while the replaced panels refine.
    """

    name: str
    build: callable
    sweep: tuple
    x_field: str = "N_o"
    sweep_unit: str = "N_o"


EXPERIMENTS = {
    "nose-thinning": Experiment(
        "nose-thinning", lambda N: rounded_square_with_nose(N // 16),
        sweep=(2048, 4096, 8192, 16384, 32768)),
    "nose-fixed": Experiment(
        "nose-fixed",
        lambda N: rounded_square_with_nose(N // 16, d=nose_base_width()),
        sweep=(2048, 4096, 8192, 16384)),
    "bump-shrinking": Experiment(
        "bump-shrinking", lambda N: circle_with_bump(N, n_cut=199),
        sweep=(2000, 4000, 8000, 16000, 32000)),
    "bump-fixed": Experiment(
        "bump-fixed", lambda N: circle_with_bump(N, theta=THETA_FIXED),
        sweep=(2000, 4000, 8000, 16000)),
    "star-refine": Experiment(
        "star-refine", lambda lv: star_with_refined_panels(lv),
        sweep=(1, 2, 3, 4, 5, 6, 7), x_field="N_p", sweep_unit="levels"),
    "identity": Experiment(
        "identity", _identity_geometry, sweep=(1000, 2000)),
}


# ---------------------------------------------------------------------------
# rows
# ---------------------------------------------------------------------------


@dataclass
class ExperimentRow:
    """One sweep point. Field order is the CSV column order."""

    geometry: str
    N_o: int
    N_p: int
    N_c: int
    T_new_p: float
    T_hbs_p: float
    r_p: float
    T_new_s: float
    T_hbs_s: float
    r_s: float
    E: float
    k: int
    k0: int
    k_opt: int | None = None
    break_even: float | None = None

    def __post_init__(self):
        # rel_tol covers the %.6e rounding of CSV round-trips
        for ratio, num, den in (("r_p", self.T_new_p, self.T_hbs_p),
                                ("r_s", self.T_new_s, self.T_hbs_s)):
            if not math.isclose(getattr(self, ratio), num / den,
                                rel_tol=1e-5):
                raise ValueError(f"{ratio} is not the quotient of its times")


ROW_FIELDS = [f.name for f in dataclass_fields(ExperimentRow)]
_INT_FIELDS = {"N_o", "N_p", "N_c", "k", "k0", "k_opt"}
_TIMED_COLUMNS = ("T_new_p", "T_hbs_p", "T_new_s", "T_hbs_s")


def _format_cell(name, value):
    if value is None:
        return ""
    if name in _INT_FIELDS:
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.6e}"
    return str(value)


def write_rows(path, rows):
    """Write rows as CSV; the header matches the row field order exactly."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROW_FIELDS)
        for row in rows:
            writer.writerow(_format_cell(name, getattr(row, name))
                            for name in ROW_FIELDS)
    return path


def read_rows(path):
    """Read a row CSV written by :func:`write_rows`."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ROW_FIELDS:
            raise ValueError(f"{path}: header does not match ExperimentRow "
                             f"fields: {header}")
        rows = []
        for record in reader:
            kwargs = {}
            for name, cell in zip(ROW_FIELDS, record):
                if cell == "":
                    kwargs[name] = None
                elif name == "geometry":
                    kwargs[name] = cell
                elif name in _INT_FIELDS:
                    kwargs[name] = int(cell)
                else:
                    kwargs[name] = float(cell)
            rows.append(ExperimentRow(**kwargs))
    return rows


# ---------------------------------------------------------------------------
# timing and per-point measurement
# ---------------------------------------------------------------------------


def _time_min(fn, repeats):
    """Run ``fn`` once as warmup, then ``repeats`` timed runs; keep the min.

    Returns ``(result, seconds)`` with the result of the warmup run (all
    runs produce equal values; the factorizations are deterministic).
    """
    result = fn()
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return result, best


def run_point(experiment: Experiment, value, eps=1e-10, seed=0, repeats=3,
              dense_oracle=False) -> ExperimentRow:
    """Measure one sweep point of one experiment."""
    pg = experiment.build(value)
    new_disc = pg.new_discretization()
    charges = make_charges(new_disc, seed=seed)

    # The original geometry's compressed solver is the sunk cost the update
    # method reuses; it is built outside every timer.
    rep = compress_hbs(pg.original, eps)
    hbs_solver = invert_hbs(rep)

    def build_update():
        uf = factor_update(rep, pg, eps, combined=True)
        A_pp = assemble_dense(pg.new_part) if pg.n_p else None
        return uf, build_perturbed_solver(hbs_solver, A_pp, uf)

    (uf, perturbed_solver), T_new_p = _time_min(build_update, repeats)

    def build_scratch():
        return invert_hbs(compress_hbs(new_disc, eps))

    scratch_solver, T_hbs_p = _time_min(build_scratch, repeats)

    f_ext = assemble_extended_rhs(pg, boundary_data(pg.keep_part(), charges),
                                  boundary_data(pg.new_part, charges)
                                  if pg.n_p else None)
    (sigma_k, _, sigma_p), T_new_s = _time_min(
        lambda: solve_perturbed(perturbed_solver, f_ext), repeats)

    f_new = boundary_data(new_disc, charges)
    _, T_hbs_s = _time_min(lambda: apply_inverse(scratch_solver, f_new),
                           repeats)

    E = potential_error(pg, sigma_k, sigma_p, charges)

    k_opt = None
    if dense_oracle and pg.n_c and max(pg.n_k, pg.n_c) <= DENSE_CAP:
        k_opt = svd_rank(dense_block_kc(pg), eps)

    break_even = None
    gain = T_hbs_p - T_new_p
    extra = T_new_s - T_hbs_s
    if gain > 0 and extra > 0:
        break_even = gain / extra

    return ExperimentRow(
        geometry=pg.label, N_o=pg.n_o, N_p=pg.n_p, N_c=pg.n_c,
        T_new_p=T_new_p, T_hbs_p=T_hbs_p, r_p=T_new_p / T_hbs_p,
        T_new_s=T_new_s, T_hbs_s=T_hbs_s, r_s=T_new_s / T_hbs_s,
        E=E, k=uf.k_kc, k0=uf.k0_kc, k_opt=k_opt, break_even=break_even)


def run_experiment(name, eps=1e-10, sweep=None, seed=0, repeats=3,
                   dense_oracle=False, parallel=False, log=None):
    """Run one experiment's sweep and return its rows in sweep order."""
    experiment = EXPERIMENTS[name]
    values = experiment.sweep if sweep is None else tuple(sweep)

    def point(value):
        row = run_point(experiment, value, eps=eps, seed=seed,
                        repeats=repeats, dense_oracle=dense_oracle)
        if log is not None:
            log(f"  {name} {experiment.sweep_unit}={value}: N_o={row.N_o} "
                f"N_p={row.N_p} E={row.E:.2e} r_p={row.r_p:.2f}")
        return row

    if parallel:
        if log is not None:
            log(f"  {name}: running {len(values)} points concurrently; "
                "timings share the machine and are not isolated")
        with ThreadPoolExecutor(max_workers=min(4, len(values))) as pool:
            return list(pool.map(point, values))
    return [point(value) for value in values]


# ---------------------------------------------------------------------------
# scaling fits and tables
# ---------------------------------------------------------------------------


def fit_scaling(rows, x_field=None, columns=_TIMED_COLUMNS):
    """Least-squares slope of log(time) vs log(x) for each timed column.

    ``x_field`` defaults to N_o and should be N_p for star-refine, whose
    N_o is fixed. Requires at least 4 rows for a meaningful fit.
    """
    if len(rows) < 4:
        raise ValueError(f"need >= 4 rows to fit a slope, got {len(rows)}")
    x = np.log([getattr(row, x_field or "N_o") for row in rows])
    slopes = {}
    for column in columns:
        y = np.log([getattr(row, column) for row in rows])
        slopes[column] = float(np.polyfit(x, y, 1)[0])
    return slopes


def write_summary(path, slopes, x_field="N_o"):
    """Write per-column slopes as a small CSV separate from the row file."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["column", f"slope_vs_{x_field}"])
        for column, slope in slopes.items():
            writer.writerow([column, f"{slope:.4f}"])
    return path


def render_table(rows):
    """Render rows as an aligned text table (header in field order)."""
    cells = [ROW_FIELDS] + [
        [_format_cell(name, getattr(row, name)) or "-" for name in ROW_FIELDS]
        for row in rows]
    widths = [max(len(line[i]) for line in cells)
              for i in range(len(ROW_FIELDS))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(line, widths))
                     for line in cells)


# ---------------------------------------------------------------------------
# minimal SVG log-log plot
# ---------------------------------------------------------------------------

_SVG_COLORS = ("#1f6feb", "#d1242f", "#1a7f37", "#9a6700")


def render_svg(rows, x_field="N_o", columns=_TIMED_COLUMNS,
               width=640, height=440):
    """Minimal log-log plot: one polyline per timed column, log-spaced
    axis ticks, and a dashed slope-1 reference line."""
    margin = 60
    xs = np.array([getattr(row, x_field) for row in rows], dtype=float)
    series = {col: np.array([getattr(row, col) for row in rows])
              for col in columns}
    all_t = np.concatenate(list(series.values()))
    lx0, lx1 = math.log10(xs.min()), math.log10(xs.max())
    ly0, ly1 = math.log10(all_t.min()), math.log10(all_t.max())
    ly0, ly1 = ly0 - 0.2, ly1 + 0.2
    if lx1 - lx0 < 1e-9:
        lx1 = lx0 + 1.0

    def px(v):
        return margin + (math.log10(v) - lx0) / (lx1 - lx0) * (width - 2 * margin)

    def py(v):
        return height - margin - (math.log10(v) - ly0) / (ly1 - ly0) * (height - 2 * margin)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
             f'y2="{height - margin}" stroke="black"/>',
             f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
             f'y2="{height - margin}" stroke="black"/>']
    for d in range(math.ceil(lx0), math.floor(lx1) + 1):
        x = px(10.0 ** d)
        parts.append(f'<line x1="{x:.1f}" y1="{height - margin}" x2="{x:.1f}" '
                     f'y2="{height - margin + 5}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{height - margin + 18}" '
                     f'text-anchor="middle">1e{d}</text>')
    for d in range(math.ceil(ly0), math.floor(ly1) + 1):
        y = py(10.0 ** d)
        parts.append(f'<line x1="{margin - 5}" y1="{y:.1f}" x2="{margin}" '
                     f'y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{margin - 8}" y="{y + 4:.1f}" '
                     f'text-anchor="end">1e{d}</text>')
    parts.append(f'<text x="{width / 2:.0f}" y="{height - 12}" '
                 f'text-anchor="middle">{x_field}</text>')
    parts.append(f'<text x="16" y="{height / 2:.0f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {height / 2:.0f})">time (s)</text>')

    # slope-1 reference through the first point of the first series
    t0 = series[columns[0]][0]
    ref = t0 * xs / xs[0]
    pts = " ".join(f"{px(x):.1f},{py(t):.1f}" for x, t in zip(xs, ref)
                   if 10 ** ly0 <= t <= 10 ** ly1)
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#888" '
                 'stroke-dasharray="5,4"/>')
    parts.append(f'<text x="{width - margin - 4}" y="{py(ref[-1]) - 6:.1f}" '
                 'text-anchor="end" fill="#888">slope 1</text>')

    for i, (col, t) in enumerate(series.items()):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        pts = " ".join(f"{px(x):.1f},{py(v):.1f}" for x, v in zip(xs, t))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     'stroke-width="1.5"/>')
        for x, v in zip(xs, t):
            parts.append(f'<circle cx="{px(x):.1f}" cy="{py(v):.1f}" r="3" '
                         f'fill="{color}"/>')
        parts.append(f'<text x="{width - margin + 2}" '
                     f'y="{py(t[-1]) + 4:.1f}" fill="{color}">{col}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "experiment": str, "eps": float, "sweep": str, "seed": int,
    "out_dir": str, "dense_oracle": bool, "format": str, "repeats": int,
    "parallel": bool,
}


def parse_config_file(path):
    """Parse a plain key=value config file; errors carry line numbers."""
    values = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: line {lineno}: expected key=value, "
                             f"got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_KEYS:
            raise ValueError(f"{path}: line {lineno}: unknown key {key!r}")
        kind = _CONFIG_KEYS[key]
        try:
            if kind is bool:
                if value.lower() not in ("true", "false", "0", "1"):
                    raise ValueError
                values[key] = value.lower() in ("true", "1")
            else:
                values[key] = kind(value)
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: bad value {value!r} "
                             f"for {key}") from None
    return values


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with the config-error code.

    argparse's default exit code for bad arguments is 2, which this CLI
    reserves for accuracy-contract violations.
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(_EXIT_CONFIG)


def _parse_sweep(text):
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ValueError(f"bad sweep {text!r}: expected comma-separated "
                         "integers") from None


def build_parser():
    parser = _Parser(prog="perturbfds-bench",
                     description="Benchmark the perturbed-geometry fast "
                                 "direct solver.")
    sub = parser.add_subparsers(dest="command", required=True)

    names = ", ".join(EXPERIMENTS)
    run_p = sub.add_parser("run", help="run experiment sweeps, write CSV")
    run_p.add_argument("--experiment", default="all",
                       help=f"one of: {names}; or 'all' (default) for the "
                            "five paper families")
    run_p.add_argument("--eps", type=float, default=1e-10,
                       help="solver tolerance (default 1e-10)")
    run_p.add_argument("--sweep", type=str, default=None,
                       help="comma-separated sweep values overriding the "
                            "default (N for most families, refinement "
                            "levels for star-refine)")
    run_p.add_argument("--seed", type=int, default=0,
                       help="RNG seed for the manufactured charges")
    run_p.add_argument("--out-dir", default="bench-out",
                       help="output directory (default bench-out)")
    run_p.add_argument("--dense-oracle", action="store_true",
                       help="also compute the SVD-rank column k_opt where "
                            "the dense cap permits")
    run_p.add_argument("--format", choices=("csv", "svg"), default="csv",
                       help="csv (default) or svg, which adds a log-log "
                            "plot per experiment")
    run_p.add_argument("--repeats", type=int, default=3,
                       help="timed repeats per phase after warmup "
                            "(default 3)")
    run_p.add_argument("--parallel", action="store_true",
                       help="run sweep points concurrently (timings are "
                            "then not isolated)")
    run_p.add_argument("--config", default=None,
                       help="key=value config file; command-line flags "
                            "override it")

    table_p = sub.add_parser("table", help="print a stored CSV as a table")
    table_p.add_argument("--experiment", required=True)
    table_p.add_argument("--out-dir", default="bench-out")

    plot_p = sub.add_parser("plot", help="render a stored CSV as SVG")
    plot_p.add_argument("--experiment", required=True)
    plot_p.add_argument("--out-dir", default="bench-out")
    return parser


def _resolve_experiments(name):
    if name == "all":
        return [n for n in EXPERIMENTS if n != "identity"]
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}; choose from "
                         f"{', '.join(EXPERIMENTS)} or 'all'")
    return [name]


def _cmd_run(args):
    if args.config:
        try:
            config = parse_config_file(args.config)
        except (OSError, ValueError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return _EXIT_CONFIG
        # config supplies values only where the command line used defaults
        parser = build_parser()
        defaults = parser.parse_args(["run"])
        for key, value in config.items():
            if getattr(args, key) == getattr(defaults, key):
                setattr(args, key, value)
    try:
        names = _resolve_experiments(args.experiment)
        sweep = _parse_sweep(args.sweep) if isinstance(args.sweep, str) else None
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return _EXIT_CONFIG

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    violations = []
    for name in names:
        print(f"running {name} (eps={args.eps:g}, seed={args.seed})")
        rows = run_experiment(name, eps=args.eps, sweep=sweep,
                              seed=args.seed, repeats=args.repeats,
                              dense_oracle=args.dense_oracle,
                              parallel=args.parallel, log=print)
        path = write_rows(out_dir / f"{name}.csv", rows)
        print(f"  wrote {path}")
        if len(rows) >= 4:
            slopes = fit_scaling(rows, EXPERIMENTS[name].x_field)
            spath = write_summary(out_dir / f"{name}_summary.csv", slopes,
                                  EXPERIMENTS[name].x_field)
            print(f"  wrote {spath} "
                  + " ".join(f"{c}={s:.2f}" for c, s in slopes.items()))
        if args.format == "svg":
            svg = render_svg(rows, EXPERIMENTS[name].x_field)
            (out_dir / f"{name}.svg").write_text(svg)
            print(f"  wrote {out_dir / f'{name}.svg'}")
        for row in rows:
            if row.E > E_THRESHOLD:
                violations.append((name, row.N_o, row.E))
    if violations:
        for name, N_o, E in violations:
            print(f"accuracy violation: {name} N_o={N_o}: "
                  f"E={E:.3e} > {E_THRESHOLD:g}", file=sys.stderr)
        return _EXIT_ACCURACY
    return _EXIT_OK


def _cmd_table(args):
    path = Path(args.out_dir) / f"{args.experiment}.csv"
    try:
        rows = read_rows(path)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return _EXIT_CONFIG
    print(render_table(rows))
    summary = Path(args.out_dir) / f"{args.experiment}_summary.csv"
    if summary.exists():
        print()
        print(summary.read_text().strip())
    return _EXIT_OK


def _cmd_plot(args):
    path = Path(args.out_dir) / f"{args.experiment}.csv"
    try:
        rows = read_rows(path)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return _EXIT_CONFIG
    x_field = (EXPERIMENTS[args.experiment].x_field
               if args.experiment in EXPERIMENTS else "N_o")
    out = Path(args.out_dir) / f"{args.experiment}.svg"
    out.write_text(render_svg(rows, x_field))
    print(f"wrote {out}")
    return _EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    command = {"run": _cmd_run, "table": _cmd_table, "plot": _cmd_plot}
    return command[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
