"""Command-line experiment harness.

Subcommands
-----------
generate-data
    Draw a fixed-seed truth field, synthesize noisy observations on the
    fine grid, and write the truth coefficients, the dataset and a truth
    field rendering.
run
    Run the adaptive sampler against a dataset; write the round trace, the
    final ensemble, the posterior-mean field (CSV and image) and weighted
    marginal densities for two low-frequency and one high-frequency
    coefficient.
consistency-sweep
    Repeat the full pipeline for a growing list of observation counts
    against one common truth; write the error and ball-probability table.
validate
    Run the analytic-target diagnostic suites (Monte Carlo rate table and
    sampling-operator error) and write their tables.
render
    Render a coefficient CSV to a pixmap.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.

Every CSV starts with a provenance comment carrying the configuration hash
and the effective master seed.  All computation is deterministic given the
configuration and seed; ``--threads`` is validated and reserved (the
vectorized core does not depend on it).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import validation
from .config import ConfigError, RunConfig
from .field import evaluate_field_grid, grid_axis, sample_prior
from .model import generate_data, make_misfit_fn, read_dataset, write_dataset
from .pde import SolverError
from .render import render_field
from .smc import StagnationError, derived_rng, run as run_smc, weighted_mean
from .validation import BallSpec, ball_probability, rmse_to_truth, weighted_kde

# Stream purposes for seed derivation (the sampler itself uses 0..2).
STREAM_TRUTH, STREAM_NOISE, STREAM_SWEEP = 3, 4, 5

RENDER_RESOLUTION = 500
FIELD_CSV_RESOLUTION = 100
DEFAULT_SWEEP_COUNTS = (4, 16, 36, 64, 100)
DEFAULT_BALL_RADIUS_SCALE = 0.61
MARGINAL_GRID = np.linspace(-1.1, 1.1, 512)


def _provenance(config: RunConfig) -> str:
    return f"config_hash={config.config_hash()} seed={config.seed}"


def _write_csv(path, provenance: str, header: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {provenance}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


def _write_coefficients(path, provenance: str, coeffs: np.ndarray) -> None:
    header = ",".join(f"c{i}" for i in range(len(coeffs)))
    _write_csv(path, provenance, header, [",".join(repr(float(v)) for v in coeffs)])


def _read_coefficients(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("c0"):
                continue
            rows.append([float(v) for v in line.split(",")])
    if len(rows) != 1:
        raise ConfigError(f"{path}: expected exactly one coefficient row")
    return np.asarray(rows[0])


def _truth(config: RunConfig) -> np.ndarray:
    return sample_prior(config.field, derived_rng(config.seed, STREAM_TRUTH))


def _render_axes(config: RunConfig, resolution: int):
    """Axes for field rendering; 3-d fields are sliced on the mid plane."""
    ax = grid_axis(resolution)
    if config.field.dim == 2:
        return [ax, ax]
    return [ax, ax, np.array([0.0])]


def _render_coeffs(config: RunConfig, coeffs: np.ndarray, path, resolution: int) -> None:
    values = evaluate_field_grid(config.field, coeffs, _render_axes(config, resolution))
    if config.field.dim == 3:
        values = values[:, :, 0]
    render_field(values, path, comments=[_provenance(config)])


def cmd_generate_data(config: RunConfig, out_dir: Path) -> None:
    truth = _truth(config)
    fine = config.fine_grid()
    data = generate_data(
        truth,
        config.field,
        fine,
        config.resolved_source(),
        config.obs_s,
        config.sigma2,
        derived_rng(config.seed, STREAM_NOISE),
    )
    prov = _provenance(config)
    _write_coefficients(out_dir / "truth_coefficients.csv", prov, truth)
    write_dataset(out_dir / "dataset.csv", data, provenance=prov)
    _render_coeffs(config, truth, out_dir / "truth_field.ppm", RENDER_RESOLUTION)
    print(f"wrote {data.n_obs} observations to {out_dir / 'dataset.csv'}")


def _marginal_indices(n_params: int):
    """Two lowest-shell coefficients and the last (highest-shell) one."""
    if n_params < 3:
        return list(range(n_params))
    return [0, 1, n_params - 1]


def cmd_run(config: RunConfig, out_dir: Path, dataset_path=None) -> None:
    path = Path(dataset_path) if dataset_path else out_dir / "dataset.csv"
    if not path.exists():
        raise ConfigError(f"dataset not found: {path}")
    data = read_dataset(path)
    if data.n_obs and data.dim != config.field.dim:
        raise ConfigError(
            f"dataset dimension {data.dim} does not match configuration "
            f"dimension {config.field.dim}"
        )
    grid = config.grid()
    misfit_fn = make_misfit_fn(config.field, grid, config.resolved_source(), data)
    prov = _provenance(config)
    try:
        ensemble, trace = run_smc(
            misfit_fn, config.field.n_params, config.smc, config.seed
        )
    except StagnationError as exc:
        rows = list(exc.trace.csv_rows())
        _write_csv(out_dir / "trace.csv", prov, rows[0], rows[1:])
        raise

    rows = list(trace.csv_rows())
    _write_csv(out_dir / "trace.csv", prov, rows[0], rows[1:])

    weights = ensemble.normalized_weights()
    header = "weight," + ",".join(f"c{i}" for i in range(ensemble.n_params))
    _write_csv(
        out_dir / "ensemble.csv",
        prov,
        header,
        (
            repr(float(w)) + "," + ",".join(repr(float(v)) for v in p)
            for w, p in zip(weights, ensemble.particles)
        ),
    )

    mean = weighted_mean(ensemble)
    _write_coefficients(out_dir / "posterior_mean_coefficients.csv", prov, mean)

    axes = _render_axes(config, FIELD_CSV_RESOLUTION)
    values = evaluate_field_grid(config.field, mean, axes)
    if config.field.dim == 3:
        values = values[:, :, 0]
    _write_csv(
        out_dir / "posterior_mean_field.csv",
        prov,
        "i,j,value",
        (
            f"{i},{j},{float(values[i, j])!r}"
            for i in range(values.shape[0])
            for j in range(values.shape[1])
        ),
    )
    _render_coeffs(config, mean, out_dir / "posterior_mean_field.ppm", RENDER_RESOLUTION)

    for idx in _marginal_indices(ensemble.n_params):
        grid_x, density = weighted_kde(
            ensemble.particles[:, idx], weights, MARGINAL_GRID
        )
        _write_csv(
            out_dir / f"marginal_coeff_{idx:04d}.csv",
            prov,
            "x,density",
            (f"{float(x)!r},{float(d)!r}" for x, d in zip(grid_x, density)),
        )

    truth_path = out_dir / "truth_coefficients.csv"
    if truth_path.exists() and ensemble.n_params > 0:
        truth = _read_coefficients(truth_path)
        if len(truth) == ensemble.n_params:
            radii = np.linspace(0.05, 1.2, 47) * ensemble.n_params
            curve = [
                ball_probability(ensemble, BallSpec(truth, float(r), "l1"))
                for r in radii
            ]
            _write_csv(
                out_dir / "ball_curve.csv",
                prov + " norm=l1",
                "radius,probability",
                (f"{float(r)!r},{float(p)!r}" for r, p in zip(radii, curve)),
            )
    final = trace.rounds[-1]
    print(
        f"finished in {len(trace.rounds)} rounds "
        f"(final ESS {final.ess:.1f}, acceptance {final.acc_rate:.3f})"
    )


def cmd_consistency_sweep(
    config: RunConfig,
    out_dir: Path,
    counts,
    runs_per_count: int,
    ball_radius_scale: float,
    ball_norm: str,
) -> None:
    dim = config.field.dim
    for count in counts:
        s = round(count ** (1.0 / dim))
        if s**dim != count:
            raise ConfigError(
                f"observation count {count} is not a perfect power for dim {dim}"
            )
    truth = _truth(config)
    n_params = config.field.n_params
    ball = lambda ens: ball_probability(
        ens, BallSpec(truth, ball_radius_scale * n_params, ball_norm)
    )
    grid = config.grid()
    fine = config.fine_grid()
    source = config.resolved_source()
    rows = []
    for count in counts:
        s = round(count ** (1.0 / dim))
        rmses, balls = [], []
        # Each replicate draws its own noise and sampler seeds, so the
        # reported values estimate the expectation over data realizations,
        # which is the quantity that contracts as observations accumulate.
        for rep in range(runs_per_count):
            data = generate_data(
                truth,
                config.field,
                fine,
                source,
                s,
                config.sigma2,
                derived_rng(config.seed, STREAM_NOISE, count, rep),
            )
            misfit_fn = make_misfit_fn(config.field, grid, source, data)
            run_seed = int(
                np.random.SeedSequence(
                    config.seed, spawn_key=(STREAM_SWEEP, count, rep)
                ).generate_state(1)[0]
            )
            ensemble, _ = run_smc(misfit_fn, n_params, config.smc, run_seed)
            rmses.append(rmse_to_truth(ensemble, truth))
            balls.append(ball(ensemble))
        rows.append(
            f"{count},{s},{float(np.mean(rmses))!r},{float(np.mean(balls))!r},{runs_per_count}"
        )
        print(
            f"count {count:4d}: rmse {np.mean(rmses):.4f} "
            f"ball probability {np.mean(balls):.4f}"
        )
    _write_csv(
        out_dir / "consistency.csv",
        _provenance(config)
        + f" ball_radius_scale={ball_radius_scale} ball_norm={ball_norm}",
        "count,s,rmse,ball_probability,runs",
        rows,
    )


def cmd_validate(out_dir: Path, seed: int, replicates: int) -> None:
    rng = np.random.default_rng(seed)
    rows = []
    for m in (10, 100, 1000):
        err = validation.sampling_operator_error(
            np.array([-1.0, 1.0]), np.array([0.5, 0.5]), lambda v: v, m, 10_000, rng
        )
        rows.append(f"{m},{err!r},{1.0 / m!r}")
        print(f"sampling operator M={m}: mse {err:.3e} (target 1/M = {1/m:.3e})")
    _write_csv(
        out_dir / "sampling_operator.csv",
        f"seed={seed}",
        "m,mean_squared_error,bound",
        rows,
    )

    dims = (10, 90, 360)
    counts = (100, 400, 1600)
    table = validation.rate_study(dims, counts, replicates, seed)
    _write_csv(
        out_dir / "rate_table.csv",
        f"seed={seed} replicates={replicates}",
        "dim,n_particles,replicate,error",
        (
            f"{r['dim']},{r['n_particles']},{rep},{float(err)!r}"
            for r in table
            for rep, err in enumerate(r["errors"])
        ),
    )
    _write_csv(
        out_dir / "rate_summary.csv",
        f"seed={seed} replicates={replicates}",
        "dim,n_particles,rmse",
        (f"{r['dim']},{r['n_particles']},{r['rmse']!r}" for r in table),
    )
    rmse = {(r["dim"], r["n_particles"]): r["rmse"] for r in table}
    for d in dims:
        slope = np.polyfit(
            np.log(counts), np.log([rmse[(d, m)] for m in counts]), 1
        )[0]
        print(f"dim {d}: rmse slope vs particle count {slope:.3f}")
    for m in counts:
        vals = [rmse[(d, m)] for d in dims]
        print(f"M {m}: cross-dimension rmse ratio {max(vals) / min(vals):.3f}")


def cmd_render(config: RunConfig, coeffs_path, out_dir: Path, resolution: int) -> None:
    coeffs = _read_coefficients(coeffs_path)
    if len(coeffs) != config.field.n_params:
        raise ConfigError(
            f"coefficient file has {len(coeffs)} entries, configuration "
            f"needs {config.field.n_params}"
        )
    out = out_dir / (Path(coeffs_path).stem + ".ppm")
    _render_coeffs(config, coeffs, out, resolution)
    print(f"wrote {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="darcy-smc",
        description="Adaptive SMC for the Darcy-flow permeability inverse problem",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="path to the JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configured master seed")
        p.add_argument("--threads", type=int, default=1,
                       help="reserved; results never depend on it")
        p.add_argument("--out", help="output directory (default: from configuration)")

    common(sub.add_parser("generate-data", help="synthesize truth and observations"))

    p_run = sub.add_parser("run", help="run the sampler against a dataset")
    common(p_run)
    p_run.add_argument("--dataset", help="dataset CSV (default: <out>/dataset.csv)")

    p_sweep = sub.add_parser(
        "consistency-sweep", help="pipeline across growing observation counts"
    )
    common(p_sweep)
    p_sweep.add_argument(
        "--counts",
        default=",".join(str(c) for c in DEFAULT_SWEEP_COUNTS),
        help="comma-separated observation counts (perfect dim-th powers)",
    )
    p_sweep.add_argument("--runs-per-count", type=int, default=3)
    p_sweep.add_argument("--ball-radius-scale", type=float, default=DEFAULT_BALL_RADIUS_SCALE,
                         help="ball radius as a multiple of the parameter count")
    p_sweep.add_argument("--ball-norm", choices=("l1", "l2", "linf"), default="l1")

    p_val = sub.add_parser("validate", help="analytic-target diagnostic suites")
    common(p_val, needs_config=False)
    p_val.add_argument("--replicates", type=int, default=50)

    p_render = sub.add_parser("render", help="render a coefficient CSV to a pixmap")
    common(p_render)
    p_render.add_argument("--coeffs", required=True, help="coefficient CSV (single row)")
    p_render.add_argument("--resolution", type=int, default=RENDER_RESOLUTION)

    return parser


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        if args.command == "validate":
            out_dir = Path(args.out or "out")
            out_dir.mkdir(parents=True, exist_ok=True)
            cmd_validate(out_dir, args.seed if args.seed is not None else 0, args.replicates)
            return 0

        config = _load_config(args)
        out_dir = Path(args.out or config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        if args.command == "generate-data":
            cmd_generate_data(config, out_dir)
        elif args.command == "run":
            cmd_run(config, out_dir, dataset_path=args.dataset)
        elif args.command == "consistency-sweep":
            counts = [int(c) for c in args.counts.split(",") if c.strip()]
            cmd_consistency_sweep(
                config,
                out_dir,
                counts,
                args.runs_per_count,
                args.ball_radius_scale,
                args.ball_norm,
            )
        elif args.command == "render":
            cmd_render(config, args.coeffs, out_dir, args.resolution)
        return 0
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, StagnationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
