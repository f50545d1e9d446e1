"""Experiment runner and command-line interface.

Configs are flat ``key = value`` text files; every seed is explicit and a
rerun of the same config byte-reproduces its CSV outputs. Subcommands:
phantom, sinogram, rates, solve, compare.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from . import ctmodel, rates, solvers
from .linops import power_method, scale
from .mrsketch import make_family
from .proxlib import quadratic_conjugate_fn, ridge_fn, tv_nonneg_fn


class ConfigError(ValueError):
    """Bad or inconsistent run configuration (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """A numerical failure that invalidates the run (CLI exit code 3)."""


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 d / ||x - ref||^2), capped at 300 dB."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    x = np.asarray(x, dtype=float).ravel()
    ref = np.asarray(ref, dtype=float).ravel()
    if x.size != ref.size:
        raise ValueError(f"shape mismatch: {x.size} vs {ref.size}")
    err = float(np.dot(x - ref, x - ref))
    if err == 0.0:
        return 300.0
    return min(300.0, 10.0 * np.log10(peak * peak * x.size / err))


@dataclass(frozen=True)
class RunConfig:
    """Flat experiment description; round-trips through key = value text."""

    side: int = 64
    n_angles: int = 100
    phantom: str = "shepp-logan"
    noise_model: str = "none"  # none | gaussian | poisson
    photons: float = 1e5
    noise_seed: int = 0
    levels: int = 4
    probs: str = "uniform"  # "uniform" or comma-separated floats
    sketch_mode: str = "coarse"  # exact | coarse
    regularizer: str = "ridge"  # ridge | tv
    mu_g: float = 1.0
    mu: float = 0.0  # solver strong-convexity parameter; 0 means mu_g (ridge) or 1 (tv)
    algorithm: str = "sketch"
    sigma: str = "optimal"  # float literal | optimal | baseline
    rho: float = 0.5
    theta_extrap: float = 1.0
    iters: int = 1000
    record_every: int = 10
    seed: int = 0
    normalize: str = "on"  # on | off: rescale K, b by 1/||K|| (same minimizer)
    reference: str = "pdhg"  # pdhg | none
    reference_iters: int = 5000
    image_budgets: str = "100,500"
    timing: str = "off"
    outdir: str = "out"

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        known = {f.name: f.type for f in fields(cls)}
        raw: dict = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (tok.strip() for tok in stripped.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            raw[key] = value
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            value = raw[f.name]
            try:
                if f.type == "int":
                    kwargs[f.name] = int(value)
                elif f.type == "float":
                    kwargs[f.name] = float(value)
                else:
                    kwargs[f.name] = value
            except ValueError as exc:
                raise ConfigError(f"bad value for {f.name!r}: {value!r}") from exc
        return cls(**kwargs)

    def prob_vector(self) -> np.ndarray:
        if self.probs == "uniform":
            return np.full(self.levels, 1.0 / self.levels)
        try:
            vec = np.array([float(tok) for tok in self.probs.split(",")])
        except ValueError as exc:
            raise ConfigError(f"bad probs {self.probs!r}") from exc
        if vec.size != self.levels:
            raise ConfigError(f"{vec.size} probs for {self.levels} levels")
        return vec

    def budgets(self) -> list[float]:
        text = self.image_budgets.strip()
        if not text:
            return []
        try:
            return [float(tok) for tok in text.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad image_budgets {self.image_budgets!r}") from exc

    def solver_mu(self) -> float:
        if self.mu > 0:
            return self.mu
        return self.mu_g if self.regularizer == "ridge" else 1.0


@dataclass
class ExperimentBundle:
    """In-memory results of one experiment, mirrored to the output directory."""

    config: RunConfig
    report: solvers.SolveReport
    reference: Optional[np.ndarray]
    constants: rates.RateConstants
    plan: Optional[rates.StepPlan]
    sigma: float
    k_norm_raw: float
    outdir: str


def _build_problem(cfg: RunConfig):
    """Assemble (problem, solver mu, raw operator norm, geometry, phantom)."""
    if cfg.regularizer not in ("ridge", "tv"):
        raise ConfigError(f"unknown regularizer {cfg.regularizer!r}")
    if cfg.algorithm not in solvers.ALGORITHMS:
        raise ConfigError(f"unknown algorithm {cfg.algorithm!r}")
    if cfg.sketch_mode not in ("exact", "coarse"):
        raise ConfigError(f"unknown sketch_mode {cfg.sketch_mode!r}")
    geom = ctmodel.Geometry(side=cfg.side, n_angles=cfg.n_angles)
    phantom = ctmodel.make_phantom(cfg.phantom, cfg.side)
    K = ctmodel.projector_op(geom)
    sino = ctmodel.project(geom, phantom.flat)
    if cfg.noise_model == "none":
        b = sino.ravel()
    elif cfg.noise_model in ("gaussian", "poisson"):
        b = ctmodel.add_noise(sino, cfg.noise_model, cfg.photons, cfg.noise_seed).ravel()
    else:
        raise ConfigError(f"unknown noise_model {cfg.noise_model!r}")

    k_norm_raw = power_method(K, tol=1e-8, max_iter=2000, seed=0).norm
    if k_norm_raw == 0.0:
        raise NumericalError("forward operator has zero norm")
    coarse = lambda f: ctmodel.coarse_projector(geom, f)
    mu_weight = cfg.mu_g
    if cfg.normalize == "on":
        # dividing the objective by ||K||^2 keeps the minimizer and turns the
        # data operator into a unit-norm map
        K = scale(K, 1.0 / k_norm_raw)
        b = b / k_norm_raw
        mu_weight = cfg.mu_g / k_norm_raw**2
        raw_coarse = coarse
        coarse = lambda f: scale(raw_coarse(f), 1.0 / k_norm_raw)
    elif cfg.normalize != "off":
        raise ConfigError(f"normalize must be on or off, got {cfg.normalize!r}")

    if cfg.regularizer == "ridge":
        g = ridge_fn(mu_weight)
        mu_solver = cfg.mu if cfg.mu > 0 else mu_weight
    else:
        g = tv_nonneg_fn(mu_weight)
        mu_solver = cfg.mu if cfg.mu > 0 else 1.0
    family = make_family(cfg.levels, cfg.side, cfg.prob_vector(), mode=cfg.sketch_mode)
    prob = solvers.make_problem(
        K, b, family, g, quadratic_conjugate_fn(b),
        coarse_projector=coarse if cfg.sketch_mode == "coarse" else None,
    )
    return prob, mu_solver, k_norm_raw, geom, phantom


def _resolve_sigma(cfg: RunConfig, constants: rates.RateConstants):
    plan = None
    if cfg.sigma == "optimal":
        plan = rates.optimal_step(constants, rho=cfg.rho)
        sigma = plan.sigma_star
    elif cfg.sigma == "baseline":
        sigma = rates.sigma_baseline(constants.L, constants.Lbar)
    else:
        try:
            sigma = float(cfg.sigma)
        except ValueError as exc:
            raise ConfigError(f"bad sigma {cfg.sigma!r}") from exc
    return sigma, plan


def run_experiment(cfg: RunConfig) -> ExperimentBundle:
    """Run one configured experiment and write its artifact bundle.

    Writes a config echo, a constants report, the metrics CSV, the final
    and budgeted intermediate images and the reference image. All CSV
    output is byte-reproducible for a fixed config (timing defaults to
    zeros in the CSV; enable the timing flag for wall-clock values).
    """
    prob, mu_solver, k_norm_raw, geom, phantom = _build_problem(cfg)
    constants = rates.estimate_constants(
        prob.family, prob.K, mu_g=mu_solver, mu_fstar=1.0, tol=1e-8, max_iter=2000
    )
    sigma, plan = _resolve_sigma(cfg, constants)

    reference = None
    if cfg.reference == "pdhg":
        reference = solvers.pdhg_solve(
            prob, mu=mu_solver, iters=cfg.reference_iters, k_norm=constants.K_norm
        )
    elif cfg.reference != "none":
        raise ConfigError(f"unknown reference {cfg.reference!r}")

    report = solvers.run(
        prob,
        cfg.algorithm,
        sigma,
        mu_solver,
        cfg.iters,
        record_every=cfg.record_every,
        seed=cfg.seed,
        x_ref=reference,
        theta_extrap=cfg.theta_extrap,
        snapshot_costs=cfg.budgets(),
    )
    if not np.all(np.isfinite(report.x)):
        raise NumericalError("solver produced non-finite iterates")

    os.makedirs(cfg.outdir, exist_ok=True)
    with open(os.path.join(cfg.outdir, "config.txt"), "w") as f:
        f.write(cfg.to_text())
    report.write_csv(
        os.path.join(cfg.outdir, "metrics.csv"), include_timing=cfg.timing == "on"
    )
    side = cfg.side
    geom_header = {"side": side, "n_angles": cfg.n_angles, "n_detectors": geom.n_detectors}
    ctmodel.write_graymap(
        os.path.join(cfg.outdir, "final.pgm"), report.x.reshape(side, side), geom_header
    )
    for budget, img in report.snapshots.items():
        ctmodel.write_graymap(
            os.path.join(cfg.outdir, f"snapshot_cost{budget:g}.pgm"),
            img.reshape(side, side),
            geom_header,
        )
    if reference is not None:
        ctmodel.write_graymap(
            os.path.join(cfg.outdir, "reference.pgm"), reference.reshape(side, side), geom_header
        )
    with open(os.path.join(cfg.outdir, "constants.txt"), "w") as f:
        f.write(_constants_report(cfg, constants, plan, sigma, k_norm_raw))
    return ExperimentBundle(
        config=cfg, report=report, reference=reference, constants=constants,
        plan=plan, sigma=sigma, k_norm_raw=k_norm_raw, outdir=cfg.outdir,
    )


def _constants_report(cfg, constants, plan, sigma, k_norm_raw) -> str:
    lines = [
        f"K_norm_raw = {k_norm_raw:.12g}",
        f"L = {constants.L:.12g}",
        f"Lbar = {constants.Lbar:.12g}",
        f"Lbar_p = {constants.Lbar_p:.12g}",
        f"min_p = {constants.min_p:.12g}",
        f"mu_g = {constants.mu_g:.12g}",
        f"mu_fstar = {constants.mu_fstar:.12g}",
        f"sigma = {sigma:.12g}",
        f"sigma_baseline = {rates.sigma_baseline(constants.L, constants.Lbar):.12g}",
    ]
    if plan is not None:
        lines += [
            f"c = {plan.c:.12g}",
            f"rho = {plan.rho:.12g}",
            f"eta_star = {plan.eta_star:.12g}",
            f"sigma_star = {plan.sigma_star:.12g}",
            f"theta_star = {plan.theta_star:.12g}",
        ]
    return "".join(line + "\n" for line in lines)


def _read_metrics(path: str):
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != solvers.SolveReport.CSV_HEADER:
            raise ConfigError(f"unexpected metrics header in {path}: {header!r}")
        for line in f:
            k, cost, level, rel, snr, secs = line.strip().split(",")
            rows.append((int(k), float(cost), int(level), float(rel), float(snr), float(secs)))
    return rows


def _fit_slope(costs, rels):
    """Least-squares slope of log10(rel_dist) per unit cost."""
    mask = np.isfinite(rels) & (rels > 0) & (costs > 0)
    if mask.sum() < 2:
        return float("nan")
    c = costs[mask]
    r = np.log10(rels[mask])
    c0 = c - c.mean()
    denom = float(np.dot(c0, c0))
    if denom == 0:
        return float("nan")
    return float(np.dot(c0, r - r.mean()) / denom)


def compare_runs(bundle_dirs, out_summary=None, out_aligned=None, align_points: int = 50):
    """Summarize metric CSVs from several bundles sharing one geometry.

    Returns summary rows (one per bundle: algorithm, levels, sigma, final
    cost/rel_dist/psnr, slope of log10 rel_dist per unit cost) and an
    aligned-by-cost table interpolated on the common cost range.
    """
    configs, metrics = [], []
    for d in bundle_dirs:
        with open(os.path.join(d, "config.txt")) as f:
            configs.append(RunConfig.from_text(f.read()))
        metrics.append(_read_metrics(os.path.join(d, "metrics.csv")))
    base = configs[0]
    for cfg in configs[1:]:
        same = (
            cfg.side == base.side
            and cfg.n_angles == base.n_angles
            and cfg.phantom == base.phantom
            and cfg.reference == base.reference
        )
        if not same:
            raise ConfigError("bundles do not share geometry/reference; cannot compare")

    summary = []
    for d, cfg, rows in zip(bundle_dirs, configs, metrics):
        costs = np.array([r[1] for r in rows])
        rels = np.array([r[3] for r in rows])
        final = rows[-1]
        summary.append(
            {
                "bundle": d,
                "algorithm": cfg.algorithm,
                "levels": cfg.levels,
                "sigma": cfg.sigma,
                "final_cost": final[1],
                "final_rel_dist": final[3],
                "final_psnr": final[4],
                "slope": _fit_slope(costs, rels),
            }
        )

    lo = max(min(row[1] for row in m if row[1] > 0) for m in metrics)
    hi = min(max(row[1] for row in m) for m in metrics)
    aligned_lines = None
    if hi > lo:
        grid = np.linspace(lo, hi, align_points)
        cols = ["cost"]
        table = [grid]
        for d, rows in zip(bundle_dirs, metrics):
            costs = np.array([r[1] for r in rows])
            rels = np.array([r[3] for r in rows])
            snrs = np.array([r[4] for r in rows])
            table.append(np.interp(grid, costs, rels))
            table.append(np.interp(grid, costs, snrs))
            name = os.path.basename(os.path.normpath(d))
            cols += [f"rel_dist:{name}", f"psnr:{name}"]
        aligned_lines = [",".join(cols)]
        for vals in zip(*table):
            aligned_lines.append(",".join(f"{v:.12g}" for v in vals))

    if out_summary:
        keys = ["bundle", "algorithm", "levels", "sigma", "final_cost",
                "final_rel_dist", "final_psnr", "slope"]
        with open(out_summary, "w") as f:
            f.write(",".join(keys) + "\n")
            for row in summary:
                f.write(
                    ",".join(
                        f"{row[k]:.12g}" if isinstance(row[k], float) else str(row[k])
                        for k in keys
                    )
                    + "\n"
                )
    if out_aligned and aligned_lines:
        with open(out_aligned, "w") as f:
            f.write("\n".join(aligned_lines) + "\n")
    return summary


def _load_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            return RunConfig.from_text(f.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _cmd_phantom(args) -> int:
    ph = ctmodel.make_phantom(args.kind, args.side)
    ctmodel.write_graymap(args.out, ph.values, {"kind": args.kind, "side": args.side})
    print(f"wrote {args.out} ({args.kind}, side {args.side})")
    return 0


def _cmd_sinogram(args) -> int:
    cfg = _load_config(args.config)
    geom = ctmodel.Geometry(side=cfg.side, n_angles=cfg.n_angles)
    ph = ctmodel.make_phantom(cfg.phantom, cfg.side)
    sino = ctmodel.project(geom, ph.flat)
    if cfg.noise_model != "none":
        sino = ctmodel.add_noise(sino, cfg.noise_model, cfg.photons, cfg.noise_seed)
    header = {
        "side": cfg.side, "n_angles": cfg.n_angles, "n_detectors": geom.n_detectors,
        "noise_model": cfg.noise_model, "photons": cfg.photons, "noise_seed": cfg.noise_seed,
    }
    ctmodel.write_graymap(args.out, sino, header)
    print(f"wrote {args.out} ({geom.n_angles} x {geom.n_detectors})")
    return 0


def _cmd_rates(args) -> int:
    cfg = _load_config(args.config)
    prob, mu_solver, _, _, _ = _build_problem(cfg)
    constants = rates.estimate_constants(
        prob.family, prob.K, mu_g=mu_solver, mu_fstar=1.0, tol=1e-8, max_iter=2000
    )
    if not constants.converged:
        raise NumericalError("power method failed to converge while estimating constants")
    plans = rates.step_plan_grid(constants, num_c=args.grid_c, num_rho=args.grid_rho)
    out = sys.stdout if args.out is None else open(args.out, "w")
    try:
        out.write("c,rho,eta_star,sigma_star,theta_star\n")
        for plan in plans:
            out.write(
                f"{plan.c:.12g},{plan.rho:.12g},{plan.eta_star:.12g},"
                f"{plan.sigma_star:.12g},{plan.theta_star:.12g}\n"
            )
    finally:
        if out is not sys.stdout:
            out.close()
    best = min(plans, key=lambda p: p.theta_star)
    print(
        f"L={constants.L:.6g} Lbar={constants.Lbar:.6g} Lbar_p={constants.Lbar_p:.6g} "
        f"best: c={best.c:.6g} rho={best.rho:.6g} sigma*={best.sigma_star:.6g} "
        f"theta*={best.theta_star:.6g}",
        file=sys.stderr,
    )
    return 0


def _cmd_solve(args) -> int:
    cfg = _load_config(args.config)
    if args.outdir:
        cfg = replace(cfg, outdir=args.outdir)
    bundle = run_experiment(cfg)
    final = bundle.report.rows[-1]
    print(
        f"{cfg.algorithm} r={cfg.levels} sigma={bundle.sigma:.6g}: "
        f"k={final[0]} cost={final[1]:.6g} rel_dist={final[3]:.6g} psnr={final[4]:.6g}"
    )
    return 0


def _cmd_compare(args) -> int:
    summary = compare_runs(args.bundles, out_summary=args.out, out_aligned=args.aligned)
    for row in summary:
        print(
            f"{row['bundle']}: {row['algorithm']} r={row['levels']} "
            f"final rel_dist={row['final_rel_dist']:.6g} slope={row['slope']:.6g}"
        )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mrtomo",
        description="Multiresolution-sketch stochastic primal-dual CT solvers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a phantom image as a 16-bit graymap")
    p.add_argument("--kind", default="shepp-logan")
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_phantom)

    p = sub.add_parser("sinogram", help="project the configured phantom and add noise")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sinogram)

    p = sub.add_parser("rates", help="emit the (c, rho) step-size grid as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--grid-c", type=int, default=100)
    p.add_argument("--grid-rho", type=int, default=100)
    p.set_defaults(fn=_cmd_rates)

    p = sub.add_parser("solve", help="run one configured experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--outdir", default=None)
    p.set_defaults(fn=_cmd_solve)

    p = sub.add_parser("compare", help="summarize several run bundles")
    p.add_argument("bundles", nargs="+")
    p.add_argument("--out", default=None)
    p.add_argument("--aligned", default=None)
    p.set_defaults(fn=_cmd_compare)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
