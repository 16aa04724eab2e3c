"""Command-line experiment runner.

Subcommands:
  run <config.toml>      train one method on one problem, write artifacts
  reproduce-table <2|4>  run all four benchmark rows and compare to targets
  oracle <problem>       solve and evaluate the closed-form benchmark
  plot <run-dir>         re-render the SVG plots from a finished run's CSVs

The output root defaults to ./runs and can be overridden with the
MFOT_OUTPUT_ROOT environment variable. All CSV output uses fixed formatting
so identical configs and seeds reproduce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import platform
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, metrics, problems, rng, simulate
from .admm import AdmmConfig, AdmmState
from .dgm import DgmConfig, DgmTrainer, default_domain
from .direct import DirectConfig, DirectTrainer
from .errors import ConfigError
from .lq_oracle import analytic_cost, solve_lq
from .problems import COST_QUADRATIC, DRIFT_LQ, ProblemSpec
from .simulate import SimulationConfig

OUTPUT_ROOT_ENV = "MFOT_OUTPUT_ROOT"
METHODS = ("oracle", "direct", "dgm", "admm")
SNAPSHOT_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)
PLOT_PARTICLES = 2000
FMT = "%.12g"


def output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")


@dataclasses.dataclass(frozen=True)
class ResolvedRun:
    spec: ProblemSpec
    method: str
    seed: int
    method_config: object | None
    name: str
    eval_particles: int
    eval_steps: int

    def config_dict(self) -> dict:
        method_cfg = dataclasses.asdict(self.method_config) \
            if self.method_config is not None else {}
        method_cfg = {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in method_cfg.items()}
        return {"problem": self.spec.name, "method": self.method,
                "seed": self.seed, "local": self.spec.local,
                "eval_particles": self.eval_particles,
                "eval_steps": self.eval_steps,
                self.method: method_cfg}


_CONFIG_TYPES = {"direct": DirectConfig, "dgm": DgmConfig, "admm": AdmmConfig}


def _build_method_config(method: str, seed: int, overrides: dict):
    if method == "oracle":
        if overrides:
            raise ConfigError("the closed-form benchmark takes no "
                              "hyperparameters")
        return None
    cls = _CONFIG_TYPES[method]
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(overrides) - fields)
    if unknown:
        raise ConfigError(f"unknown {method} option(s): {', '.join(unknown)}")
    values = dict(overrides)
    values.setdefault("seed", seed)
    for f in dataclasses.fields(cls):
        if f.name in values and isinstance(getattr(cls(), f.name), tuple):
            values[f.name] = tuple(values[f.name])
    return cls(**values)


def resolve_config(cfg: dict) -> ResolvedRun:
    """Validate a parsed config and build the run plan.

    All combination checks happen here, before any compute.
    """
    unknown = sorted(set(cfg) - {"problem", "method", "seed", "local", "name",
                                 "eval_particles", "eval_steps", *METHODS})
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    if "problem" not in cfg or "method" not in cfg:
        raise ConfigError("config must set 'problem' and 'method'")
    method = cfg["method"]
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; "
                          f"choose one of {', '.join(METHODS)}")
    spec = problems.get_problem(cfg["problem"])
    if "local" in cfg and spec.cost_kind != COST_QUADRATIC:
        spec = dataclasses.replace(spec, local=bool(cfg["local"]))
    if method == "oracle" and spec.drift_kind != DRIFT_LQ:
        raise ConfigError("the closed-form benchmark applies to "
                          "linear-quadratic problems only")
    if method in ("dgm", "admm") and not spec.local:
        raise ConfigError(f"method {method!r} requires a local interaction "
                          "model; the kernel-smoothed congestion variant is "
                          "handled by the direct method")
    seed = int(cfg.get("seed", 0))
    method_config = _build_method_config(method, seed, cfg.get(method, {}))
    default_particles = 10_000 if spec.cost_kind == COST_QUADRATIC else 2000
    return ResolvedRun(
        spec=spec, method=method, seed=seed, method_config=method_config,
        name=cfg.get("name", f"{spec.name}-{method}-seed{seed}"),
        eval_particles=int(cfg.get("eval_particles", default_particles)),
        eval_steps=int(cfg.get("eval_steps", 100)))


def load_config(path: str) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _train(run: ResolvedRun):
    """Return (control, density_fn or None, trainer or None)."""
    if run.method == "oracle":
        sol = solve_lq(run.spec)
        return sol.control, None, None
    if run.method == "direct":
        trainer = DirectTrainer(run.spec, run.method_config)
    elif run.method == "dgm":
        trainer = DgmTrainer(run.spec, run.method_config)
    else:
        trainer = AdmmState(run.spec, run.method_config)
    if run.method == "admm":
        trainer.run()
    else:
        trainer.train()
    density_fn = (lambda x: trainer.density(run.spec.T, x)) \
        if run.method in ("dgm", "admm") else None
    return trainer.control, density_fn, trainer


def _kde_density_fn(ensemble: simulate.ParticleEnsemble):
    points = ensemble.states[-1]
    bw = simulate.silverman_bandwidth(points)
    return lambda x: simulate.kde(points, bw, np.atleast_2d(x))


def _write_report(run: ResolvedRun, control, density_fn, path: str
                  ) -> metrics.EvaluationReport:
    eval_cfg = SimulationConfig(run.eval_particles, run.eval_steps,
                                run.seed + 10_000)
    oracle = None
    reference = None
    terminal_density = run.spec.rhoT.density
    if run.spec.drift_kind == DRIFT_LQ:
        oracle = solve_lq(run.spec)
        reference = analytic_cost(oracle)
        mu_T, Sigma_T = oracle.mu_at(run.spec.T), oracle.Sigma_at(run.spec.T)
        terminal_density = problems.Gaussian(mu_T, Sigma_T).density
    if density_fn is None:
        ensemble = simulate.rollout(run.spec, control, eval_cfg,
                                    init_stream=rng.STREAM_EVAL)
        density_fn = _kde_density_fn(ensemble)
    gap_fn = lambda x: np.asarray(density_fn(x)) - np.asarray(
        terminal_density(x)) + np.asarray(run.spec.rhoT.density(x))
    report = metrics.evaluate(
        run.spec, control, eval_cfg, oracle=oracle, reference_cost=reference,
        density_fn=gap_fn, domain=default_domain(run.spec))
    metrics.export_reports_csv([(f"{run.spec.name}/{run.method}", report)],
                               path)
    return report


def _snapshot_indices(n_steps: int) -> list[int]:
    return [round(f * n_steps) for f in SNAPSHOT_FRACTIONS]


def _write_plot_data(run: ResolvedRun, control, out_dir: str) -> None:
    spec = run.spec
    cfg = SimulationConfig(PLOT_PARTICLES, 100, run.seed + 20_000)
    ensemble = simulate.rollout(spec, control, cfg,
                                init_stream=rng.STREAM_EVAL)
    with open(os.path.join(out_dir, "snapshots.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"x{j + 1}" for j in range(spec.d)])
        for idx in _snapshot_indices(cfg.n_steps):
            t = ensemble.times[idx]
            for row in ensemble.states[idx]:
                w.writerow([FMT % t] + [FMT % v for v in row])

    lo, hi = default_domain(spec)
    grid = np.linspace(lo[0], hi[0], 101)
    points = np.tile((lo + hi)[None, :] / 2.0, (len(grid), 1))
    points[:, 0] = grid
    oracle = solve_lq(spec) if spec.drift_kind == DRIFT_LQ else None
    header = ["x"]
    columns = [grid]
    for frac in SNAPSHOT_FRACTIONS:
        t = frac * spec.T
        header.append(FMT % t)
        columns.append(np.atleast_2d(control(t, points))[:, 0])
        if oracle is not None:
            header.append("ref " + (FMT % t))
            columns.append(oracle.control(t, points)[:, 0])
    with open(os.path.join(out_dir, "control_profile.csv"), "w",
              newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([FMT % v for v in row])


def _read_csv(path: str) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


def render_plots(run_dir: str) -> list[str]:
    """Draw the density, control, and loss figures from a run's CSV files."""
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "mfot"
    import matplotlib.pyplot as plt

    written = []
    snap_path = os.path.join(run_dir, "snapshots.csv")
    if os.path.exists(snap_path):
        header, data = _read_csv(snap_path)
        d = len(header) - 1
        times = sorted(set(data[:, 0]))
        if d == 1:
            fig, ax = plt.subplots(figsize=(7, 4))
            lo, hi = data[:, 1].min() - 1, data[:, 1].max() + 1
            grid = np.linspace(lo, hi, 200)[:, None]
            for t in times:
                pts = data[data[:, 0] == t, 1:]
                bw = simulate.silverman_bandwidth(pts)
                ax.plot(grid[:, 0], simulate.kde(pts, bw, grid),
                        label=f"t = {t:.2f}")
            ax.set_xlabel("x")
            ax.set_ylabel("density")
            ax.legend()
        else:
            fig, axes = plt.subplots(1, len(times), figsize=(3 * len(times), 3),
                                     sharex=True, sharey=True)
            pts_all = data[:, 1:3]
            lo = pts_all.min(axis=0) - 1
            hi = pts_all.max(axis=0) + 1
            g1 = np.linspace(lo[0], hi[0], 60)
            g2 = np.linspace(lo[1], hi[1], 60)
            mesh = np.stack(np.meshgrid(g1, g2), axis=-1).reshape(-1, 2)
            for ax, t in zip(np.atleast_1d(axes), times):
                pts = data[data[:, 0] == t, 1:3]
                bw = simulate.silverman_bandwidth(pts)
                z = simulate.kde(pts, bw, mesh).reshape(len(g2), len(g1))
                ax.contourf(g1, g2, z, levels=12)
                ax.set_title(f"t = {t:.2f}")
            fig.supxlabel("x1")
            fig.supylabel("x2")
        fig.suptitle("density evolution")
        path = os.path.join(run_dir, "density_evolution.svg")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    ctrl_path = os.path.join(run_dir, "control_profile.csv")
    if os.path.exists(ctrl_path):
        header, data = _read_csv(ctrl_path)
        fig, ax = plt.subplots(figsize=(7, 4))
        for j, name in enumerate(header[1:], start=1):
            style = "--" if name.startswith("ref ") else "-"
            label = f"reference t = {float(name[4:]):.2f}" \
                if name.startswith("ref ") else f"t = {float(name):.2f}"
            ax.plot(data[:, 0], data[:, j], style, label=label)
        ax.set_xlabel("x")
        ax.set_ylabel("control (first component)")
        ax.legend(fontsize=8)
        fig.suptitle("control profile")
        path = os.path.join(run_dir, "control_profile.svg")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    loss_path = os.path.join(run_dir, "loss_history.csv")
    if os.path.exists(loss_path):
        header, data = _read_csv(loss_path)
        fig, ax = plt.subplots(figsize=(7, 4))
        for j, name in enumerate(header[1:], start=1):
            col = data[:, j]
            if np.all(col > 0):
                ax.semilogy(data[:, 0], col, label=name)
            else:
                ax.plot(data[:, 0], col, label=name)
        ax.set_xlabel(header[0])
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
        fig.suptitle("training loss")
        path = os.path.join(run_dir, "loss_curves.svg")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def run_experiment(cfg: dict, root: str | None = None) -> str:
    """Execute one configured run and return its artifact directory."""
    run = resolve_config(cfg)
    out_dir = os.path.join(root or output_root(), run.name)
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "config": run.config_dict(),
        "versions": {"mfot": __version__,
                     "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    control, density_fn, trainer = _train(run)
    if trainer is not None:
        trainer.export_history_csv(os.path.join(out_dir, "loss_history.csv"))
    report = _write_report(run, control, density_fn,
                           os.path.join(out_dir, "report.csv"))
    _write_plot_data(run, control, out_dir)
    render_plots(out_dir)
    print(f"{run.name}: total cost {report.total_cost:.4f}, "
          f"terminal W2 {report.w2_terminal:.4f} -> {out_dir}")
    return out_dir


TABLE_PROBLEMS = {2: "lq-test-1", 4: "lq-test-2"}
# target total cost and the tolerance on relative cost error per row
TABLE_TARGETS = {
    2: {"oracle": (2.126, 0.02), "direct": (2.099, 0.05),
        "dgm": (2.096, 0.05), "admm": (2.077, 0.05)},
    4: {"oracle": (4.175, 0.02), "direct": (4.117, 0.08),
        "dgm": (3.935, 0.08), "admm": (4.054, 0.08)},
}


def reproduce_table(table: int, root: str | None = None,
                    overrides: dict | None = None) -> str:
    """Run the four benchmark rows and write achieved-vs-target CSV."""
    if table not in TABLE_PROBLEMS:
        raise ConfigError("table id must be 2 or 4")
    problem = TABLE_PROBLEMS[table]
    out_root = os.path.join(root or output_root(), f"table-{table}")
    os.makedirs(out_root, exist_ok=True)
    rows = []
    for method, (target_cost, tol) in TABLE_TARGETS[table].items():
        cfg = {"problem": problem, "method": method, "seed": 0,
               "name": method}
        if overrides and method in overrides:
            cfg[method] = overrides[method]
        try:
            run_dir = run_experiment(cfg, root=out_root)
            header, data = _read_csv(os.path.join(run_dir, "report.csv"))
            cost, rel = data[0, 0], data[0, 1]
            ok = rel <= tol if method != "oracle" else \
                abs(cost - target_cost) / target_cost <= tol
            rows.append([method, FMT % cost, FMT % target_cost,
                         FMT % rel, FMT % tol, "pass" if ok else "fail"])
        except Exception as exc:  # partial table on row failure
            rows.append([method, "", FMT % target_cost, "", FMT % tol,
                         f"failed: {exc}"])
    path = os.path.join(out_root, "comparison.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "total_cost", "target_cost", "relative_error",
                    "tolerance", "status"])
        w.writerows(rows)
    print(f"table {table} comparison -> {path}")
    return path


def run_oracle(problem: str, root: str | None = None) -> str:
    cfg = {"problem": problem, "method": "oracle",
           "name": f"{problem}-oracle"}
    return run_experiment(cfg, root=root)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfot",
        description="Mean field optimal transport solvers and benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment from a TOML config")
    p_run.add_argument("config")
    p_tab = sub.add_parser("reproduce-table",
                           help="run all four rows of a benchmark table")
    p_tab.add_argument("table", type=int, choices=(2, 4))
    p_orc = sub.add_parser("oracle", help="evaluate the closed-form benchmark")
    p_orc.add_argument("problem")
    p_plot = sub.add_parser("plot", help="re-render plots for a finished run")
    p_plot.add_argument("run_dir")
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            run_experiment(load_config(args.config))
        elif args.command == "reproduce-table":
            reproduce_table(args.table)
        elif args.command == "oracle":
            run_oracle(args.problem)
        else:
            for path in render_plots(args.run_dir):
                print(path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
