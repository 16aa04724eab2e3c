"""Uniform evaluation protocol for trained controls.

Every method is scored the same way: Monte Carlo total cost on a fresh
evaluation seed, relative error against the analytic benchmark when one
exists, expected squared control error along the analytic optimal flow,
terminal Wasserstein deviation, and terminal density mismatch in L2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import rng, sinkhorn
from .errors import ConfigError
from .lq_oracle import LQSolution
from .problems import COST_QUADRATIC, ProblemSpec, kernel_density_term
from .simulate import ParticleEnsemble, SimulationConfig, rollout

EVAL_ALPHA = 1e-3
SINKHORN_POINT_CAP = 1500


@dataclass(frozen=True)
class EvaluationReport:
    total_cost: float
    relative_error: float
    control_l2: float
    w2_terminal: float
    l2_density_terminal: float
    n_particles: int
    n_steps: int
    seed: int

    def csv_row(self) -> list:
        return [self.total_cost, self.relative_error, self.control_l2,
                self.w2_terminal, self.l2_density_terminal]


def evaluation_config(seed: int, n_particles: int = 10_000,
                      n_steps: int = 100) -> SimulationConfig:
    return SimulationConfig(n_particles, n_steps, seed)


def _eval_rollout(spec: ProblemSpec, control,
                  cfg: SimulationConfig) -> ParticleEnsemble:
    return rollout(spec, control, cfg, init_stream=rng.STREAM_EVAL)


def total_cost(spec: ProblemSpec, control, cfg: SimulationConfig,
               ensemble: ParticleEnsemble | None = None) -> float:
    """Monte Carlo running cost of the controlled particle system."""
    if ensemble is None:
        ensemble = _eval_rollout(spec, control, cfg)
    dt = cfg.dt(spec)
    acc = 0.0
    for i in range(cfg.n_steps):
        x = ensemble.states[i]
        v = np.atleast_2d(np.asarray(control(ensemble.times[i], x),
                                     dtype=np.float64))
        if spec.cost_kind == COST_QUADRATIC:
            dens = 0.0
        else:
            dens = kernel_density_term(x, x, spec.kernel_eps)
        acc += dt * float(np.mean(spec.running_cost(x, dens, v)))
    return acc


def relative_error(estimate: float, reference: float) -> float:
    if reference == 0.0:
        raise ConfigError("reference cost must be nonzero")
    return abs(estimate - reference) / abs(reference)


def control_l2_error(spec: ProblemSpec, control, oracle: LQSolution,
                     cfg: SimulationConfig) -> float:
    """Expected squared control gap integrated along the analytic flow.

    Points are sampled from the analytic Gaussian flow at each time step, so
    the measure weighting the squared gap is the optimally controlled
    population. A constant offset c in the control scores exactly |c|^2 T.
    """
    dt = cfg.dt(spec)
    acc = 0.0
    for i in range(cfg.n_steps):
        t = i * dt
        mu = oracle.mu_at(t)
        sigma = oracle.Sigma_at(t)
        chol = np.linalg.cholesky(sigma)
        z = rng.standard_normals(cfg.seed, rng.STREAM_EVAL,
                                 (cfg.n_particles, spec.d), tag=1000 + i)
        x = mu[None, :] + z @ chol.T
        gap = np.atleast_2d(control(t, x)) - oracle.control(t, x)
        acc += dt * float(np.mean(np.sum(gap * gap, axis=1)))
    return acc


def w2_terminal(spec: ProblemSpec, control, cfg: SimulationConfig,
                alpha: float = EVAL_ALPHA,
                ensemble: ParticleEnsemble | None = None) -> float:
    """Terminal-ensemble Wasserstein deviation from a fresh target sample.

    In one dimension the exact sorted-pairing distance is used; otherwise
    the entropic estimate on a capped subsample.
    """
    if ensemble is None:
        ensemble = _eval_rollout(spec, control, cfg)
    points = ensemble.states[-1]
    target = spec.rhoT.sample(len(points), cfg.seed + 1,
                              stream=rng.STREAM_TARGET)
    if spec.d == 1:
        return sinkhorn.exact_w2_1d(points, target)
    cap = min(len(points), SINKHORN_POINT_CAP)
    return sinkhorn.w2_estimate(points[:cap], target[:cap], alpha,
                                strict=False)


def l2_density_terminal(spec: ProblemSpec, density_fn,
                        cfg: SimulationConfig,
                        lo: np.ndarray, hi: np.ndarray) -> float:
    """Volume-weighted mean squared terminal density mismatch on the box."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    x = rng.uniform_box(cfg.seed, rng.STREAM_EVAL, cfg.n_particles, lo, hi,
                        tag=7)
    volume = float(np.prod(hi - lo))
    gap = np.asarray(density_fn(x), dtype=np.float64).reshape(-1) \
        - spec.rhoT.density(x)
    return volume * float(np.mean(gap * gap))


def evaluate(spec: ProblemSpec, control, cfg: SimulationConfig,
             oracle: LQSolution | None = None,
             reference_cost: float | None = None,
             density_fn=None,
             domain: tuple[np.ndarray, np.ndarray] | None = None
             ) -> EvaluationReport:
    """Full report for one trained control (one table row)."""
    ensemble = _eval_rollout(spec, control, cfg)
    cost = total_cost(spec, control, cfg, ensemble=ensemble)
    rel = relative_error(cost, reference_cost) \
        if reference_cost is not None else np.nan
    ctrl_l2 = control_l2_error(spec, control, oracle, cfg) \
        if oracle is not None else np.nan
    w2 = w2_terminal(spec, control, cfg, ensemble=ensemble)
    if density_fn is not None and domain is not None:
        dens = l2_density_terminal(spec, density_fn, cfg, *domain)
    else:
        dens = np.nan
    return EvaluationReport(total_cost=cost, relative_error=rel,
                            control_l2=ctrl_l2, w2_terminal=w2,
                            l2_density_terminal=dens,
                            n_particles=cfg.n_particles,
                            n_steps=cfg.n_steps, seed=cfg.seed)


CSV_HEADER = ["label", "total_cost", "relative_error", "control_l2",
              "w2_terminal", "l2_density_terminal"]


def export_reports_csv(rows: list[tuple[str, EvaluationReport]],
                       path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for label, report in rows:
            writer.writerow([label] + report.csv_row())
