"""Control learning on simulated particle paths.

A feedback-control network is trained by stochastic gradient descent on the
Monte Carlo running cost of the particle system it induces, plus a terminal
penalty proportional to the entropic Wasserstein distance between the
terminal ensemble and a fresh sample of the target distribution. Gradients
flow through the dynamics and the cost on the tape; the transport plan is
held fixed at its converged value when differentiating the penalty.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng, sinkhorn
from .autodiff import Tape
from .errors import ConfigError, Unconverged
from .nets import NeuralField
from .optim import Adam
from .problems import COST_QUADRATIC, ProblemSpec
from .simulate import SimulationConfig

_SEED_STRIDE = 0x9E3779B97F4A7C15


@dataclass
class DirectConfig:
    n_particles: int = 300
    n_steps: int = 20
    penalty_weight: float = 50.0
    alpha_start: float = 0.1
    alpha_floor: float = 1e-3
    alpha_factor: float = 0.5
    iterations: int = 1500
    learning_rate: float = 3e-3
    hidden: tuple[int, ...] = (60,) * 6
    activation: str = "tanh"
    seed: int = 0
    sinkhorn_max_iter: int = 2000
    sinkhorn_tol: float = 1e-4

    def __post_init__(self):
        if self.penalty_weight <= 0:
            raise ConfigError("penalty weight must be positive")
        if self.alpha_start <= 0 or self.alpha_floor <= 0:
            raise ConfigError("regularization weights must be positive")


@dataclass
class LossParts:
    running: float
    penalty: float
    total: float
    w2: float
    alpha: float


class DirectTrainer:
    """Trains a (t, x) -> velocity network against the particle objective."""

    def __init__(self, spec: ProblemSpec, config: DirectConfig | None = None):
        self.spec = spec
        self.config = config or DirectConfig()
        self.policy = NeuralField(spec.d, spec.k, hidden=self.config.hidden,
                                  activation=self.config.activation,
                                  seed=self.config.seed)
        self.alpha = self.config.alpha_start
        self.history: list[LossParts] = []
        self._w2_at_last_cut: float | None = None
        self._potentials: tuple[np.ndarray, np.ndarray, float] | None = None
        self._target: np.ndarray | None = None

    # loss -------------------------------------------------------------------
    def _iteration_seed(self, iteration: int) -> int:
        return (self.config.seed + (iteration + 1) * _SEED_STRIDE) % 2 ** 63

    def _tape_density(self, x):
        """Smoothed empirical density at the particles, on the tape."""
        eps = self.spec.kernel_eps
        n, d = x.shape
        sq_norms = ad.vsum(x * x, axis=1, keepdims=True)
        gram = ad.matmul(x, ad.transpose(x))
        sq = ad.add(ad.add(sq_norms, ad.transpose(sq_norms)), -2.0 * gram)
        norm = (2.0 * np.pi * eps ** 2) ** (-0.5 * d)
        kernel = norm * ad.exp(sq * (-0.5 / eps ** 2))
        return ad.vmean(kernel, axis=1)

    def _running_cost_step(self, x, v):
        spec = self.spec
        if spec.cost_kind == COST_QUADRATIC:
            return ad.vsum(ad.matmul(v, spec.R) * v)
        congestion = self.spec.ell(self._tape_density(x))
        speed_sq = ad.vsum(v * v, axis=1)
        if spec.gamma == 0:
            return spec.R[0, 0] * ad.vsum(speed_sq)
        return spec.R[0, 0] * ad.vsum(congestion * speed_sq)

    def _transport_plan(self, points: np.ndarray, target: np.ndarray):
        # a loose marginal tolerance is plenty for a clean gradient signal
        cap = self.config.sinkhorn_max_iter
        tol = self.config.sinkhorn_tol
        if self._potentials is not None and self._potentials[2] == self.alpha:
            try:
                return sinkhorn.sinkhorn_warm(points, target, self.alpha,
                                              self._potentials[0],
                                              self._potentials[1],
                                              max_iter=cap, tol=tol)
            except Unconverged as err:
                if err.violation * len(points) <= 1e-3:
                    return err.plan
        try:
            return sinkhorn.sinkhorn_annealed(points, target, self.alpha,
                                              max_iter=cap, tol=tol,
                                              stage_tol=1e-3)
        except Unconverged as err:
            if err.violation * len(points) > 1e-3:
                raise
            return err.plan

    def _penalty(self, tape: Tape, x_terminal, target: np.ndarray):
        """Fixed-plan entropic transport cost of the terminal ensemble."""
        points = x_terminal.value
        plan = self._transport_plan(points, target)
        self._potentials = (plan.log_u, plan.log_v, plan.alpha)
        m = plan.matrix
        row_mass = m.sum(axis=1)
        const = float(np.sum(m.sum(axis=0) * np.sum(target ** 2, axis=1)))
        cross = ad.vsum(x_terminal * (m @ target))
        cost = ad.add(ad.vsum(ad.vsum(x_terminal * x_terminal, axis=1)
                              * row_mass) - 2.0 * cross, const)
        # penalize the squared distance: its gradient stays bounded as the
        # terminal gap closes, where the root's gradient would blow up
        w2 = float(np.sqrt(max(cost.value, 0.0)))
        return self.config.penalty_weight * cost, w2

    def path_loss(self, iteration: int = 0):
        """(loss Var, tape, parts) for one fresh sample of paths and target."""
        spec, cfg = self.spec, self.config
        seed = self._iteration_seed(iteration)
        sim = SimulationConfig(cfg.n_particles, cfg.n_steps, seed)
        dt = sim.dt(spec)
        x0 = spec.rho0.sample(cfg.n_particles, seed)
        noise = rng.noise_increments(seed, cfg.n_particles, cfg.n_steps,
                                     spec.d, dt)
        # a fixed representative target cloud keeps the penalty gradient
        # from jittering with target resampling noise
        if self._target is None:
            self._target = spec.rhoT.representative_points(cfg.n_particles,
                                                           seed=cfg.seed)
        target = self._target

        tape = Tape()
        params = self.policy.bind(tape)
        x = tape.constant(x0)
        cost_sum = None
        for i in range(cfg.n_steps):
            t = i * dt
            v = self.policy.value(tape, t, x, params=params)
            step_cost = self._running_cost_step(x, v)
            cost_sum = step_cost if cost_sum is None \
                else ad.add(cost_sum, step_cost)
            if spec.drift_kind == "lq":
                mean = ad.vmean(x, axis=0, keepdims=True)
                b = ad.add(ad.add(ad.matmul(x, spec.A.T),
                                  ad.matmul(mean, spec.Abar.T)),
                           ad.matmul(v, spec.B.T))
            else:
                b = v
            x = ad.check_finite(tape, ad.add(ad.add(x, dt * b),
                                             spec.sigma * noise[i]),
                                f"particle states at step {i + 1}")
        running = cost_sum * (dt / cfg.n_particles)
        penalty, w2 = self._penalty(tape, x, target)
        loss = ad.add(running, penalty)
        parts = LossParts(running=float(running.value),
                          penalty=float(penalty.value),
                          total=float(loss.value), w2=w2, alpha=self.alpha)
        return loss, tape, parts

    # training ----------------------------------------------------------------
    def _update_alpha(self, w2: float) -> None:
        if self._w2_at_last_cut is None:
            self._w2_at_last_cut = w2
            return
        if w2 <= 0.5 * self._w2_at_last_cut:
            self.alpha = max(self.config.alpha_floor,
                             self.alpha * self.config.alpha_factor)
            self._w2_at_last_cut = w2

    def train(self, iterations: int | None = None) -> list[LossParts]:
        budget = self.config.iterations if iterations is None else iterations
        opt = Adam(self.config.learning_rate)
        smoothed_w2 = None
        for it in range(budget):
            try:
                loss, tape, parts = self.path_loss(it)
            except Unconverged:
                self.alpha = min(self.config.alpha_start, self.alpha * 2.0)
                continue
            grad = tape.grad_params(loss)
            self.policy.theta = opt.step(self.policy.theta, grad)
            self.history.append(parts)
            smoothed_w2 = parts.w2 if smoothed_w2 is None \
                else 0.9 * smoothed_w2 + 0.1 * parts.w2
            self._update_alpha(smoothed_w2)
        return self.history

    def control(self, t, x) -> np.ndarray:
        return self.policy.eval(t, x)

    def export_history_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "running_cost", "penalty", "total",
                             "w2", "alpha", "penalty_weight"])
            for i, row in enumerate(self.history):
                writer.writerow([i, row.running, row.penalty, row.total,
                                 row.w2, row.alpha,
                                 self.config.penalty_weight])
