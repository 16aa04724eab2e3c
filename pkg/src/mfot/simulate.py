"""Seeded Euler-Maruyama simulation of the interacting particle system.

Noise increments come from the counter-based generator, so a rollout is a
pure function of (seed, control parameters) and can be replayed bit-exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import ConfigError, ContractError, DivergedSimulation
from .problems import ProblemSpec


@dataclass(frozen=True)
class SimulationConfig:
    """Particle count, step count and seed; the step size is T / n_steps."""

    n_particles: int
    n_steps: int
    seed: int

    def __post_init__(self):
        if self.n_particles < 1:
            raise ConfigError("n_particles must be >= 1")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")

    def dt(self, spec: ProblemSpec) -> float:
        return spec.T / self.n_steps


@dataclass(frozen=True)
class ParticleEnsemble:
    """States (n_steps+1, N, d), times (n_steps+1,), noise (n_steps, N, d)."""

    times: np.ndarray
    states: np.ndarray
    noise: np.ndarray
    config: SimulationConfig

    @property
    def n_particles(self) -> int:
        return self.states.shape[1]

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1


def rollout(spec: ProblemSpec, control, cfg: SimulationConfig,
            init_stream: int = rng.STREAM_INIT) -> ParticleEnsemble:
    """Simulate N particles under the feedback control (t, x_batch) -> v.

    The control is any callable mapping (t, (N, d) positions) to (N, k)
    velocities; neural fields and the analytic steering control both fit.
    """
    n, steps = cfg.n_particles, cfg.n_steps
    dt = cfg.dt(spec)
    x0 = spec.rho0.sample(n, cfg.seed, stream=init_stream)
    noise = rng.noise_increments(cfg.seed, n, steps, spec.d, dt)
    states = np.empty((steps + 1, n, spec.d))
    states[0] = x0
    times = dt * np.arange(steps + 1)
    for i in range(steps):
        x = states[i]
        v = np.atleast_2d(np.asarray(control(times[i], x), dtype=np.float64))
        mu_bar = x.mean(axis=0)
        states[i + 1] = x + dt * spec.drift(x, mu_bar, v) + spec.sigma * noise[i]
        if not np.all(np.isfinite(states[i + 1])):
            raise DivergedSimulation(i + 1)
    return ParticleEnsemble(times=times, states=states, noise=noise, config=cfg)


def empirical_mean(ensemble: ParticleEnsemble, n: int) -> np.ndarray:
    if not 0 <= n <= ensemble.n_steps:
        raise ContractError(f"step index {n} outside [0, {ensemble.n_steps}]")
    return ensemble.states[n].mean(axis=0)


def empirical_measure(ensemble: ParticleEnsemble, n: int
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Support points and uniform weights of the step-n empirical measure."""
    if not 0 <= n <= ensemble.n_steps:
        raise ContractError(f"step index {n} outside [0, {ensemble.n_steps}]")
    pts = ensemble.states[n]
    return pts, np.full(len(pts), 1.0 / len(pts))


def silverman_bandwidth(points: np.ndarray) -> float:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, d = points.shape
    sd = float(np.mean(points.std(axis=0, ddof=1)))
    return sd * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def kde(points: np.ndarray, bandwidth: float, grid: np.ndarray) -> np.ndarray:
    """Gaussian kernel density estimate at the query grid, (B,) values."""
    if bandwidth <= 0:
        raise ConfigError("bandwidth must be positive")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    d = points.shape[1]
    sq = np.sum((grid[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    norm = (2.0 * np.pi * bandwidth ** 2) ** (-0.5 * d)
    return norm * np.exp(-0.5 * sq / bandwidth ** 2).mean(axis=1)


def export_csv(ensemble: ParticleEnsemble, path: str) -> None:
    d = ensemble.states.shape[2]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "particle"] + [f"x{j + 1}" for j in range(d)])
        for i in range(ensemble.n_steps + 1):
            for p in range(ensemble.n_particles):
                writer.writerow([i, p] + list(ensemble.states[i, p]))
