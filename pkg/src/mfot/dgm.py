"""Residual training of the coupled density/value PDE system.

Two neural fields approximate the population density m and the value-like
function u. The loss is a weighted Monte Carlo estimate of the squared
forward-equation residual, the squared backward-equation residual, and the
squared mismatch of m against the prescribed initial and terminal densities.
All derivatives entering the residuals come from the tape, so one backward
pass gives exact parameter gradients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tape, Var
from .errors import ConfigError, ContractError, NumericalError
from .nets import NeuralField
from .optim import Adam
from .problems import COST_QUADRATIC, DRIFT_LQ, ProblemSpec


def default_domain(spec: ProblemSpec) -> tuple[np.ndarray, np.ndarray]:
    """Truncation box holding essentially all of the mass for shipped cases."""
    if spec.drift_kind == DRIFT_LQ:
        lo, hi = -4.0, 6.0
    else:
        lo, hi = -2.0, 4.0
    return np.full(spec.d, lo), np.full(spec.d, hi)


@dataclass
class DgmConfig:
    hidden: tuple[int, ...] = (40, 40)
    arch: str = "dgm"
    weight_kfp: float = 20.0
    weight_init: float = 20.0
    weight_term: float = 50.0
    weight_hjb: float = 1.0
    batch_interior: int = 500
    batch_boundary: int = 500
    iterations: int = 4000
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        for name in ("weight_kfp", "weight_init", "weight_term", "weight_hjb"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


def _squeeze(v: Var) -> Var:
    """(B, 1) -> (B,) on the tape."""
    return ad.take(v, 0, axis=-1)


def _residual_terms(spec: ProblemSpec, x: np.ndarray, m, u):
    """Tape KFP and HJB residuals from with_derivs outputs, each (B,)."""
    if not spec.local:
        raise ContractError("PDE residuals need a local interaction model")
    m_val, m_t, m_dx, m_lap = m
    u_val, u_t, u_dx, u_lap = u
    nu = spec.nu
    grad_dot = None
    grad_sq = None
    for k in range(spec.d):
        grad_dot = ad.add(grad_dot, m_dx[k] * u_dx[k]) if grad_dot is not None \
            else m_dx[k] * u_dx[k]
        grad_sq = ad.add(grad_sq, ad.square(u_dx[k])) if grad_sq is not None \
            else ad.square(u_dx[k])
    if spec.cost_kind == COST_QUADRATIC:
        a, b, r = spec.scalars()
        c_flow = 0.5 * b * b / r
        # divergence of m * (dH/dp) with dH/dp = c_flow grad(u) - A x
        ax_dot_dm = None
        for k in range(spec.d):
            axk = a * x[:, k:k + 1]
            term = m_dx[k] * axk
            ax_dot_dm = ad.add(ax_dot_dm, term) if ax_dot_dm is not None \
                else term
        div = ad.add(c_flow * grad_dot - ax_dot_dm,
                     m_val * (ad.add(c_flow * u_lap, -a * spec.d)))
        kfp = ad.add(m_t - nu * m_lap, -1.0 * div)
        ax_dot_du = None
        for k in range(spec.d):
            term = u_dx[k] * (a * x[:, k:k + 1])
            ax_dot_du = ad.add(ax_dot_du, term) if ax_dot_du is not None \
                else term
        hamilton = ad.add((0.25 * b * b / r) * grad_sq, -1.0 * ax_dot_du)
        hjb = ad.add(-1.0 * u_t - nu * u_lap, hamilton)
        return _squeeze(kfp), _squeeze(hjb)
    # congestion running cost, controlled drift
    r = spec.R[0, 0]
    ell = ad.add(m_val, spec.c)
    if spec.gamma == 0:
        weight = m_val * (0.5 / r)
        weight_prime = 0.5 / r
        div = ad.add(weight_prime * grad_dot, weight * u_lap)
        hamilton = (0.25 / r) * grad_sq
        local = None
    else:
        inv_ell = ad.reciprocal(ell)
        weight = (0.5 / r) * (m_val * inv_ell)
        weight_prime = (0.5 * spec.c / r) * ad.square(inv_ell)
        div = ad.add(weight_prime * grad_dot, weight * u_lap)
        hamilton = (0.25 / r) * (grad_sq * inv_ell)
        local = (-0.25 / r) * (m_val * (grad_sq * ad.square(inv_ell)))
    kfp = ad.add(m_t - nu * m_lap, -1.0 * div)
    hjb = ad.add(-1.0 * u_t - nu * u_lap, hamilton)
    if local is not None:
        hjb = ad.add(hjb, local)
    return _squeeze(kfp), _squeeze(hjb)


def _derivs_of(field, spec: ProblemSpec, tape: Tape, t, x, params=None):
    if hasattr(field, "with_derivs"):
        return field.with_derivs(tape, t, x, params) if params is not None \
            else field.with_derivs(tape, t, x)
    # analytic field: numeric (val, dt, dx (B, out, d), lap)
    val, dt, dx, lap = field.eval_with_derivs(t, x)
    return (tape.constant(val), tape.constant(dt),
            [tape.constant(dx[..., k]) for k in range(dx.shape[-1])],
            tape.constant(lap))


def kfp_residual(spec: ProblemSpec, m_field, u_field, tau, xi) -> np.ndarray:
    """Numeric forward-equation residual at (tau, xi), shape (B,)."""
    tape = Tape()
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    m = _derivs_of(m_field, spec, tape, tau, xi)
    u = _derivs_of(u_field, spec, tape, tau, xi)
    kfp, _ = _residual_terms(spec, xi, m, u)
    return kfp.value


def hjb_residual(spec: ProblemSpec, m_field, u_field, tau, xi) -> np.ndarray:
    """Numeric backward-equation residual at (tau, xi), shape (B,)."""
    tape = Tape()
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    m = _derivs_of(m_field, spec, tape, tau, xi)
    u = _derivs_of(u_field, spec, tape, tau, xi)
    _, hjb = _residual_terms(spec, xi, m, u)
    return hjb.value


@dataclass
class DgmLossParts:
    kfp: float
    hjb: float
    init: float
    term: float
    total: float


class DgmTrainer:
    """Joint residual training of the density and value fields."""

    def __init__(self, spec: ProblemSpec, config: DgmConfig | None = None,
                 domain: tuple[np.ndarray, np.ndarray] | None = None):
        if not spec.local:
            raise ConfigError("residual training requires a local model")
        self.spec = spec
        self.config = config or DgmConfig()
        self.lo, self.hi = domain if domain is not None \
            else default_domain(spec)
        c = self.config
        self.m_field = NeuralField(spec.d, 1, arch=c.arch, hidden=c.hidden,
                                   softplus_output=True, seed=c.seed)
        self.u_field = NeuralField(spec.d, 1, arch=c.arch, hidden=c.hidden,
                                   seed=c.seed + 1)
        self.history: list[DgmLossParts] = []

    # sampling ----------------------------------------------------------------
    def _batch(self, iteration: int):
        c, spec = self.config, self.spec
        seed = (c.seed + (iteration + 1) * 0x9E3779B97F4A7C15) % 2 ** 63
        tau = spec.T * rng.uniforms(
            seed, rng.STREAM_BATCH, np.arange(c.batch_interior), salt=1)
        xi = rng.uniform_box(seed, rng.STREAM_BATCH, c.batch_interior,
                             self.lo, self.hi, tag=2)
        xi0 = rng.uniform_box(seed, rng.STREAM_BATCH, c.batch_boundary,
                              self.lo, self.hi, tag=3)
        xi_t = rng.uniform_box(seed, rng.STREAM_BATCH, c.batch_boundary,
                               self.lo, self.hi, tag=4)
        return tau, xi, xi0, xi_t

    # loss ---------------------------------------------------------------------
    def loss(self, iteration: int = 0):
        c, spec = self.config, self.spec
        tau, xi, xi0, xi_t = self._batch(iteration)
        tape = Tape()
        pm = self.m_field.bind(tape)
        pu = self.u_field.bind(tape)
        m = self.m_field.with_derivs(tape, tau, xi, params=pm)
        u = self.u_field.with_derivs(tape, tau, xi, params=pu)
        kfp, hjb = _residual_terms(spec, xi, m, u)
        kfp_term = ad.vmean(ad.square(kfp))
        hjb_term = ad.vmean(ad.square(hjb))
        m0 = _squeeze(self.m_field.value(tape, 0.0, xi0, params=pm))
        m_t = _squeeze(self.m_field.value(tape, spec.T, xi_t, params=pm))
        init_term = ad.vmean(ad.square(ad.add(m0, -spec.rho0.density(xi0))))
        term_term = ad.vmean(ad.square(ad.add(m_t, -spec.rhoT.density(xi_t))))
        total = ad.add(ad.add(c.weight_kfp * kfp_term,
                              c.weight_hjb * hjb_term),
                       ad.add(c.weight_init * init_term,
                              c.weight_term * term_term))
        parts = DgmLossParts(kfp=float(kfp_term.value),
                             hjb=float(hjb_term.value),
                             init=float(init_term.value),
                             term=float(term_term.value),
                             total=float(total.value))
        return total, tape, parts

    # training -------------------------------------------------------------------
    def train(self, iterations: int | None = None) -> list[DgmLossParts]:
        budget = self.config.iterations if iterations is None else iterations
        opt = Adam(self.config.learning_rate)
        n_m = self.m_field.n_params
        theta = np.concatenate([self.m_field.theta, self.u_field.theta])
        for it in range(budget):
            total, tape, parts = self.loss(it)
            if not np.isfinite(parts.total):
                raise NumericalError(f"non-finite loss at iteration {it}")
            grad = tape.grad_params(total)
            theta = opt.step(theta, grad)
            self.m_field.theta = theta[:n_m]
            self.u_field.theta = theta[n_m:]
            self.history.append(parts)
        return self.history

    # evaluation ------------------------------------------------------------------
    def control(self, t, x) -> np.ndarray:
        """Recovered feedback control from the value field's gradient."""
        spec = self.spec
        _, _, u_dx, _ = self.u_field.eval_with_derivs(t, x)
        grad_u = u_dx[:, 0, :]
        if spec.cost_kind == COST_QUADRATIC:
            return -0.5 * grad_u @ (spec.Rinv @ spec.B.T).T
        m_val = self.density(t, x)
        ell = (spec.c + m_val) ** spec.gamma
        return -grad_u / (2.0 * spec.R[0, 0] * ell[:, None])

    def density(self, t, x) -> np.ndarray:
        return self.m_field.eval(t, x)[:, 0]

    def export_history_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "kfp", "hjb", "init_bc", "term_bc",
                             "total"])
            for i, row in enumerate(self.history):
                writer.writerow([i, row.kfp, row.hjb, row.init, row.term,
                                 row.total])
