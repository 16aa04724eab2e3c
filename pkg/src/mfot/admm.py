"""Alternating-direction training on the dual of the transport problem.

The value-like field u enters only through the linear operator
Lam(u) = (du/dt + nu Lap(u) + <A x, grad u>, grad u); a multiplier field
lambda with density-like bounded first component enforces the constraint
q = Lam(u). The q update never trains a network: the pointwise saddle
problem has a closed-form inner minimizer in q and a one-dimensional
concave outer maximization in the density variable m, solved by golden
section.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tape
from .dgm import _residual_terms, _squeeze, default_domain
from .errors import ConfigError, NumericalError
from .nets import NeuralField
from .optim import Adam
from .problems import COST_QUADRATIC, DRIFT_LQ, ProblemSpec

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

K_FAMILIES = ("aversion", "max-entropy", "ot", "congestion")


@dataclass(frozen=True)
class KValue:
    """Closed-form infimum over m >= 0 of m (a - H(m, b)).

    finite=False marks an infimum of minus infinity; value is meaningless
    then and minimizer reports where the objective decreases without bound.
    """

    value: float
    finite: bool
    minimizer: float


def k_value(family: str, a: float, b: np.ndarray) -> KValue:
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    bb = float(np.sum(b * b))
    if family == "aversion":
        s = a - bb
        if s <= 0.0:
            return KValue(-0.25 * s * s, True, -0.5 * s)
        return KValue(0.0, True, 0.0)
    if family == "max-entropy":
        m_star = np.exp(0.5 * bb - a - 1.0)
        return KValue(-float(m_star), True, float(m_star))
    if family == "ot":
        if a >= 0.5 * bb:
            return KValue(0.0, True, 0.0)
        return KValue(-np.inf, False, np.inf)
    if family == "congestion":
        if a >= 0.0:
            return KValue(-bb, True, 0.0)
        return KValue(-np.inf, False, np.inf)
    raise ConfigError(f"unknown model family {family!r}")


def _density_coefficient(spec: ProblemSpec, m: np.ndarray) -> np.ndarray:
    """c(m) with m H(m, b) = c(m) |b|^2 for the shipped cost families."""
    if spec.cost_kind == COST_QUADRATIC:
        a, b, r = spec.scalars()
        return (0.25 * b * b / r) * m
    r = spec.R[0, 0]
    return m / (4.0 * r * (spec.c + m) ** spec.gamma)


def q_pointwise_update(spec: ProblemSpec, lam_u: np.ndarray,
                       lam: np.ndarray, r: float,
                       m_max: float = 50.0) -> np.ndarray:
    """Pointwise saddle update of q given Lam(u) and the multiplier.

    For each point, min over q of the augmented objective with the
    functional K expanded as a supremum over the density value m: the inner
    q minimizer is closed-form for fixed m, the outer concave problem in m
    is solved on [0, m_max] by golden-section search.
    """
    lam_u = np.atleast_2d(np.asarray(lam_u, dtype=np.float64))
    lam = np.atleast_2d(np.asarray(lam, dtype=np.float64))
    if not (np.all(np.isfinite(lam_u)) and np.all(np.isfinite(lam))):
        raise NumericalError("non-finite inputs to the q update")
    if r <= 0:
        raise ConfigError("penalty parameter r must be positive")
    l1, l2 = lam_u[:, :1], lam_u[:, 1:]
    g1, g2 = lam[:, :1], lam[:, 1:]

    def inner(m):
        c = _density_coefficient(spec, m)[:, None]
        q1 = l1 + (m[:, None] - g1) / r
        q2 = (r * l2 - g2) / (2.0 * c + r)
        d1, d2 = l1 - q1, l2 - q2
        val = (-m[:, None] * q1 + c * np.sum(q2 * q2, axis=1, keepdims=True)
               - g1 * d1 - np.sum(g2 * d2, axis=1, keepdims=True)
               + 0.5 * r * (d1 * d1 + np.sum(d2 * d2, axis=1, keepdims=True)))
        return val[:, 0], q1, q2

    lo = np.zeros(lam_u.shape[0])
    hi = np.full(lam_u.shape[0], m_max)
    for _ in range(70):
        x1 = hi - GOLDEN * (hi - lo)
        x2 = lo + GOLDEN * (hi - lo)
        f1, _, _ = inner(x1)
        f2, _, _ = inner(x2)
        keep_low = f1 > f2
        hi = np.where(keep_low, x2, hi)
        lo = np.where(keep_low, lo, x1)
    m_hat = 0.5 * (lo + hi)
    _, q1, q2 = inner(m_hat)
    return np.concatenate([q1, q2], axis=1)


@dataclass
class AdmmConfig:
    r: float = 0.1
    outer_iterations: int = 40
    inner_u: int = 120
    inner_lambda: int = 120
    batch: int = 512
    boundary_batch: int = 512
    learning_rate: float = 1e-3
    u_hidden: tuple[int, ...] = (100,) * 6
    lambda_hidden: tuple[int, ...] = (60, 60)
    density_bound: float | None = None
    m_max: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.r <= 0:
            raise ConfigError("penalty parameter r must be positive")


@dataclass
class AdmmDiagnostics:
    kfp: float
    hjb: float
    init_gap: float
    term_gap: float


class AdmmState:
    """Value field, multiplier field, and the three-phase training loop."""

    def __init__(self, spec: ProblemSpec, config: AdmmConfig | None = None,
                 domain: tuple[np.ndarray, np.ndarray] | None = None):
        if not spec.local:
            raise ConfigError("dual training requires a local model")
        self.spec = spec
        self.config = config or AdmmConfig()
        self.lo, self.hi = domain if domain is not None \
            else default_domain(spec)
        c = self.config
        bound = c.density_bound
        if bound is None:
            bound = 1.0 if spec.cost_kind == COST_QUADRATIC else 5.0
        self.density_bound = bound
        quad = spec.cost_kind == COST_QUADRATIC
        self.u_field = NeuralField(spec.d, 1, hidden=c.u_hidden,
                                   activation="sigmoid", residual=True,
                                   quadratic=quad, seed=c.seed)
        self.lambda_field = NeuralField(spec.d, spec.d + 1,
                                        hidden=c.lambda_hidden,
                                        activation="sigmoid", residual=True,
                                        bounded_first=bound, seed=c.seed + 1)
        self.history: list[AdmmDiagnostics] = []

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    @staticmethod
    def _clone(field: NeuralField) -> NeuralField:
        twin = NeuralField(field.d, field.out_dim, arch=field.arch,
                           hidden=field.hidden, activation=field.activation,
                           residual=field.residual,
                           quadratic=field.quadratic,
                           bounded_first=field.bounded_first,
                           softplus_output=field.softplus_output)
        twin.theta = field.theta.copy()
        return twin

    # operator -----------------------------------------------------------------
    def _lam_op(self, tape: Tape, t, x, params) -> list:
        """Components of Lam(u) as tape variables, each (B, 1)."""
        spec = self.spec
        _, u_t, u_dx, u_lap = self.u_field.with_derivs(tape, t, x,
                                                       params=params)
        first = ad.add(u_t, spec.nu * u_lap)
        if spec.drift_kind == DRIFT_LQ:
            a, _, _ = spec.scalars()
            drift_dot = None
            for k in range(spec.d):
                term = u_dx[k] * (a * x[:, k:k + 1])
                drift_dot = term if drift_dot is None \
                    else ad.add(drift_dot, term)
            first = ad.add(first, drift_dot)
        return [first] + list(u_dx)

    def lam_op(self, t, x, field: NeuralField | None = None) -> np.ndarray:
        """Numeric Lam(u)(t, x), shape (B, d+1)."""
        field = self.u_field if field is None else field
        spec = self.spec
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        _, u_t, u_dx, u_lap = field.eval_with_derivs(t, x)
        first = u_t + spec.nu * u_lap
        if spec.drift_kind == DRIFT_LQ:
            a, _, _ = spec.scalars()
            first = first + a * np.sum(x * u_dx[:, 0, :], axis=1,
                                       keepdims=True)
        return np.concatenate([first, u_dx[:, 0, :]], axis=1)

    # batches --------------------------------------------------------------------
    def _batch(self, counter: int):
        c, spec = self.config, self.spec
        seed = (c.seed + (counter + 1) * 0x9E3779B97F4A7C15) % 2 ** 63
        tau = spec.T * rng.uniforms(seed, rng.STREAM_BATCH,
                                    np.arange(c.batch), salt=1)
        xi = rng.uniform_box(seed, rng.STREAM_BATCH, c.batch,
                             self.lo, self.hi, tag=2)
        y = rng.uniform_box(seed, rng.STREAM_BATCH, c.boundary_batch,
                            self.lo, self.hi, tag=3)
        return tau, xi, y

    # losses ----------------------------------------------------------------------
    def loss_u(self, tau, xi, y, q: np.ndarray, lam: np.ndarray):
        """Augmented objective in u with q and the multiplier frozen."""
        spec = self.spec
        tape = Tape()
        pu = self.u_field.bind(tape)
        lam_parts = self._lam_op(tape, tau, xi, pu)
        inner = None
        for j, part in enumerate(lam_parts):
            diff = ad.add(part, -q[:, j:j + 1])
            contrib = ad.add(0.5 * self.config.r * ad.square(diff),
                             -1.0 * (part * lam[:, j:j + 1]))
            inner = contrib if inner is None else ad.add(inner, contrib)
        inner_mean = ad.vmean(inner) * (spec.T * self.volume)
        u_term = _squeeze(self.u_field.value(tape, spec.T, y, params=pu))
        u_init = _squeeze(self.u_field.value(tape, 0.0, y, params=pu))
        boundary = ad.vmean(ad.add(u_term * spec.rhoT.density(y),
                                   -1.0 * (u_init * spec.rho0.density(y))))
        total = ad.add(boundary * self.volume, inner_mean)
        return total, tape

    def loss_lambda(self, tau, xi, target: np.ndarray):
        """Regression of the multiplier onto its classic update target."""
        tape = Tape()
        pl = self.lambda_field.bind(tape)
        lam = self.lambda_field.value(tape, tau, xi, params=pl)
        diff = ad.add(lam, -target)
        total = ad.vmean(ad.vsum(ad.square(diff), axis=1))
        return total, tape

    # evaluation helpers ------------------------------------------------------------
    def multiplier(self, t, x) -> np.ndarray:
        return self.lambda_field.eval(t, x)

    def density(self, t, x) -> np.ndarray:
        return self.lambda_field.eval(t, x)[:, 0]

    def control(self, t, x) -> np.ndarray:
        spec = self.spec
        _, _, u_dx, _ = self.u_field.eval_with_derivs(t, x)
        grad_u = u_dx[:, 0, :]
        if spec.cost_kind == COST_QUADRATIC:
            return -0.5 * grad_u @ (spec.Rinv @ spec.B.T).T
        ell = (spec.c + self.density(t, x)) ** spec.gamma
        return -grad_u / (2.0 * spec.R[0, 0] * ell[:, None])

    def _diagnostics(self, counter: int) -> AdmmDiagnostics:
        spec = self.spec
        tau, xi, y = self._batch(counter)
        tape = Tape()
        pl = self.lambda_field.bind(tape)
        pu = self.u_field.bind(tape)
        l_val, l_t, l_dx, l_lap = self.lambda_field.with_derivs(
            tape, tau, xi, params=pl)
        first = slice(0, 1)
        m = (ad.take(l_val, first), ad.take(l_t, first),
             [ad.take(g, first) for g in l_dx], ad.take(l_lap, first))
        u = self.u_field.with_derivs(tape, tau, xi, params=pu)
        kfp, hjb = _residual_terms(spec, xi, m, u)
        m0 = self.density(0.0, y)
        m_t = self.density(spec.T, y)
        return AdmmDiagnostics(
            kfp=float(np.mean(kfp.value ** 2)),
            hjb=float(np.mean(hjb.value ** 2)),
            init_gap=float(np.mean((m0 - spec.rho0.density(y)) ** 2)),
            term_gap=float(np.mean((m_t - spec.rhoT.density(y)) ** 2)))

    # main loop -------------------------------------------------------------------
    def run(self, outer_iterations: int | None = None
            ) -> list[AdmmDiagnostics]:
        c = self.config
        outer = c.outer_iterations if outer_iterations is None \
            else outer_iterations
        opt_u = Adam(c.learning_rate)
        opt_l = Adam(c.learning_rate)
        counter = 0
        for k in range(outer):
            # phase 1: descend in u with q computed from the frozen snapshot
            frozen_u = self._clone(self.u_field)
            for _ in range(c.inner_u):
                tau, xi, y = self._batch(counter)
                counter += 1
                lam_u_old = self.lam_op(tau, xi, field=frozen_u)
                lam = self.multiplier(tau, xi)
                q = q_pointwise_update(self.spec, lam_u_old, lam, c.r,
                                       c.m_max)
                total, tape = self.loss_u(tau, xi, y, q, lam)
                grad = tape.grad_params(total)
                self.u_field.theta = opt_u.step(self.u_field.theta, grad)
            # phase 2 is implicit: q is a pointwise function of (u, lambda)
            # phase 3: regress lambda onto the multiplier update target
            frozen_l = self._clone(self.lambda_field)
            for _ in range(c.inner_lambda):
                tau, xi, y = self._batch(counter)
                counter += 1
                lam_u_new = self.lam_op(tau, xi)
                lam_old = np.atleast_2d(frozen_l.eval(tau, xi))
                q = q_pointwise_update(self.spec, lam_u_new, lam_old, c.r,
                                       c.m_max)
                target = lam_old - c.r * (lam_u_new - q)
                total, tape = self.loss_lambda(tau, xi, target)
                grad = tape.grad_params(total)
                self.lambda_field.theta = opt_l.step(
                    self.lambda_field.theta, grad)
            diag = self._diagnostics(counter)
            counter += 1
            self.history.append(diag)
            if len(self.history) > 5:
                past = self.history[-6].kfp + self.history[-6].hjb
                now = diag.kfp + diag.hjb
                if np.isfinite(past) and now > 10.0 * max(past, 1e-12):
                    raise NumericalError(
                        f"residuals grew tenfold by outer iteration {k}")
        return self.history

    def export_history_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "kfp_residual", "hjb_residual",
                             "init_gap", "term_gap"])
            for i, row in enumerate(self.history):
                writer.writerow([i, row.kfp, row.hjb, row.init_gap,
                                 row.term_gap])
