"""Problem instances: dynamics, running costs, endpoint Gaussians, Hamiltonians.

Two cost families are supported. Quadratic: f(x, mu, a) = a^T R a with drift
b = A x + Abar mu_bar + B a. Congestion: f = R * ell^gamma * |a|^2 with b = a,
where ell = c + density (nonlocal: Gaussian-kernel smoothed empirical
density; local: the density value itself).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.stats
import scipy.stats.qmc

from . import rng
from .errors import ConfigError, ContractError, NumericalError

DRIFT_LQ = "lq"
DRIFT_CONTROL = "control"
COST_QUADRATIC = "quadratic"
COST_CONGESTION = "congestion"


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if not np.allclose(cov, cov.T):
            raise ConfigError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("covariance must be positive definite") from exc
        object.__setattr__(self, "_chol", chol)

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    @property
    def chol(self) -> np.ndarray:
        return self._chol

    def sample(self, n: int, seed: int, stream: int = rng.STREAM_INIT,
               tag: int = 0) -> np.ndarray:
        z = rng.standard_normals(seed, stream, (n, self.d), tag=tag)
        return self.mean + z @ self.chol.T

    def density(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x - self.mean
        sol = np.linalg.solve(self.cov, diff.T).T
        quad = np.sum(diff * sol, axis=1)
        norm = (2.0 * np.pi) ** (-self.d / 2) / np.sqrt(np.linalg.det(self.cov))
        return norm * np.exp(-0.5 * quad)

    def representative_points(self, n: int, seed: int = 0) -> np.ndarray:
        """A deterministic n-point summary of the distribution.

        In one dimension these are the mid-quantiles, the best n-point
        approximation in transport distance; in higher dimensions a
        low-discrepancy quasi-Monte Carlo sample.
        """
        if self.d == 1:
            q = scipy.stats.norm.ppf((np.arange(n) + 0.5) / n)
            return self.mean + q[:, None] * np.sqrt(self.cov[0, 0])
        base = scipy.stats.qmc.Sobol(self.d, seed=seed, scramble=True)
        # draw a full power-of-two block, which Sobol points balance over
        u = base.random(1 << int(np.ceil(np.log2(max(n, 2)))))[:n]
        # keep strictly inside (0, 1) so the inverse CDF stays finite
        u = np.clip(u, 1e-12, 1.0 - 1e-12)
        z = scipy.stats.norm.ppf(u)
        return self.mean + z @ self.chol.T


def _as_matrix(v, d: int) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim == 0:
        return float(a) * np.eye(d)
    return np.atleast_2d(a)


@dataclass(frozen=True)
class ProblemSpec:
    """One mean-field steering problem instance. Immutable and pure."""

    name: str
    d: int
    k: int
    T: float
    drift_kind: str
    cost_kind: str
    sigma: float
    rho0: Gaussian
    rhoT: Gaussian
    A: np.ndarray | None = None
    Abar: np.ndarray | None = None
    B: np.ndarray | None = None
    R: np.ndarray | None = None
    gamma: int = 0
    c: float = 1.0
    local: bool = True
    kernel_eps: float = 0.2
    extra_cost: object = field(default=None, compare=False)  # optional l(x, m)

    def __post_init__(self):
        if self.drift_kind == DRIFT_LQ:
            object.__setattr__(self, "A", _as_matrix(self.A, self.d))
            object.__setattr__(self, "Abar",
                               _as_matrix(self.Abar if self.Abar is not None
                                          else 0.0, self.d))
            object.__setattr__(self, "B", _as_matrix(self.B, self.d))
        elif self.drift_kind != DRIFT_CONTROL:
            raise ConfigError(f"unknown drift kind {self.drift_kind!r}")
        R = _as_matrix(self.R, self.k)
        if not np.allclose(R, R.T):
            raise ConfigError("R must be symmetric")
        if np.any(np.linalg.eigvalsh(R) <= 0):
            raise ConfigError("R must be positive definite")
        object.__setattr__(self, "R", R)
        if self.cost_kind == COST_CONGESTION:
            if self.c <= 0:
                raise ConfigError("congestion constant c must be positive")
            if self.gamma not in (0, 1):
                raise ConfigError("congestion exponent gamma must be 0 or 1")
        elif self.cost_kind != COST_QUADRATIC:
            raise ConfigError(f"unknown cost kind {self.cost_kind!r}")
        if self.rho0.d != self.d or self.rhoT.d != self.d:
            raise ConfigError("endpoint distributions must match dimension d")
        try:
            object.__setattr__(self, "_Rinv", np.linalg.inv(R))
        except np.linalg.LinAlgError as exc:
            raise ConfigError("R is singular") from exc

    @property
    def nu(self) -> float:
        return 0.5 * self.sigma ** 2

    @property
    def Rinv(self) -> np.ndarray:
        return self._Rinv

    # scalar shortcuts used by the PDE solvers (all shipped specs have
    # scalar multiples of the identity for A, B, R)
    def scalars(self) -> tuple[float, float, float]:
        def only_scalar(M, name):
            if M is None:
                return 0.0
            s = M[0, 0]
            if not np.allclose(M, s * np.eye(M.shape[0])):
                raise ContractError(f"{name} must be a scalar multiple of I here")
            return float(s)

        a = only_scalar(self.A, "A") if self.drift_kind == DRIFT_LQ else 0.0
        b = only_scalar(self.B, "B") if self.drift_kind == DRIFT_LQ else 1.0
        r = only_scalar(self.R, "R")
        return a, b, r

    # dynamics / cost -------------------------------------------------------
    def drift(self, x: np.ndarray, mu_bar: np.ndarray, v: np.ndarray) -> np.ndarray:
        if self.drift_kind == DRIFT_CONTROL:
            return v
        return x @ self.A.T + mu_bar @ self.Abar.T + v @ self.B.T

    def ell(self, density_value):
        """Congestion multiplier ell = c + density (any array-like density)."""
        return self.c + density_value

    def running_cost(self, x: np.ndarray, density_value, v: np.ndarray) -> np.ndarray:
        if self.cost_kind == COST_QUADRATIC:
            cost = np.einsum("...i,ij,...j->...", v, self.R, v)
        else:
            ell = self.ell(density_value)
            cost = self.R[0, 0] * ell ** self.gamma * np.sum(v * v, axis=-1)
        if self.extra_cost is not None:
            cost = cost + self.extra_cost(x, density_value)
        return cost


class Hamiltonian:
    """H(x, m, p) = max_v -(f + <b, p>), plus its derivatives and maximizer."""

    def __init__(self, spec: ProblemSpec):
        self.spec = spec
        if spec.cost_kind == COST_QUADRATIC:
            # quarter of B R^-1 B^T
            self._BRB = 0.25 * spec.B @ spec.Rinv @ spec.B.T \
                if spec.drift_kind == DRIFT_LQ else 0.25 * spec.Rinv

    def _ell_gamma(self, m_val):
        spec = self.spec
        ell = spec.ell(m_val)
        if np.any(np.asarray(ell) <= 0):
            raise NumericalError("congestion multiplier ell must be positive")
        return ell ** spec.gamma

    def value(self, x, m_val, p) -> np.ndarray:
        spec = self.spec
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        if spec.cost_kind == COST_QUADRATIC:
            h = np.einsum("...i,ij,...j->...", p, self._BRB, p)
            if spec.drift_kind == DRIFT_LQ:
                h = h - np.sum((x @ spec.A.T) * p, axis=-1)
            return h
        denom = 4.0 * spec.R[0, 0] * self._ell_gamma(m_val)
        return np.sum(p * p, axis=-1) / denom

    def grad_p(self, x, m_val, p) -> np.ndarray:
        spec = self.spec
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        if spec.cost_kind == COST_QUADRATIC:
            g = p @ (2.0 * self._BRB).T
            if spec.drift_kind == DRIFT_LQ:
                g = g - x @ spec.A.T
            return g
        denom = 2.0 * spec.R[0, 0] * self._ell_gamma(m_val)
        return p / np.reshape(denom, np.shape(denom) + (1,) * (p.ndim - np.ndim(denom)))

    def dm(self, x, m_val, p) -> np.ndarray:
        """Ordinary partial derivative of H in its (local) density slot."""
        spec = self.spec
        if not spec.local:
            raise ContractError("dH/dm is defined for local interaction models only")
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        if spec.cost_kind == COST_QUADRATIC or spec.gamma == 0:
            return np.zeros(p.shape[:-1])
        ell = spec.ell(m_val)
        return -np.sum(p * p, axis=-1) / (4.0 * spec.R[0, 0] * ell ** 2)

    def optimal_control(self, x, m_val, p) -> np.ndarray:
        spec = self.spec
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        if spec.cost_kind == COST_QUADRATIC:
            B = spec.B if spec.drift_kind == DRIFT_LQ else np.eye(spec.k)
            return -0.5 * p @ (spec.Rinv @ B.T).T
        denom = 2.0 * spec.R[0, 0] * self._ell_gamma(m_val)
        return -p / np.reshape(denom, np.shape(denom) + (1,) * (p.ndim - np.ndim(denom)))

    def lagrangian(self, x, m_val, v, p) -> np.ndarray:
        spec = self.spec
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        mu_bar = np.zeros(spec.d)
        b = spec.drift(x, mu_bar, v)
        dens = m_val if spec.cost_kind == COST_CONGESTION else 0.0
        return spec.running_cost(x, dens, v) + np.sum(b * p, axis=-1)


def hamiltonian(spec: ProblemSpec, x, m_val, p) -> np.ndarray:
    return Hamiltonian(spec).value(x, m_val, p)


def optimal_control(spec: ProblemSpec, x, m_val, p) -> np.ndarray:
    return Hamiltonian(spec).optimal_control(x, m_val, p)


def dH_dm(spec: ProblemSpec, x, m_val, p) -> np.ndarray:
    return Hamiltonian(spec).dm(x, m_val, p)


def kernel_density_term(points: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Gaussian-kernel smoothed empirical density at query points x.

    points: (N, d) particle positions; x: (B, d) queries; returns (B,).
    """
    if eps <= 0:
        raise ConfigError("kernel bandwidth must be positive")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = points.shape[1]
    diff = x[:, None, :] - points[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    norm = (2.0 * np.pi * eps ** 2) ** (-d / 2)
    return norm * np.mean(np.exp(-0.5 * sq / eps ** 2), axis=1)


# ---------------------------------------------------------------------------
# shipped test cases
# ---------------------------------------------------------------------------

def lq_test_1() -> ProblemSpec:
    return ProblemSpec(name="lq-test-1", d=1, k=1, T=1.0, drift_kind=DRIFT_LQ,
                       cost_kind=COST_QUADRATIC, sigma=1.0,
                       rho0=Gaussian([0.0], [[1.0]]),
                       rhoT=Gaussian([2.0], [[0.5]]),
                       A=1.0, B=1.0, R=0.5)


def lq_test_2() -> ProblemSpec:
    return ProblemSpec(name="lq-test-2", d=2, k=2, T=1.0, drift_kind=DRIFT_LQ,
                       cost_kind=COST_QUADRATIC, sigma=1.0,
                       rho0=Gaussian([0.0, 0.0], np.eye(2)),
                       rhoT=Gaussian([2.0, 2.0], 0.5 * np.eye(2)),
                       A=np.eye(2), B=np.eye(2), R=0.5 * np.eye(2))


def congestion_case(case: int, local: bool = False) -> ProblemSpec:
    if case == 1:
        d, gamma, c, sigma = 1, 0, 0.1, 0.1
        s0, sT = 0.04, 0.04
    elif case == 2:
        d, gamma, c, sigma = 1, 1, 0.1, 0.1
        s0, sT = 0.04, 0.04
    elif case == 3:
        d, gamma, c, sigma = 5, 1, 1.0, 1.0
        s0, sT = 0.1, 0.1
    else:
        raise ConfigError(f"unknown congestion case {case}")
    return ProblemSpec(name=f"congestion-{case}", d=d, k=d, T=1.0,
                       drift_kind=DRIFT_CONTROL, cost_kind=COST_CONGESTION,
                       sigma=sigma,
                       rho0=Gaussian(np.zeros(d), s0 * np.eye(d)),
                       rhoT=Gaussian(np.full(d, 2.0), sT * np.eye(d)),
                       R=0.5, gamma=gamma, c=c, local=local)


PROBLEMS = {
    "lq-test-1": lq_test_1,
    "lq-test-2": lq_test_2,
    "congestion-1": lambda: congestion_case(1),
    "congestion-2": lambda: congestion_case(2),
    "congestion-3": lambda: congestion_case(3),
}


def get_problem(name: str) -> ProblemSpec:
    if name not in PROBLEMS:
        raise ConfigError(f"unknown problem id {name!r}")
    return PROBLEMS[name]()
