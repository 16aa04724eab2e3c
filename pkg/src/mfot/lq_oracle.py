"""Closed-form/ODE ground truth for linear-quadratic steering problems.

Solves the Gaussian-to-Gaussian steering problem: Riccati march for the
feedback gain, explicit affine offset from transition matrices and
controllability Gramians, then mean and second-moment ODEs. The optimal
control is affine: v*(t, x) = -B^T Pi_t x + B^T n_t (in the normalized units
where the running cost is |a|^2 / 2; general quadratic costs are rescaled).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError, NumericalError
from .problems import COST_QUADRATIC, DRIFT_LQ, ProblemSpec


def _sym_sqrt(S: np.ndarray, label: str) -> np.ndarray:
    asym = np.max(np.abs(S - S.T))
    if asym > 1e-8:
        raise NumericalError(f"{label}: square-root argument asymmetric ({asym:.2e})")
    S = 0.5 * (S + S.T)
    w, q = np.linalg.eigh(S)
    if np.any(w < -1e-12):
        raise NumericalError(f"{label}: square-root argument not PSD")
    return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T


def transition_and_gramian(A: np.ndarray, B: np.ndarray, s: float, t: float,
                           panels: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """State transition matrix Phi(t, s) and controllability Gramian M(t, s).

    Uses the closed form when B B^T commutes with A + A^T and the latter is
    nonsingular, otherwise composite Simpson quadrature.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if t < s:
        raise ConfigError("need s <= t")
    phi = expm((t - s) * A)
    BBt = B @ B.T
    C = A + A.T
    commutes = np.allclose(BBt @ C, C @ BBt, atol=1e-12)
    nonsingular = np.linalg.matrix_rank(C) == C.shape[0] and \
        np.min(np.abs(np.linalg.eigvals(C))) > 1e-10
    if commutes and nonsingular:
        gram = BBt @ (expm((t - s) * C) - np.eye(C.shape[0])) @ np.linalg.inv(C)
    else:
        n = panels if panels % 2 == 0 else panels + 1
        taus = np.linspace(s, t, n + 1)
        vals = np.array([expm((t - tau) * A) @ BBt @ expm((t - tau) * A).T
                         for tau in taus])
        w = np.ones(n + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        gram = ((t - s) / (3 * n)) * np.einsum("k,kij->ij", w, vals)
    return phi, 0.5 * (gram + gram.T)


@dataclass
class LQSolution:
    """Ground-truth paths on a uniform time grid (all arrays time-major)."""

    t: np.ndarray           # (n,)
    Pi: np.ndarray          # (n, d, d)
    n: np.ndarray           # (n, d)
    z: np.ndarray           # (n, d)
    mu: np.ndarray          # (n, d)
    Sigma: np.ndarray       # (n, d, d)
    V: np.ndarray           # (n, d, d)
    B_tilde: np.ndarray     # (d, d) normalized control matrix
    scale_back: np.ndarray  # (k, d) maps normalized control to original units
    spec: ProblemSpec

    def _interp_index(self, tq: float) -> tuple[int, float]:
        tq = float(np.clip(tq, self.t[0], self.t[-1]))
        frac = (tq - self.t[0]) / (self.t[-1] - self.t[0]) * (len(self.t) - 1)
        i = min(int(frac), len(self.t) - 2)
        return i, frac - i

    def Pi_at(self, tq: float) -> np.ndarray:
        i, w = self._interp_index(tq)
        return (1 - w) * self.Pi[i] + w * self.Pi[i + 1]

    def n_at(self, tq: float) -> np.ndarray:
        i, w = self._interp_index(tq)
        return (1 - w) * self.n[i] + w * self.n[i + 1]

    def mu_at(self, tq: float) -> np.ndarray:
        i, w = self._interp_index(tq)
        return (1 - w) * self.mu[i] + w * self.mu[i + 1]

    def Sigma_at(self, tq: float) -> np.ndarray:
        i, w = self._interp_index(tq)
        return (1 - w) * self.Sigma[i] + w * self.Sigma[i + 1]

    def control(self, tq: float, x: np.ndarray) -> np.ndarray:
        """Optimal control in the problem's original units, x of shape (B, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        pi, nt = self.Pi_at(tq), self.n_at(tq)
        a_norm = -x @ (self.B_tilde.T @ pi).T + self.B_tilde.T @ nt
        return a_norm @ self.scale_back.T

    def export_csv(self, path: str) -> None:
        d = self.spec.d
        header = ["t"] + [f"mu_{i}" for i in range(d)] \
            + [f"Sigma_{i}{j}" for i in range(d) for j in range(d)] \
            + [f"Pi_{i}{j}" for i in range(d) for j in range(d)] \
            + [f"n_{i}" for i in range(d)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self.t)):
                w.writerow([f"{self.t[k]:.12g}"]
                           + [f"{v:.12g}" for v in self.mu[k]]
                           + [f"{v:.12g}" for v in self.Sigma[k].ravel()]
                           + [f"{v:.12g}" for v in self.Pi[k].ravel()]
                           + [f"{v:.12g}" for v in self.n[k]])


def _normalize(spec: ProblemSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (A, B_tilde, scale_back) in the |a|^2/2 cost normalization."""
    if spec.cost_kind != COST_QUADRATIC or spec.drift_kind != DRIFT_LQ:
        raise ConfigError("oracle applies to linear-quadratic problems only")
    root_2R = _sym_sqrt(2.0 * spec.R, "2R")
    inv_root = np.linalg.inv(root_2R)
    B_tilde = spec.B @ inv_root
    sigma_mat = spec.sigma * np.eye(spec.d)
    if not np.allclose(sigma_mat, B_tilde, atol=1e-10):
        raise ConfigError("oracle requires sigma = B in normalized units")
    return spec.A, B_tilde, inv_root


def riccati_march(spec: ProblemSpec, n_grid: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """RK4 march of the Riccati ODE from the steering initial condition.

    Returns (time grid, Pi path), both with n_grid + 1 nodes.
    """
    A, B, _ = _normalize(spec)
    d, T = spec.d, spec.T
    S0 = spec.rho0.cov
    ST = spec.rhoT.cov
    phi, gram = transition_and_gramian(A, B, 0.0, T)
    gram_inv = np.linalg.inv(gram)
    S0_half = _sym_sqrt(S0, "Sigma0")
    S0_ihalf = np.linalg.inv(S0_half)
    inner = S0_half @ phi.T @ gram_inv @ phi @ S0_half
    arg = np.eye(d) / 4.0 + S0_half @ phi.T @ gram_inv @ ST @ gram_inv @ phi @ S0_half
    Pi0 = S0_ihalf @ (np.eye(d) / 2.0 + inner - _sym_sqrt(arg, "Riccati init")) @ S0_ihalf
    Pi0 = 0.5 * (Pi0 + Pi0.T)

    BBt = B @ B.T

    def rhs(P):
        return -A.T @ P - P @ A + P @ BBt @ P

    dt = T / n_grid
    Pi = np.empty((n_grid + 1, d, d))
    Pi[0] = Pi0
    for i in range(n_grid):
        P = Pi[i]
        k1 = rhs(P)
        k2 = rhs(P + 0.5 * dt * k1)
        k3 = rhs(P + 0.5 * dt * k2)
        k4 = rhs(P + dt * k3)
        nxt = P + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        Pi[i + 1] = 0.5 * (nxt + nxt.T)
    return np.linspace(0.0, T, n_grid + 1), Pi


def n_and_z(spec: ProblemSpec, t_grid: np.ndarray,
            Pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Affine control offset n_t and auxiliary z_t on the Pi grid."""
    A, B, _ = _normalize(spec)
    Abar = spec.Abar if spec.Abar is not None else np.zeros_like(A)
    Ab = A + Abar
    T = spec.T
    phib_T0, gramb_T0 = transition_and_gramian(Ab, B, 0.0, T)
    try:
        gramb_inv = np.linalg.inv(gramb_T0)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("controllability Gramian is singular") from exc

    x0, xT = spec.rho0.mean, spec.rhoT.mean
    steer = xT - phib_T0 @ x0

    # The mean problem decouples: min int |u|^2/2 over mu' = (A+Abar)mu + Bu
    # steering x0 -> xT has the Gramian solution u(t) = B^T z_t, and the mean
    # path is mu_t = Phib(t,0) x0 + Mb(t,0) Phib(T,t)^T Mb(T,0)^-1 steer.
    # Matching -B^T Pi x + B^T n to this along the mean gives
    # n_t = Pi_t mu_t + z_t.
    n = np.empty((len(t_grid), spec.d))
    z = np.empty((len(t_grid), spec.d))
    for i, t in enumerate(t_grid):
        phib_t0, gramb_t0 = transition_and_gramian(Ab, B, 0.0, t)
        phib_Tt = expm((T - t) * Ab)
        z[i] = phib_Tt.T @ gramb_inv @ steer
        mu_free = phib_t0 @ x0 + gramb_t0 @ phib_Tt.T @ gramb_inv @ steer
        n[i] = Pi[i] @ mu_free + z[i]
    return n, z


def mean_and_variance(spec: ProblemSpec, t_grid: np.ndarray, Pi: np.ndarray,
                      n: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """RK4 march of the mean and second-moment ODEs on the given grid."""
    A, B, _ = _normalize(spec)
    Abar = spec.Abar if spec.Abar is not None else np.zeros_like(A)
    BBt = B @ B.T
    n_nodes = len(t_grid)
    dt = t_grid[1] - t_grid[0]

    def interp(path, tq):
        frac = (tq - t_grid[0]) / (t_grid[-1] - t_grid[0]) * (n_nodes - 1)
        i = min(int(frac), n_nodes - 2)
        w = frac - i
        return (1 - w) * path[i] + w * path[i + 1]

    def mu_rhs(t, mu):
        return (A + Abar - BBt @ interp(Pi, t)) @ mu + BBt @ interp(n, t)

    def v_rhs(t, V, mu):
        P = interp(Pi, t)
        nt = interp(n, t)
        out = (V @ (A.T - P.T @ BBt) + (A - BBt @ P) @ V
               + np.outer(mu, nt) @ BBt + BBt @ np.outer(nt, mu)
               + np.outer(mu, mu) @ Abar.T + Abar @ np.outer(mu, mu) + BBt)
        return out

    mu = np.empty((n_nodes, spec.d))
    V = np.empty((n_nodes, spec.d, spec.d))
    Sigma = np.empty_like(V)
    mu[0] = spec.rho0.mean
    V[0] = spec.rho0.cov + np.outer(mu[0], mu[0])
    Sigma[0] = spec.rho0.cov
    for i in range(n_nodes - 1):
        t = t_grid[i]
        m, Vc = mu[i], V[i]
        k1m = mu_rhs(t, m)
        k1v = v_rhs(t, Vc, m)
        k2m = mu_rhs(t + dt / 2, m + dt / 2 * k1m)
        k2v = v_rhs(t + dt / 2, Vc + dt / 2 * k1v, m + dt / 2 * k1m)
        k3m = mu_rhs(t + dt / 2, m + dt / 2 * k2m)
        k3v = v_rhs(t + dt / 2, Vc + dt / 2 * k2v, m + dt / 2 * k2m)
        k4m = mu_rhs(t + dt, m + dt * k3m)
        k4v = v_rhs(t + dt, Vc + dt * k3v, m + dt * k3m)
        mu[i + 1] = m + dt / 6 * (k1m + 2 * k2m + 2 * k3m + k4m)
        V[i + 1] = Vc + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        S = V[i + 1] - np.outer(mu[i + 1], mu[i + 1])
        S = 0.5 * (S + S.T)
        if np.any(np.linalg.eigvalsh(S) <= 0):
            raise NumericalError("covariance lost positive definiteness")
        Sigma[i + 1] = S
    return mu, Sigma, V


def solve_lq(spec: ProblemSpec, n_grid: int = 1000) -> LQSolution:
    """Full ground-truth solution for one linear-quadratic problem."""
    _, B_tilde, inv_root = _normalize(spec)
    t_grid, Pi = riccati_march(spec, n_grid)
    n, z = n_and_z(spec, t_grid, Pi)
    mu, Sigma, V = mean_and_variance(spec, t_grid, Pi, n)
    return LQSolution(t=t_grid, Pi=Pi, n=n, z=z, mu=mu, Sigma=Sigma, V=V,
                      B_tilde=B_tilde, scale_back=inv_root, spec=spec)


def analytic_cost(sol: LQSolution) -> float:
    """Expected running cost of the oracle control, by quadrature of moments.

    In normalized units the running cost is |a|^2 / 2 with
    a = -B~^T Pi x + B~^T n, x ~ N(mu_t, Sigma_t); original units give the
    same number because the rescaling preserves f.
    """
    Bt = sol.B_tilde
    vals = np.empty(len(sol.t))
    for i in range(len(sol.t)):
        K = Bt.T @ sol.Pi[i]
        b = Bt.T @ sol.n[i]
        mu, Sig = sol.mu[i], sol.Sigma[i]
        mean_term = K @ mu - b
        vals[i] = 0.5 * (np.trace(K @ Sig @ K.T) + mean_term @ mean_term)
    return float(np.trapezoid(vals, sol.t))
