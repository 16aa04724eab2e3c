"""End-to-end acceptance checks for the whole solver suite.

One test per acceptance criterion, run in order. Each test records a single
PASS/FAIL line (echoed in the terminal summary) before asserting, so a failed
run still reports every criterion it reached. Training fixtures are
session-scoped: each method trains once on each benchmark and every check
that needs that run shares it.
"""

import time

import numpy as np
import pytest

from mfot import autodiff, lq_oracle, metrics, problems, rng, simulate
from mfot.admm import AdmmConfig, AdmmState, K_FAMILIES, k_value
from mfot.dgm import (DgmConfig, DgmTrainer, default_domain, hjb_residual,
                      kfp_residual)
from mfot.direct import DirectConfig, DirectTrainer
from mfot.nets import NeuralField
from mfot.problems import Hamiltonian
from mfot.simulate import SimulationConfig
from mfot.sinkhorn import (TransportProblem, exact_w2_1d, sinkhorn,
                           w2_estimate)

import test_admm
import test_dgm
import test_lq_oracle

CRITERION_LINES: list[str] = []

# published benchmark totals the Monte Carlo estimates are checked against
PUBLISHED_COST_1D = 2.126
PUBLISHED_COST_2D = 4.175
EVAL = SimulationConfig(10_000, 100, seed=0)

DIRECT_BUDGET_SECONDS = 30 * 60

M1_LQ1 = DirectConfig(seed=0, iterations=900)
M2_LQ1 = DgmConfig(seed=0, iterations=1200,
                   batch_interior=250, batch_boundary=250)
M3_LQ1 = AdmmConfig(seed=0, outer_iterations=25, inner_u=80, inner_lambda=80,
                    batch=256, u_hidden=(40, 40, 40))

M1_LQ2 = DirectConfig(seed=0, iterations=900)
M2_LQ2 = DgmConfig(seed=0, iterations=1200,
                   batch_interior=250, batch_boundary=250)
M3_LQ2 = AdmmConfig(seed=0, outer_iterations=25, inner_u=80, inner_lambda=80,
                    batch=256, u_hidden=(40, 40, 40))

M1_CONGESTION = DirectConfig(seed=0, iterations=400, hidden=(40, 40, 40))


def _record(num: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {num}: {'PASS' if ok else 'FAIL'} - {detail}"
    CRITERION_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared training runs


@pytest.fixture(scope="session")
def direct_lq1(lq1):
    trainer = DirectTrainer(lq1, M1_LQ1)
    start = time.monotonic()
    trainer.train()
    return trainer, time.monotonic() - start


@pytest.fixture(scope="session")
def galerkin_lq1(lq1):
    trainer = DgmTrainer(lq1, M2_LQ1)
    trainer.train()
    return trainer


@pytest.fixture(scope="session")
def dual_lq1(lq1):
    state = AdmmState(lq1, M3_LQ1)
    state.run()
    return state


def _evaluate_lq(spec, control, density_fn=None):
    oracle = lq_oracle.solve_lq(spec)
    reference = lq_oracle.analytic_cost(oracle)
    gap_fn = None
    if density_fn is not None:
        terminal = problems.Gaussian(oracle.mu_at(spec.T),
                                     oracle.Sigma_at(spec.T))
        gap_fn = lambda x: (np.asarray(density_fn(x))
                            - terminal.density(x) + spec.rhoT.density(x))
    return metrics.evaluate(spec, control, EVAL, oracle=oracle,
                            reference_cost=reference, density_fn=gap_fn,
                            domain=default_domain(spec))


# ---------------------------------------------------------------------------
# criteria 1 and 2: the closed-form benchmark itself


def test_criterion_1_oracle_monte_carlo_cost(lq1, lq2, lq1_solution,
                                             lq2_solution):
    rels = []
    for spec, sol, target in ((lq1, lq1_solution, PUBLISHED_COST_1D),
                              (lq2, lq2_solution, PUBLISHED_COST_2D)):
        cost = metrics.total_cost(spec, sol.control, EVAL)
        rels.append(abs(cost - target) / target)
    _record(1, all(r <= 0.02 for r in rels),
            f"benchmark cost vs published totals: 1-D rel {rels[0]:.4f}, "
            f"2-D rel {rels[1]:.4f} (tolerance 0.02)")


def test_criterion_2_oracle_terminal_moments(lq1, lq1_solution):
    ensemble = simulate.rollout(lq1, lq1_solution.control, EVAL,
                                init_stream=rng.STREAM_EVAL)
    terminal = ensemble.states[-1][:, 0]
    n = len(terminal)
    target_mean, target_var = 2.0, 0.5
    mean_band = 3.0 * np.sqrt(target_var / n)
    var_band = 3.0 * target_var * np.sqrt(2.0 / (n - 1))
    mean_gap = abs(terminal.mean() - target_mean)
    var_gap = abs(terminal.var(ddof=1) - target_var)
    _record(2, mean_gap <= mean_band and var_gap <= var_band,
            f"terminal mean gap {mean_gap:.4f} (band {mean_band:.4f}), "
            f"variance gap {var_gap:.4f} (band {var_band:.4f})")


# ---------------------------------------------------------------------------
# criteria 3-5: each method on the 1-D benchmark


def test_criterion_3_direct_method_1d(lq1, direct_lq1):
    trainer, elapsed = direct_lq1
    report = _evaluate_lq(lq1, trainer.control)
    ok = (report.relative_error <= 0.05 and report.w2_terminal <= 0.05
          and report.control_l2 <= 0.1 and elapsed <= DIRECT_BUDGET_SECONDS)
    _record(3, ok,
            f"particle method: rel {report.relative_error:.4f} (<=0.05), "
            f"W2 {report.w2_terminal:.4f} (<=0.05), "
            f"control L2 {report.control_l2:.4f} (<=0.1), "
            f"wall {elapsed:.0f}s (<= {DIRECT_BUDGET_SECONDS}s)")


def test_criterion_4_galerkin_method_1d(lq1, galerkin_lq1):
    trainer = galerkin_lq1
    report = _evaluate_lq(lq1, trainer.control,
                          density_fn=lambda x: trainer.density(lq1.T, x))
    ok = (report.relative_error <= 0.05
          and report.l2_density_terminal <= 1e-3)
    _record(4, ok,
            f"residual method: rel {report.relative_error:.4f} (<=0.05), "
            f"terminal density L2 {report.l2_density_terminal:.2e} (<=1e-3)")


def test_criterion_5_dual_method_1d(lq1, dual_lq1):
    state = dual_lq1
    report = _evaluate_lq(lq1, state.control)
    ok = report.relative_error <= 0.05 and report.w2_terminal <= 0.06
    _record(5, ok,
            f"dual method: rel {report.relative_error:.4f} (<=0.05), "
            f"W2 {report.w2_terminal:.4f} (<=0.06)")


# ---------------------------------------------------------------------------
# criterion 6: all three methods on the 2-D benchmark


def test_criterion_6_all_methods_2d(lq2):
    # soft targets are twice the published per-method relative errors;
    # the hard cap is 8%
    soft = {"particle": 2 * 0.0139, "residual": 2 * 0.0563,
            "dual": 2 * 0.0289}
    results = {}
    trainer = DirectTrainer(lq2, M1_LQ2)
    trainer.train()
    results["particle"] = _evaluate_lq(lq2, trainer.control).relative_error
    galerkin = DgmTrainer(lq2, M2_LQ2)
    galerkin.train()
    results["residual"] = _evaluate_lq(lq2, galerkin.control).relative_error
    dual = AdmmState(lq2, M3_LQ2)
    dual.run()
    results["dual"] = _evaluate_lq(lq2, dual.control).relative_error
    hard_ok = all(rel <= 0.08 for rel in results.values())
    notes = ", ".join(
        f"{name} rel {rel:.4f}"
        + ("" if rel <= soft[name] else f" (above soft {soft[name]:.4f})")
        for name, rel in results.items())
    _record(6, hard_ok, f"2-D benchmark, hard cap 0.08: {notes}")


# ---------------------------------------------------------------------------
# criterion 7: congestion changes the mid-horizon spread


def test_criterion_7_congestion_widens_midpoint():
    variances, w2s = {}, {}
    for case in (1, 2):
        spec = problems.congestion_case(case)
        trainer = DirectTrainer(spec, M1_CONGESTION)
        trainer.train()
        cfg = SimulationConfig(2000, 100, seed=0)
        ensemble = simulate.rollout(spec, trainer.control, cfg,
                                    init_stream=rng.STREAM_EVAL)
        midpoint = ensemble.states[cfg.n_steps // 2][:, 0]
        variances[case] = float(midpoint.var(ddof=1))
        w2s[case] = metrics.w2_terminal(spec, trainer.control, cfg,
                                        ensemble=ensemble)
    ok = (variances[2] > variances[1]
          and w2s[1] <= 0.1 and w2s[2] <= 0.1)
    _record(7, ok,
            f"mid-horizon variance without/with crowd cost "
            f"{variances[1]:.4f} / {variances[2]:.4f} (must increase); "
            f"terminal W2 {w2s[1]:.4f}, {w2s[2]:.4f} (<=0.1)")


# ---------------------------------------------------------------------------
# criterion 8: the property battery, one compact check per clause


def _check_gradients_match_fd():
    net = NeuralField(2, 1, hidden=(8, 8), seed=3)
    t = np.array([0.3, 0.7])
    x = np.array([[0.5, -1.0], [1.5, 0.2]])
    tape = autodiff.Tape()
    params = net.bind(tape)
    loss = autodiff.vsum(autodiff.square(net.value(tape, t, x, params)))
    grad = tape.grad_params(loss)

    def scalar(theta):
        saved = net.theta
        net.theta = theta
        out = float(np.sum(net.eval(t, x) ** 2))
        net.theta = saved
        return out

    theta = net.theta
    idx = np.linspace(0, theta.size - 1, 15).astype(int)
    worst = 0.0
    for i in idx:
        h = 1e-6
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        fd = (scalar(up) - scalar(down)) / (2 * h)
        worst = max(worst, abs(fd - grad[i]))
    return worst < 1e-5, f"gradient vs finite differences {worst:.2e}"


def _check_sinkhorn():
    gen = np.random.default_rng(11)
    x = gen.normal(size=(60, 1))
    y = gen.normal(size=(60, 1)) + 0.5
    plan = sinkhorn(TransportProblem(x, y, alpha=0.1))
    marginal_ok = plan.violation <= 1e-8
    approx = w2_estimate(x, y, alpha=1e-3, strict=False)
    exact = exact_w2_1d(x, y)
    agree = abs(approx - exact) / exact
    return (marginal_ok and agree <= 0.01,
            f"marginal violation {plan.violation:.1e}, "
            f"1-D agreement {agree:.4f}")


def _check_hamiltonian_argmax():
    spec = problems.congestion_case(2, local=True)
    ham = Hamiltonian(spec)
    gen = np.random.default_rng(4)
    x = gen.normal(size=(6, spec.d))
    p = gen.normal(size=(6, spec.d)) * 2.0
    m_val = np.abs(gen.normal(size=6)) + 0.1
    h = ham.value(x, m_val, p)
    v_star = ham.optimal_control(x, m_val, p)
    gap = np.max(np.abs(h + ham.lagrangian(x, m_val, v_star, p)))
    dominated = all(
        np.all(h >= -ham.lagrangian(
            x, m_val, v_star + gen.normal(size=v_star.shape), p) - 1e-10)
        for _ in range(40))
    return (gap < 1e-10 and dominated,
            f"maximizer gap {gap:.1e}, dominates 40 perturbations")


def _check_conjugate_closed_forms():
    gen = np.random.default_rng(9)
    m_grid = np.concatenate([[0.0], np.geomspace(1e-10, 40.0, 400_000)])
    worst = 0.0
    for family in K_FAMILIES:
        for _ in range(40):
            b = gen.normal(size=2)
            a = gen.normal() * 2.0
            if family == "max-entropy":
                a = abs(a) + 0.5 * float(np.sum(b * b))
            closed = k_value(family, a, b)
            if not closed.finite:
                continue
            ref = test_admm.brute_force_k(family, a, b, m_grid)
            worst = max(worst, abs(closed.value - ref))
    return worst < 1e-5, f"conjugate closed forms vs grid {worst:.2e}"


def _check_riccati(lq1):
    t, Pi = lq_oracle.riccati_march(lq1, n_grid=4000)
    res = test_lq_oracle.riccati_residual(lq1, t, Pi)
    _, ref = lq_oracle.riccati_march(lq1, n_grid=4096)
    errs = []
    for n in (32, 64):
        _, coarse = lq_oracle.riccati_march(lq1, n_grid=n)
        errs.append(np.max(np.abs(coarse - ref[::4096 // n])))
    order = np.log2(errs[0] / errs[1])
    return (res < 1e-6 and order >= 3.5,
            f"Riccati residual {res:.1e}, observed order {order:.2f}")


def _check_analytic_fields_annihilate(lq1):
    sol = lq_oracle.solve_lq(lq1, n_grid=20_000)
    u = test_dgm.AnalyticValueField(sol)
    m = test_dgm.AnalyticDensityField(sol)
    worst = 0.0
    for t in (0.15, 0.5, 0.85):
        x = np.linspace(-1.5, 3.5, 25)[:, None]
        worst = max(worst, np.max(np.abs(kfp_residual(lq1, m, u, t, x))),
                    np.max(np.abs(hjb_residual(lq1, m, u, t, x))))
    return worst < 1e-3, f"analytic fields leave residual {worst:.1e}"


def _check_operator_linearity(lq1):
    state = AdmmState(lq1, AdmmConfig(u_hidden=(5, 5), lambda_hidden=(5, 5)))
    f1 = test_admm.QuadraticField(0.7, -0.3)
    f2 = test_admm.QuadraticField(-1.1, 0.9)
    both = test_admm.QuadraticField(-0.4, 0.6)
    t = np.full(4, 0.35)
    x = np.linspace(-1, 2, 4)[:, None]
    additivity = np.max(np.abs(state.lam_op(t, x, field=both)
                               - state.lam_op(t, x, field=f1)
                               - state.lam_op(t, x, field=f2)))
    scaling = np.max(np.abs(
        2.0 * state.lam_op(t, x, field=f1)
        - state.lam_op(t, x, field=test_admm.QuadraticField(1.4, -0.6))))
    gap = max(additivity, scaling)
    return gap < 1e-10, f"operator linearity gap {gap:.1e}"


def _check_replay_determinism(lq1):
    cfg = SimulationConfig(200, 25, seed=17)
    control = lambda t, x: -0.5 * x
    a = simulate.rollout(lq1, control, cfg)
    b = simulate.rollout(lq1, control, cfg)
    identical = all(np.array_equal(s, r) for s, r in zip(a.states, b.states))
    return identical, "replayed paths bitwise identical"


def test_criterion_8_property_battery(lq1):
    checks = [
        _check_gradients_match_fd(),
        _check_sinkhorn(),
        _check_hamiltonian_argmax(),
        _check_conjugate_closed_forms(),
        _check_riccati(lq1),
        _check_analytic_fields_annihilate(lq1),
        _check_operator_linearity(lq1),
        _check_replay_determinism(lq1),
    ]
    ok = all(flag for flag, _ in checks)
    notes = "; ".join(note for flag, note in checks if not flag) or \
        "; ".join(note for _, note in checks)
    _record(8, ok, f"property battery: {notes}")


# ---------------------------------------------------------------------------
# criterion 9: dual-method residuals trend downward


def test_criterion_9_dual_residuals_non_increasing(dual_lq1):
    state = dual_lq1
    series = np.array([diag.kfp + diag.hjb for diag in state.history])
    window = max(3, len(series) // 8)
    kernel = np.ones(window) / window
    smooth = np.convolve(series, kernel, mode="valid")
    half = smooth[len(smooth) // 2:]
    # trend test: the slope of a least-squares line over the last half
    # must not be positive beyond noise
    idx = np.arange(len(half))
    slope = np.polyfit(idx, half, 1)[0]
    tolerance = 1e-3 * max(abs(half).max(), 1e-12)
    ok = slope <= tolerance
    _record(9, ok,
            f"smoothed residual slope over last half {slope:.2e} "
            f"(tolerance {tolerance:.2e})")
