"""Direct policy training: frozen-plan gradients, the regularization
schedule, and determinism on toy instances."""

import numpy as np
import pytest

from mfot import problems
from mfot.direct import DirectConfig, DirectTrainer
from mfot.errors import ConfigError


def tiny_config(**kwargs):
    base = dict(n_particles=4, n_steps=3, iterations=3, hidden=(6, 6),
                alpha_start=0.3, seed=0, learning_rate=1e-2)
    base.update(kwargs)
    return DirectConfig(**base)


def test_frozen_plan_gradient_matches_finite_differences(lq1, monkeypatch):
    # [DERIVED] with the transport plan held fixed, the tape gradient of
    # the path loss matches central differences in the policy parameters
    trainer = DirectTrainer(lq1, tiny_config())
    loss, tape, _ = trainer.path_loss(0)
    plan = trainer._transport_plan(
        np.zeros((4, 1)) + np.arange(4)[:, None] * 0.1,
        np.ones((4, 1)) + np.arange(4)[:, None] * 0.1)
    monkeypatch.setattr(trainer, "_transport_plan", lambda *a, **k: plan)

    theta0 = trainer.policy.theta.copy()
    loss, tape, _ = trainer.path_loss(0)
    grad = tape.grad_params(loss)

    def loss_at(theta):
        trainer.policy.theta = theta
        val, _, _ = trainer.path_loss(0)
        return float(val.value)

    h = 1e-6
    rng = np.random.default_rng(1)
    idx = rng.choice(theta0.size, size=15, replace=False)
    worst = 0.0
    for i in idx:
        bump = np.zeros_like(theta0)
        bump[i] = h
        ref = (loss_at(theta0 + bump) - loss_at(theta0 - bump)) / (2 * h)
        scale = max(1.0, abs(ref))
        worst = max(worst, abs(grad[i] - ref) / scale)
    trainer.policy.theta = theta0
    assert worst < 1e-4


def test_loss_parts_are_consistent(lq1):
    trainer = DirectTrainer(lq1, tiny_config())
    _, _, parts = trainer.path_loss(0)
    assert parts.total == pytest.approx(parts.running + parts.penalty)
    assert parts.penalty == pytest.approx(
        trainer.config.penalty_weight * parts.w2 ** 2, rel=1e-9)
    assert parts.w2 > 0


def test_regularization_halves_when_distance_halves(lq1):
    # [DERIVED] the blur level steps down only on sustained progress
    trainer = DirectTrainer(lq1, tiny_config(alpha_start=0.4))
    trainer._update_alpha(1.0)  # records the reference level
    trainer._update_alpha(0.9)
    assert trainer.alpha == 0.4
    trainer._update_alpha(0.45)
    assert trainer.alpha == pytest.approx(0.2)
    for _ in range(40):
        trainer._update_alpha(1e-9)
    assert trainer.alpha >= trainer.config.alpha_floor


def test_training_is_deterministic(lq1):
    a = DirectTrainer(lq1, tiny_config())
    b = DirectTrainer(lq1, tiny_config())
    ha = a.train()
    hb = b.train()
    assert [p.total for p in ha] == [p.total for p in hb]
    assert np.array_equal(a.policy.theta, b.policy.theta)


def test_training_runs_on_congestion(rng_np):
    spec = problems.congestion_case(2)
    trainer = DirectTrainer(spec, tiny_config(iterations=2))
    history = trainer.train()
    assert len(history) == 2
    assert all(np.isfinite(p.total) for p in history)
    out = trainer.control(0.5, rng_np.normal(size=(3, spec.d)))
    assert out.shape == (3, spec.k)


def test_history_export(tmp_path, lq1):
    trainer = DirectTrainer(lq1, tiny_config(iterations=2))
    trainer.train()
    path = tmp_path / "history.csv"
    trainer.export_history_csv(str(path))
    lines = path.read_text().strip().split("\n")
    assert lines[0].startswith("iteration,")
    assert len(lines) == 3


def test_config_validation():
    with pytest.raises(ConfigError):
        DirectConfig(penalty_weight=0.0)
    with pytest.raises(ConfigError):
        DirectConfig(alpha_start=-0.1)
