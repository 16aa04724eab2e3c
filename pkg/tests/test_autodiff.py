"""Reverse-mode tape: gradients of every primitive against finite
differences, plus the bookkeeping contracts."""

import numpy as np
import pytest

import mfot.autodiff as ad
from mfot.errors import ContractError, NumericalError


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        g.ravel()[i] = (f((flat + bump).reshape(x.shape))
                        - f((flat - bump).reshape(x.shape))) / (2 * h)
    return g


def tape_grad(build, x):
    tape = ad.Tape()
    v = tape.param(x)
    out = build(v)
    tape.backward(out)
    return v.grad


UNARY_CASES = [
    ("square", ad.square, (3, 2), 0.5),
    ("sqrt", ad.sqrt, (3, 2), 2.0),
    ("exp", ad.exp, (3, 2), 0.0),
    ("log", ad.log, (3, 2), 1.5),
    ("tanh", ad.tanh, (3, 2), 0.0),
    ("sigmoid", ad.sigmoid, (3, 2), 0.0),
    ("softplus", ad.softplus, (3, 2), 0.0),
    ("reciprocal", ad.reciprocal, (3, 2), 2.0),
    ("relu", ad.relu, (3, 2), 0.3),
]


@pytest.mark.parametrize("name,op,shape,shift", UNARY_CASES,
                         ids=[c[0] for c in UNARY_CASES])
def test_unary_gradients_match_finite_differences(name, op, shape, shift,
                                                  rng_np):
    # [DERIVED] each primitive's vector-Jacobian product against central
    # differences
    x = rng_np.normal(size=shape) * 0.7 + shift
    if name == "relu":
        x = x[np.abs(x) > 1e-3 * np.ones_like(x)].reshape(-1, 1)
    build = lambda v: ad.vsum(op(v) * np.arange(1.0, 1.0 + v.value.size)
                              .reshape(v.value.shape))
    g = tape_grad(build, x)
    ref = fd_grad(lambda z: float(np.sum(
        {"square": lambda a: a ** 2, "sqrt": np.sqrt, "exp": np.exp,
         "log": np.log, "tanh": np.tanh,
         "sigmoid": lambda a: 1 / (1 + np.exp(-a)),
         "softplus": lambda a: np.logaddexp(0.0, a),
         "reciprocal": lambda a: 1.0 / a,
         "relu": lambda a: np.maximum(a, 0.0)}[name](z)
        * np.arange(1.0, 1.0 + z.size).reshape(z.shape))), x)
    assert np.allclose(g, ref, rtol=1e-5, atol=1e-7)


def test_matmul_and_broadcast_add_gradients(rng_np):
    # [DERIVED] broadcasting adjoints are summed over the broadcast axes
    a = rng_np.normal(size=(4, 3))
    b = rng_np.normal(size=(3, 5))
    c = rng_np.normal(size=(1, 5))

    def full(av):
        return ad.vsum(ad.square(ad.add(ad.matmul(av, b), c)))

    g = tape_grad(full, a)
    ref = fd_grad(lambda z: float(np.sum((z @ b + c) ** 2)), a)
    assert np.allclose(g, ref, rtol=1e-6, atol=1e-8)


def test_mul_div_pow_operator_overloads(rng_np):
    x = np.abs(rng_np.normal(size=(3,))) + 0.5

    def build(v):
        return ad.vsum(v * v / 2.0 + 3.0 * v ** 1.5 - 1.0 / v)

    g = tape_grad(build, x)
    ref = fd_grad(lambda z: float(np.sum(z * z / 2 + 3 * z ** 1.5 - 1 / z)), x)
    assert np.allclose(g, ref, rtol=1e-6)


def test_concat_take_transpose_gradients(rng_np):
    x = rng_np.normal(size=(4, 3))

    def build(v):
        parts = ad.concat([v, 2.0 * v], axis=1)
        col = ad.take(parts, 2, axis=-1)
        return ad.vsum(ad.square(col)) + ad.vsum(ad.transpose(v) * 0.5)

    g = tape_grad(build, x)
    ref = fd_grad(lambda z: float(
        np.sum(np.concatenate([z, 2 * z], axis=1)[:, 2] ** 2)
        + 0.5 * np.sum(z)), x)
    assert np.allclose(g, ref, rtol=1e-6, atol=1e-9)


def test_vsum_vmean_axes(rng_np):
    x = rng_np.normal(size=(5, 4))

    def build(v):
        return ad.vsum(ad.square(ad.vmean(v, axis=0))) \
            + ad.vsum(ad.vsum(v, axis=1, keepdims=True) * 0.1)

    g = tape_grad(build, x)
    ref = fd_grad(lambda z: float(np.sum(np.mean(z, axis=0) ** 2)
                                  + 0.1 * np.sum(z)), x)
    assert np.allclose(g, ref, rtol=1e-6, atol=1e-9)


def test_grad_params_collects_all_leaves_in_order(rng_np):
    # [TRIVIAL] unused parameters contribute zero blocks of the right size
    tape = ad.Tape()
    a = tape.param(rng_np.normal(size=(2, 2)))
    b = tape.param(rng_np.normal(size=(3,)))
    out = ad.vsum(ad.square(a))
    flat = tape.grad_params(out)
    assert flat.shape == (7,)
    assert np.allclose(flat[:4], (2 * a.value).ravel())
    assert np.allclose(flat[4:], 0.0)


def test_backward_requires_scalar_root(rng_np):
    tape = ad.Tape()
    v = tape.param(rng_np.normal(size=(3,)))
    with pytest.raises(ContractError):
        tape.backward(ad.square(v))


@pytest.mark.filterwarnings("ignore:invalid value")
def test_check_finite_reports_first_bad_node():
    tape = ad.Tape()
    v = tape.param(np.array([1.0, -1.0]))
    bad = ad.log(v)  # log of a negative number
    with pytest.raises(NumericalError):
        ad.check_finite(tape, bad, "unit test")


def test_second_use_of_node_accumulates_adjoints(rng_np):
    # [DERIVED] fan-out: d/dx of x*x + sin-free second use 3x is 2x + 3
    x = rng_np.normal(size=(4,))

    def build(v):
        y = v * v
        return ad.vsum(y) + ad.vsum(3.0 * v)

    g = tape_grad(build, x)
    assert np.allclose(g, 2 * x + 3.0, rtol=1e-12)
