"""Neural function approximators of (t, x) with tape-exact derivatives.

Fields propagate (value, d/dt, spatial gradient, spatial Laplacian) forward
through every layer. All four objects are tape variables, so losses built
from PDE residuals differentiate w.r.t. parameters with one backward pass,
and no finite differences appear anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tape, Var
from .errors import ConfigError, ContractError

_ACTIVATIONS = ("tanh", "sigmoid")


def _mm(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        return ad.matmul(a, b)
    return a @ b


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    if isinstance(a, Var) or isinstance(b, Var):
        return ad.add(a, b)
    return a + b


def _mul(a, b):
    if a is None or b is None:
        return None
    if isinstance(a, Var) or isinstance(b, Var):
        return ad.mul(a, b)
    return a * b


@dataclass
class _State:
    """Value and input-derivatives of one intermediate tensor.

    tan[0] is the time tangent; tan[1:] are spatial tangents. lap is the
    spatial Laplacian. None means identically zero.
    """

    val: object
    tan: list
    lap: object


def _affine(s: _State, w, b) -> _State:
    return _State(
        val=_add(_mm(s.val, w), b),
        tan=[None if t is None else _mm(t, w) for t in s.tan],
        lap=None if s.lap is None else _mm(s.lap, w),
    )


def _activation_derivs(kind: str, z):
    """(phi(z), phi'(z), phi''(z)) as tape expressions."""
    if kind == "tanh":
        y = ad.tanh(z)
        d1 = 1.0 + (-1.0 * ad.square(y))
        d2 = -2.0 * y * d1
    elif kind == "sigmoid":
        y = ad.sigmoid(z)
        d1 = y * (1.0 + (-1.0 * y))
        d2 = d1 * (1.0 + (-2.0 * y))
    elif kind == "softplus":
        y = ad.softplus(z)
        s = ad.sigmoid(z)
        d1 = s
        d2 = s * (1.0 + (-1.0 * s))
    else:
        raise ConfigError(f"unknown activation {kind!r}")
    return y, d1, d2


def _chain(kind: str, s: _State) -> _State:
    """Apply an elementwise nonlinearity to a state, second-order chain rule."""
    if s.lap is None and all(t is None for t in s.tan):
        # no input-derivative tracking; skip the chain-rule factors
        if kind == "tanh":
            y = ad.tanh(s.val)
        elif kind == "sigmoid":
            y = ad.sigmoid(s.val)
        elif kind == "softplus":
            y = ad.softplus(s.val)
        else:
            raise ConfigError(f"unknown activation {kind!r}")
        return _State(val=y, tan=list(s.tan), lap=None)
    y, d1, d2 = _activation_derivs(kind, s.val)
    tan = [_mul(d1, t) for t in s.tan]
    lap = _mul(d1, s.lap)
    sq = None
    for t in s.tan[1:]:
        if t is not None:
            sq = _add(sq, ad.square(t) if isinstance(t, Var) else t * t)
    if sq is not None:
        lap = _add(lap, _mul(d2, sq))
    return _State(val=y, tan=tan, lap=lap)


def _prod(a: _State, b: _State) -> _State:
    """Elementwise product of two states (for gated cells)."""
    tan = [_add(_mul(ta, b.val), _mul(a.val, tb)) for ta, tb in zip(a.tan, b.tan)]
    lap = _add(_mul(a.lap, b.val), _mul(a.val, b.lap))
    cross = None
    for ta, tb in zip(a.tan[1:], b.tan[1:]):
        cross = _add(cross, _mul(ta, tb))
    if cross is not None:
        lap = _add(lap, _mul(2.0, cross))
    return _State(val=_mul(a.val, b.val), tan=tan, lap=lap)


def _state_add(a: _State, b: _State) -> _State:
    return _State(
        val=_add(a.val, b.val),
        tan=[_add(ta, tb) for ta, tb in zip(a.tan, b.tan)],
        lap=_add(a.lap, b.lap),
    )


class NeuralField:
    """A parameterized function of (t, x) -> R^out.

    arch "mlp": fully connected, optional residual connections.
    arch "dgm": gated cell stack in the deep-Galerkin style.

    Structural wrappers: `quadratic` adds a trainable quadratic in x to a
    scalar output; `bounded_first` squashes the first output component into
    (0, C) with a scaled sigmoid; `softplus_output` makes every component
    non-negative.
    """

    def __init__(self, d: int, out_dim: int = 1, arch: str = "mlp",
                 hidden: tuple[int, ...] = (60,) * 6, activation: str = "tanh",
                 residual: bool = False, quadratic: bool = False,
                 bounded_first: float | None = None,
                 softplus_output: bool = False, seed: int = 0):
        if activation not in _ACTIVATIONS:
            raise ConfigError(f"activation must be one of {_ACTIVATIONS}")
        if any(w <= 0 for w in hidden) or out_dim <= 0 or d <= 0:
            raise ConfigError("layer widths and dimensions must be positive")
        if quadratic and out_dim != 1:
            raise ConfigError("quadratic wrapper requires scalar output")
        self.d = d
        self.out_dim = out_dim
        self.arch = arch
        self.hidden = tuple(hidden)
        self.activation = activation
        self.residual = residual
        self.quadratic = quadratic
        self.bounded_first = bounded_first
        self.softplus_output = softplus_output

        self._names: list[str] = []
        self._arrays: list[np.ndarray] = []
        self._build(seed)

    # parameter plumbing ----------------------------------------------------
    def _init_weight(self, seed: int, tag: int, fan_in: int, shape) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        u = rng.uniforms(seed, rng.STREAM_INIT,
                         np.stack(np.meshgrid(
                             np.arange(shape[0], dtype=np.uint64),
                             np.arange(shape[1], dtype=np.uint64),
                             indexing="ij"), axis=-1),
                         salt=tag)
        return bound * (2.0 * u - 1.0)

    def _add_param(self, name: str, value: np.ndarray) -> None:
        self._names.append(name)
        self._arrays.append(np.asarray(value, dtype=np.float64))

    def _build(self, seed: int) -> None:
        n_in = 1 + self.d
        tag = 0
        if self.arch == "mlp":
            widths = [n_in, *self.hidden]
            for i in range(len(self.hidden)):
                tag += 1
                self._add_param(f"W{i}", self._init_weight(seed, tag, widths[i],
                                                           (widths[i], widths[i + 1])))
                self._add_param(f"b{i}", np.zeros(widths[i + 1]))
            tag += 1
            self._add_param("Wout", self._init_weight(seed, tag, widths[-1],
                                                      (widths[-1], self.out_dim)))
            self._add_param("bout", np.zeros(self.out_dim))
        elif self.arch == "dgm":
            if len(set(self.hidden)) != 1:
                raise ConfigError("dgm cells use one common width")
            w = self.hidden[0]
            tag += 1
            self._add_param("W_in", self._init_weight(seed, tag, n_in, (n_in, w)))
            self._add_param("b_in", np.zeros(w))
            for i in range(len(self.hidden)):
                for gate in ("z", "g", "r", "h"):
                    tag += 1
                    self._add_param(f"U{gate}{i}",
                                    self._init_weight(seed, tag, n_in, (n_in, w)))
                    tag += 1
                    self._add_param(f"W{gate}{i}",
                                    self._init_weight(seed, tag, w, (w, w)))
                    self._add_param(f"b{gate}{i}", np.zeros(w))
            tag += 1
            self._add_param("Wout", self._init_weight(seed, tag, w, (w, self.out_dim)))
            self._add_param("bout", np.zeros(self.out_dim))
        else:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.quadratic:
            self._add_param("quadP", np.zeros((self.d, self.d)))
            self._add_param("quadc", np.zeros(self.d))
            self._add_param("quade", np.zeros(1))

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays])

    @theta.setter
    def theta(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ContractError("parameter vector has wrong length")
        off = 0
        for i, a in enumerate(self._arrays):
            self._arrays[i] = flat[off:off + a.size].reshape(a.shape).copy()
            off += a.size

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self._arrays)

    def bind(self, tape: Tape) -> dict[str, Var]:
        """Register all parameters on a tape, in canonical order."""
        return {name: tape.param(a) for name, a in zip(self._names, self._arrays)}

    # forward ---------------------------------------------------------------
    @staticmethod
    def _features(t, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            t = np.full(x.shape[0], float(t))
        return np.concatenate([t[:, None], x], axis=1), x

    def _input_state(self, t, x, derivs: bool) -> tuple[_State, np.ndarray]:
        feat, x = self._features(t, x)
        n_in = 1 + self.d
        if derivs:
            tan = [np.eye(n_in)[k][None, :] for k in range(n_in)]
        else:
            tan = [None] * n_in
        return _State(val=feat, tan=tan, lap=None), x

    def _core(self, p: dict[str, Var], s: _State) -> _State:
        if self.arch == "mlp":
            for i in range(len(self.hidden)):
                h = _chain(self.activation, _affine(s, p[f"W{i}"], p[f"b{i}"]))
                if self.residual and i > 0 and self.hidden[i] == self.hidden[i - 1]:
                    h = _state_add(h, s)
                s = h
            return _affine(s, p["Wout"], p["bout"])
        # dgm
        x_state = s
        s = _chain(self.activation, _affine(s, p["W_in"], p["b_in"]))
        for i in range(len(self.hidden)):
            def gate(name: str, mix: _State) -> _State:
                pre = _state_add(_affine(x_state, p[f"U{name}{i}"], p[f"b{name}{i}"]),
                                 _affine(mix, p[f"W{name}{i}"], None))
                return _chain(self.activation, pre)

            z = gate("z", s)
            g = gate("g", s)
            r = gate("r", s)
            h = gate("h", _prod(s, r))
            one_minus_g = _State(val=_add(1.0, _mul(-1.0, g.val)),
                                 tan=[_mul(-1.0, t) for t in g.tan],
                                 lap=_mul(-1.0, g.lap))
            s = _state_add(_prod(one_minus_g, h), _prod(z, s))
        return _affine(s, p["Wout"], p["bout"])

    def _wrap(self, p: dict[str, Var], s: _State, x: np.ndarray,
              derivs: bool) -> _State:
        if self.quadratic:
            # trainable quadratic correction q(x) = x^T P x + c^T x + e
            pc = p["quadc"]
            quad = _add(_add(ad.vsum(_mm(x, p["quadP"]) * x, axis=1, keepdims=True),
                             _mm(x, _reshape_col(pc))),
                        p["quade"])
            tan = list(s.tan)
            lap = s.lap
            if derivs:
                sym = _add(p["quadP"], _transpose(p["quadP"]))
                gx = _mm(x, sym)  # (B, d) Var
                for k in range(self.d):
                    tan[k + 1] = _add(tan[k + 1],
                                      _add(ad.take(gx, slice(k, k + 1)),
                                           ad.take(pc, slice(k, k + 1))))
                lap = _add(lap, _trace(sym))
            s = _State(val=_add(s.val, quad), tan=tan, lap=lap)
        if self.bounded_first is not None:
            c = float(self.bounded_first)
            first = _State(val=ad.take(s.val, slice(0, 1)),
                           tan=[None if t is None else
                                (ad.take(t, slice(0, 1)) if isinstance(t, Var)
                                 else t[..., 0:1]) for t in s.tan],
                           lap=None if s.lap is None else ad.take(s.lap, slice(0, 1)))
            y, d1, d2 = _activation_derivs("sigmoid", first.val)
            bt = [_mul(c, _mul(d1, t)) for t in first.tan]
            bl = _mul(c, _mul(d1, first.lap))
            sq = None
            for t in first.tan[1:]:
                if t is not None:
                    sq = _add(sq, ad.square(t) if isinstance(t, Var) else t * t)
            if sq is not None:
                bl = _add(bl, _mul(c, _mul(d2, sq)))
            first = _State(val=_mul(c, y), tan=bt, lap=bl)
            if self.out_dim == 1:
                s = first
            else:
                rest = _State(val=ad.take(s.val, slice(1, None)),
                              tan=[None if t is None else
                                   (ad.take(t, slice(1, None)) if isinstance(t, Var)
                                    else t[..., 1:]) for t in s.tan],
                              lap=None if s.lap is None
                              else ad.take(s.lap, slice(1, None)))
                s = _State(val=ad.concat([first.val, rest.val], axis=-1),
                           tan=[_concat_tan(a, b) for a, b in
                                zip(first.tan, rest.tan)],
                           lap=ad.concat([first.lap, rest.lap], axis=-1)
                           if first.lap is not None else None)
        if self.softplus_output:
            s = _chain("softplus", s)
        return s

    def value(self, tape: Tape, t, x, params: dict[str, Var] | None = None) -> Var:
        """Field values, shape (B, out_dim).

        Pass a dict from a previous bind() to reuse parameter nodes across
        several evaluations on one tape. x may be a Var, in which case the
        output also carries sensitivities to the inputs (used when states in
        a simulated path depend on the parameters through earlier steps).
        """
        p = self.bind(tape) if params is None else params
        if isinstance(x, Var):
            t_arr = np.asarray(t, dtype=np.float64)
            if t_arr.ndim == 0:
                t_arr = np.full(x.shape[0], float(t_arr))
            t_col = tape.constant(t_arr[:, None])
            feat = ad.concat([t_col, x], axis=1)
            s = _State(val=feat, tan=[None] * (1 + self.d), lap=None)
            out = self._wrap(p, self._core(p, s), x, derivs=False)
        else:
            s, xn = self._input_state(t, x, derivs=False)
            out = self._wrap(p, self._core(p, s), xn, derivs=False)
        return ad.check_finite(tape, out.val, "field evaluation")

    def with_derivs(self, tape: Tape, t, x, params: dict[str, Var] | None = None):
        """(value, d/dt, [d/dx_k], laplacian), each a Var of shape (B, out)."""
        p = self.bind(tape) if params is None else params
        s, xn = self._input_state(t, x, derivs=True)
        out = self._wrap(p, self._core(p, s), xn, derivs=True)
        ad.check_finite(tape, out.val, "field evaluation")
        zeros = np.zeros_like(out.val.value)
        tan = [tape.constant(zeros) if tk is None else tk for tk in out.tan]
        lap = tape.constant(zeros) if out.lap is None else out.lap
        return out.val, tan[0], tan[1:], lap

    # numeric conveniences ---------------------------------------------------
    def eval(self, t, x) -> np.ndarray:
        return self.value(Tape(), t, x).value

    def eval_with_derivs(self, t, x):
        val, dt, dx, lap = self.with_derivs(Tape(), t, x)
        return (val.value, dt.value,
                np.stack([g.value for g in dx], axis=-1), lap.value)


def _reshape_col(v: Var) -> Var:
    out = v.value.reshape(-1, 1)

    def vjp(g):
        return g.reshape(v.value.shape)

    return v.tape.record(out, [(v, vjp)])


def _transpose(v: Var) -> Var:
    return v.tape.record(v.value.T, [(v, lambda g: g.T)])


def _trace(v: Var) -> Var:
    out = np.array([[np.trace(v.value)]])

    def vjp(g):
        return float(g) * np.eye(v.value.shape[0])

    return v.tape.record(out, [(v, vjp)])


def _concat_tan(a, b):
    if a is None and b is None:
        return None
    tape = a.tape if isinstance(a, Var) else b.tape
    if a is None:
        a = tape.constant(np.zeros((b.value.shape[0], 1)))
    if b is None:
        b = tape.constant(np.zeros((a.value.shape[0], 1)))
    return ad.concat([a, b], axis=-1)
