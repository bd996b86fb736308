"""Reverse-mode autodiff over small dense MLPs, plus the optimisers used here.

The tape is a flat list of backward closures over numpy arrays: every
operation below either returns a plain ndarray (when no argument is a
:class:`Var`) or records itself on the tape of its Var arguments.  This keeps
one code path for "inference" and "training" evaluation of the same formula.

Conventions
-----------
* weights are stored ``(n_in, n_out)`` so a batch ``x`` of shape ``(n, d)``
  propagates as ``x @ W + b``;
* ``relu'(0) = 0``, consistently in backward passes and forward-mode sweeps;
* softplus is evaluated in the overflow-safe form
  ``log1p(exp(-|z|)) + max(z, 0)``;
* a tape supports exactly one backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradientError

ACTIVATIONS = ("relu", "tanh", "softplus", "identity")


class TapeError(RuntimeError):
    """Backward called twice, or on a value foreign to this tape."""


class Tape:
    __slots__ = ("_nodes", "_spent")

    def __init__(self):
        self._nodes = []
        self._spent = False

    def leaf(self, value):
        return Var(self, np.asarray(value, dtype=float))

    def _record(self, fn):
        self._nodes.append(fn)

    def backward_from(self, seeds):
        """Run the reverse sweep from ``seeds``: pairs ``(var, cotangent)``."""
        if self._spent:
            raise TapeError("tape already consumed by a backward pass")
        self._spent = True
        for var, g in seeds:
            if var.tape is not self:
                raise TapeError("seed value does not belong to this tape")
            var._accumulate(np.asarray(g, dtype=float))
        for fn in reversed(self._nodes):
            fn()


class Var:
    """Array value recorded on a tape; ``grad`` fills in after backward."""

    __slots__ = ("tape", "value", "grad")

    def __init__(self, tape, value):
        self.tape = tape
        self.value = value
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=float)
        else:
            self.grad = self.grad + g

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out_v = av + bv
    if tape is None:
        return out_v
    out = Var(tape, out_v)

    def back():
        if out.grad is None:
            return
        if isinstance(a, Var):
            a._accumulate(_unbroadcast(out.grad, np.shape(av)))
        if isinstance(b, Var):
            b._accumulate(_unbroadcast(out.grad, np.shape(bv)))

    tape._record(back)
    return out


def sub(a, b):
    return add(a, mul(b, -1.0))


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out_v = av * bv
    if tape is None:
        return out_v
    out = Var(tape, out_v)

    def back():
        if out.grad is None:
            return
        if isinstance(a, Var):
            a._accumulate(_unbroadcast(out.grad * bv, np.shape(av)))
        if isinstance(b, Var):
            b._accumulate(_unbroadcast(out.grad * av, np.shape(bv)))

    tape._record(back)
    return out


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out_v = av / bv
    if tape is None:
        return out_v
    out = Var(tape, out_v)

    def back():
        if out.grad is None:
            return
        if isinstance(a, Var):
            a._accumulate(_unbroadcast(out.grad / bv, np.shape(av)))
        if isinstance(b, Var):
            b._accumulate(_unbroadcast(-out.grad * av / (bv * bv), np.shape(bv)))

    tape._record(back)
    return out


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out_v = av @ bv
    if tape is None:
        return out_v
    out = Var(tape, out_v)

    def back():
        if out.grad is None:
            return
        if isinstance(a, Var):
            a._accumulate(out.grad @ bv.T)
        if isinstance(b, Var):
            b._accumulate(av.T @ out.grad)

    tape._record(back)
    return out


def _unary(a, fn, dfn):
    tape = _tape_of(a)
    av = value_of(a)
    out_v = fn(av)
    if tape is None:
        return out_v
    out = Var(tape, out_v)

    def back():
        if out.grad is None:
            return
        a._accumulate(out.grad * dfn(av, out_v))

    tape._record(back)
    return out


def relu(a):
    return _unary(a, lambda v: np.maximum(v, 0.0), lambda v, o: (v > 0.0).astype(float))


def tanh(a):
    return _unary(a, np.tanh, lambda v, o: 1.0 - o * o)


def _softplus(v):
    return np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0.0)


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def softplus(a):
    return _unary(a, _softplus, lambda v, o: _sigmoid(v))


def sigmoid(a):
    return _unary(a, _sigmoid, lambda v, o: o * (1.0 - o))


def exp(a):
    return _unary(a, np.exp, lambda v, o: o)


def relu_gate(a):
    """``1[a > 0]`` with zero derivative; the relu slope for forward sweeps."""
    tape = _tape_of(a)
    out_v = (value_of(a) > 0.0).astype(float)
    if tape is None:
        return out_v
    return Var(tape, out_v)  # constant w.r.t. a: nothing recorded


def asum(a, axis=None, keepdims=False):
    tape = _tape_of(a)
    av = value_of(a)
    out_v = np.sum(av, axis=axis, keepdims=keepdims)
    if tape is None:
        return out_v
    out = Var(tape, out_v)

    def back():
        if out.grad is None:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, np.shape(av)).copy())

    tape._record(back)
    return out


def amean(a, axis=None):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(asum(a, axis=axis), 1.0 / n)


def concat_cols(parts):
    """Column-wise concatenation of ``(n, k_i)`` blocks (Var or ndarray)."""
    tape = _tape_of(*parts)
    vals = [np.atleast_2d(value_of(p)) for p in parts]
    out_v = np.concatenate(vals, axis=1)
    if tape is None:
        return out_v
    out = Var(tape, out_v)
    offsets = np.cumsum([0] + [v.shape[1] for v in vals])

    def back():
        if out.grad is None:
            return
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(part, Var):
                part._accumulate(out.grad[:, lo:hi].reshape(np.shape(part.value)))

    tape._record(back)
    return out


def backward(tape, out, seed=1.0):
    """Reverse sweep from a scalar output recorded on ``tape``."""
    if not isinstance(out, Var) or out.tape is not tape:
        raise TapeError("output was not produced by a forward pass on this tape")
    if np.size(out.value) != 1:
        raise TapeError("backward expects a scalar output")
    tape.backward_from([(out, np.full(np.shape(out.value), float(seed)))])


# ---------------------------------------------------------------------------
# MLP parameters and evaluation


@dataclass
class MlpParams:
    """Dense MLP: per-layer weights ``(n_in, n_out)``, biases, activation tags."""

    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("layer lists must have equal length")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for W, b, W_next in zip(self.weights, self.biases, self.weights[1:]):
            if W.shape[1] != b.shape[0] or W.shape[1] != W_next.shape[0]:
                raise ValueError("inconsistent consecutive layer dimensions")
        if self.weights[-1].shape[1] != self.biases[-1].shape[0]:
            raise ValueError("last bias does not match last weight")

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    def flat(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            out.append(b)
        return out

    def replace_flat(self, arrays):
        ws, bs = [], []
        for i in range(len(self.weights)):
            ws.append(arrays[2 * i])
            bs.append(arrays[2 * i + 1])
        return MlpParams(ws, bs, list(self.activations))

    def copy(self):
        return MlpParams([W.copy() for W in self.weights],
                         [b.copy() for b in self.biases],
                         list(self.activations))


def init_mlp(sizes, rng, activations=None, zero_last=False):
    """Kaiming-uniform for relu layers, Xavier-uniform otherwise.

    ``zero_last`` zeroes the final layer so the network starts as the zero
    function (used for growth and score networks).
    """
    if activations is None:
        activations = ["relu"] * (len(sizes) - 2) + ["identity"]
    ws, bs = [], []
    for l, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if zero_last and l == len(sizes) - 2:
            W = np.zeros((n_in, n_out))
        elif activations[l] == "relu":
            bound = np.sqrt(6.0 / n_in)
            W = rng.uniform(-bound, bound, size=(n_in, n_out))
        else:
            bound = np.sqrt(6.0 / (n_in + n_out))
            W = rng.uniform(-bound, bound, size=(n_in, n_out))
        ws.append(W)
        bs.append(np.zeros(n_out))
    return MlpParams(ws, bs, list(activations))


_ACT_FN = {
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
    "softplus": _softplus,
    "identity": lambda z: z,
}


def mlp_forward(params, x):
    """Plain-numpy forward pass; accepts ``(d,)`` or ``(n, d)`` input."""
    xv = np.asarray(x, dtype=float)
    single = xv.ndim == 1
    h = xv[None, :] if single else xv
    if h.shape[1] != params.in_dim:
        raise ValueError(f"input dim {h.shape[1]} != first layer size {params.in_dim}")
    for W, b, act in zip(params.weights, params.biases, params.activations):
        h = _ACT_FN[act](h @ W + b)
    return h[0] if single else h


class MlpLeaves:
    """Per-iteration Var leaves for a trainable MLP on one tape."""

    def __init__(self, tape, params):
        self.params = params
        self.weights = [tape.leaf(W) for W in params.weights]
        self.biases = [tape.leaf(b) for b in params.biases]

    def flat_grads(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W.grad if W.grad is not None else np.zeros_like(W.value))
            out.append(b.grad if b.grad is not None else np.zeros_like(b.value))
        return out


_ACT_OP = {"relu": relu, "tanh": tanh, "softplus": softplus, "identity": lambda v: v}


def _layers_of(net):
    if isinstance(net, MlpLeaves):
        return zip(net.weights, net.biases, net.params.activations)
    return zip(net.weights, net.biases, net.activations)


def mlp_apply(net, x):
    """Forward pass through leaves (trainable) or raw params (frozen).

    ``x`` may be a Var or an ndarray; the result is a Var whenever anything
    differentiable is involved.
    """
    h = x
    for W, b, act in _layers_of(net):
        h = add(matmul(h, W), b)
        h = _ACT_OP[act](h)
    return h


_ACT_SLOPE = {
    "relu": relu_gate,
    "tanh": lambda z: sub(1.0, mul(tanh(z), tanh(z))),
    "softplus": sigmoid,
    "identity": None,
}


def mlp_jvp(net, x, u):
    """Forward pass together with the tangent ``J(x) u`` (forward mode).

    Both the primal output and the tangent stay on the tape, so the tangent
    itself can be differentiated w.r.t. the parameters (needed when the model
    velocity involves input derivatives of a trainable network).
    """
    h, t = x, u
    for W, b, act in _layers_of(net):
        z = add(matmul(h, W), b)
        t = matmul(t, W)
        slope = _ACT_SLOPE[act]
        if slope is not None:
            t = mul(t, slope(z))
        h = _ACT_OP[act](z)
    return h, t


def mlp_input_grad(net, x):
    """Gradient rows d out / d x_i for a scalar-output MLP: ``(n, d_in)``."""
    xv = value_of(x)
    n, d = xv.shape
    cols = []
    for i in range(d):
        e = np.zeros((n, d))
        e[:, i] = 1.0
        _, t = mlp_jvp(net, x, e)
        cols.append(t)
    return concat_cols(cols)


def mlp_jacobian_diag(net, x):
    """Diagonal entries d out_i / d x_i of a square MLP: ``(n, d)``."""
    xv = value_of(x)
    n, d = xv.shape
    out_dim = (net.params if isinstance(net, MlpLeaves) else net).out_dim
    if out_dim != d:
        raise ValueError("jacobian diagonal requires a square network")
    cols = []
    for i in range(d):
        e = np.zeros((n, d))
        e[:, i] = 1.0
        _, t = mlp_jvp(net, x, e)
        if isinstance(t, Var):
            sel = np.zeros((d, 1))
            sel[i, 0] = 1.0
            cols.append(matmul(t, sel))
        else:
            cols.append(t[:, i:i + 1])
    return concat_cols(cols)


def input_jacobian_diag(params, x):
    """Plain-numpy Jacobian diagonal of a square MLP at ``x`` (``(d,)`` or ``(n,d)``)."""
    xv = np.asarray(x, dtype=float)
    single = xv.ndim == 1
    h = xv[None, :] if single else xv
    out = mlp_jacobian_diag(params, h)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Optimiser and structured sparsity


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2


@dataclass
class OptimState:
    cfg: AdamWConfig
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_arrays(cls, arrays, cfg=None):
        cfg = cfg or AdamWConfig()
        return cls(cfg=cfg,
                   m=[np.zeros_like(a) for a in arrays],
                   v=[np.zeros_like(a) for a in arrays])


def adamw_step(state, values, grads):
    """One decoupled-weight-decay Adam step; returns the updated arrays.

    The step is rejected (state and values untouched) if any gradient entry
    is not finite.
    """
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter block {i}")
    cfg = state.cfg
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(values, grads)):
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        out.append(p - cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p))
    return out


def group_lasso_prox(weight, strength, lr):
    """Block soft-threshold the rows of a first-layer weight matrix.

    Row ``i`` collects the outgoing weights of input ``i``; each row is scaled
    by ``max(0, 1 - lr * strength / ||row||)``.
    """
    norms = np.linalg.norm(weight, axis=1)
    thr = lr * strength
    scale = np.where(norms > 0.0, np.maximum(0.0, 1.0 - thr / np.maximum(norms, 1e-300)), 0.0)
    return weight * scale[:, None]


# ---------------------------------------------------------------------------
# Checkpoint (de)serialisation: JSON with row-major full-precision arrays


def mlp_to_json(params):
    return {
        "sizes": [int(s) for s in params.sizes],
        "activations": list(params.activations),
        "weights": [W.ravel(order="C").tolist() for W in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def mlp_from_json(doc):
    sizes = doc["sizes"]
    ws, bs = [], []
    for l, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        ws.append(np.asarray(doc["weights"][l], dtype=float).reshape(n_in, n_out))
        bs.append(np.asarray(doc["biases"][l], dtype=float))
    return MlpParams(ws, bs, list(doc["activations"]))
