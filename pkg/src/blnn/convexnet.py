"""Input-convex networks with analytic input derivatives.

Two architectures live here:

* ``IcnnParams``: the fully input-convex network
  ``z_{i+1} = g(Wz_i z_i + Wy_i y + b_i)`` with a scalar, un-activated affine
  head. Gate weights ``Wz_i`` are kept nonnegative.
* ``PicnnParams``: the partially input-convex network, convex in ``y`` only,
  whose non-convex input ``x`` drives a separate "u-path" that modulates the
  convex path.

Every derivative (input gradient, input Hessian, parameter gradient of
``v . grad_y G``) is assembled by hand from the layer recursion. All public
functions accept either a single point ``(d,)`` or a batch ``(n, d)``; batched
parameter gradients are summed over the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

SERIAL_VERSION = 1

ACTIVATIONS = ("softplus", "relu")


class UnsupportedActivationError(ValueError):
    """Raised when an operation needs second derivatives of a ReLU network."""


# ---------------------------------------------------------------------------
# activations


def softplus(a):
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


def _act(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "softplus":
        return softplus(a)
    return np.maximum(a, 0.0)


def _dact(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "softplus":
        return expit(a)
    return (a > 0).astype(a.dtype)


def _ddact(kind: str, a: np.ndarray) -> np.ndarray:
    if kind != "softplus":
        raise UnsupportedActivationError(
            f"activation {kind!r} has no second derivative; use softplus")
    s = expit(a)
    return s * (1.0 - s)


def _check_activation(kind):
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}")


def _as_batch(y, dim, name="y"):
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    Y = y[None, :] if single else y
    if Y.ndim != 2 or Y.shape[1] != dim:
        raise ValueError(f"{name} has shape {y.shape}, expected (..., {dim})")
    return Y, single


# ---------------------------------------------------------------------------
# parameters


@dataclass
class IcnnLayer:
    w_input: np.ndarray
    bias: np.ndarray
    w_gate: Optional[np.ndarray] = None

    @property
    def out_dim(self) -> int:
        return self.bias.shape[0]


@dataclass
class IcnnParams:
    """Weights of a fully input-convex network.

    ``layers[0]`` has no gate; the last layer is the affine scalar head.
    The same container is used to hold parameter gradients.
    """

    layers: list
    activation: str = "softplus"

    def __post_init__(self):
        _check_activation(self.activation)
        if not self.layers:
            raise ValueError("an ICNN needs at least one layer")
        if self.layers[0].w_gate is not None:
            raise ValueError("layer 0 must not have a gate matrix")
        if self.layers[-1].out_dim != 1:
            raise ValueError("the final layer must map to a scalar")
        d = self.layers[0].w_input.shape[1]
        prev = None
        for i, layer in enumerate(self.layers):
            if layer.w_input.shape != (layer.out_dim, d):
                raise ValueError(f"layer {i}: w_input shape {layer.w_input.shape}")
            if i > 0:
                if layer.w_gate is None or layer.w_gate.shape != (layer.out_dim, prev):
                    raise ValueError(f"layer {i}: bad gate shape")
            prev = layer.out_dim

    @property
    def input_dim(self) -> int:
        return self.layers[0].w_input.shape[1]

    @property
    def dims(self) -> list:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def arrays(self) -> Iterator[np.ndarray]:
        """Parameter arrays in a fixed order (gate, input weight, bias per layer)."""
        for layer in self.layers:
            if layer.w_gate is not None:
                yield layer.w_gate
            yield layer.w_input
            yield layer.bias

    def gate_mask(self) -> Iterator[bool]:
        for layer in self.layers:
            if layer.w_gate is not None:
                yield True
            yield False
            yield False

    def copy(self) -> "IcnnParams":
        return IcnnParams(
            [IcnnLayer(l.w_input.copy(), l.bias.copy(),
                       None if l.w_gate is None else l.w_gate.copy())
             for l in self.layers],
            self.activation)

    def zeros_like(self) -> "IcnnParams":
        return IcnnParams(
            [IcnnLayer(np.zeros_like(l.w_input), np.zeros_like(l.bias),
                       None if l.w_gate is None else np.zeros_like(l.w_gate))
             for l in self.layers],
            self.activation)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass
class PicnnLayer:
    """One layer of the convex path of a PICNN.

    Layer 0 carries no ``w_z``/``w_zu``/``b_z`` (there is no previous ``z``).
    """

    w_y: np.ndarray      # (h_out, dy)
    w_yu: np.ndarray     # (dy, du)
    b_y: np.ndarray      # (dy,)
    w_u: np.ndarray      # (h_out, du)
    bias: np.ndarray     # (h_out,)
    w_z: Optional[np.ndarray] = None   # (h_out, h_in), nonnegative
    w_zu: Optional[np.ndarray] = None  # (h_in, du)
    b_z: Optional[np.ndarray] = None   # (h_in,)

    _names = ("w_z", "w_zu", "b_z", "w_y", "w_yu", "b_y", "w_u", "bias")

    def named_arrays(self):
        for name in self._names:
            a = getattr(self, name)
            if a is not None:
                yield name, a


@dataclass
class PicnnParams:
    """Weights of a partially input-convex network.

    ``u_layers[i] = (W, b)`` maps ``u_i`` to ``u_{i+1}``; ``u_0`` is the
    non-convex input. ``layers`` has one entry per convex-path layer, the last
    of which is the scalar, un-activated head.
    """

    u_layers: list
    layers: list
    activation: str = "softplus"

    def __post_init__(self):
        _check_activation(self.activation)
        if len(self.u_layers) != len(self.layers) - 1:
            raise ValueError("need exactly one u-layer fewer than convex layers")
        if self.layers[0].w_z is not None:
            raise ValueError("layer 0 must not have a gate matrix")
        if self.layers[-1].bias.shape[0] != 1:
            raise ValueError("the final layer must map to a scalar")

    @property
    def convex_dim(self) -> int:
        return self.layers[0].w_y.shape[1]

    @property
    def nonconvex_dim(self) -> int:
        return self.layers[0].w_u.shape[1]

    def arrays(self) -> Iterator[np.ndarray]:
        for w, b in self.u_layers:
            yield w
            yield b
        for layer in self.layers:
            for _, a in layer.named_arrays():
                yield a

    def gate_mask(self) -> Iterator[bool]:
        for _ in self.u_layers:
            yield False
            yield False
        for layer in self.layers:
            for name, _ in layer.named_arrays():
                yield name == "w_z"

    def _map(self, fn) -> "PicnnParams":
        u = [(fn(w), fn(b)) for w, b in self.u_layers]
        layers = [PicnnLayer(**{n: (None if getattr(l, n) is None else fn(getattr(l, n)))
                                for n in PicnnLayer._names})
                  for l in self.layers]
        return PicnnParams(u, layers, self.activation)

    def copy(self) -> "PicnnParams":
        return self._map(np.copy)

    def zeros_like(self) -> "PicnnParams":
        return self._map(np.zeros_like)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


Params = Union[IcnnParams, PicnnParams]


def flatten(params: Params) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()])


def unflatten(template: Params, vec: np.ndarray) -> Params:
    """Return a copy of ``template`` whose arrays are filled from ``vec``."""
    out = template.copy()
    i = 0
    for a in out.arrays():
        a[...] = vec[i:i + a.size].reshape(a.shape)
        i += a.size
    if i != vec.size:
        raise ValueError(f"vector has {vec.size} entries, params need {i}")
    return out


def gate_mask_vector(params: Params) -> np.ndarray:
    """Boolean mask over ``flatten(params)`` marking nonnegative gate entries."""
    return np.concatenate([np.full(a.size, g) for a, g in
                           zip(params.arrays(), params.gate_mask())])


def project_nonneg(params: Params) -> Params:
    """Clamp every gate weight at zero, in place, and return ``params``."""
    for a, is_gate in zip(params.arrays(), params.gate_mask()):
        if is_gate:
            np.maximum(a, 0.0, out=a)
    return params


# ---------------------------------------------------------------------------
# initialization


@dataclass(frozen=True)
class InitScheme:
    """How gate weights are drawn.

    ``kind="xavier_clamp"`` draws Glorot-uniform and clamps negatives to 0;
    ``kind="uniform"`` draws gates from ``U(lo, hi)``. Non-gate weights are
    always Glorot-uniform.
    """

    kind: str = "xavier_clamp"
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("xavier_clamp", "uniform"):
            raise ValueError(f"unknown init scheme {self.kind!r}")
        if self.lo > self.hi:
            raise ValueError("uniform init needs lo <= hi")

    @classmethod
    def uniform(cls, lo, hi):
        return cls("uniform", lo, hi)


def _xavier(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def _bias(rng, fan_in, n):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=n)


def _gate(rng, scheme, fan_out, fan_in):
    if scheme.kind == "uniform":
        return rng.uniform(scheme.lo, scheme.hi, size=(fan_out, fan_in))
    return np.maximum(_xavier(rng, fan_out, fan_in), 0.0)


def init_params(dims: Sequence[int], activation: str = "softplus",
                scheme: InitScheme = InitScheme(), seed=0) -> IcnnParams:
    """Random ICNN with layer widths ``dims = [d, h_1, ..., h_k, 1]``.

    Passing ``dims=[d, 1]`` gives a single affine head. A trailing 1 is
    appended when missing.
    """
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError("dims must contain the input width and at least one layer")
    if dims[-1] != 1:
        dims.append(1)
    rng = np.random.default_rng(seed)
    d = dims[0]
    layers = []
    for i, h in enumerate(dims[1:]):
        w_input = _xavier(rng, h, d)
        gate = None if i == 0 else _gate(rng, scheme, h, dims[i])
        fan_in = d if i == 0 else dims[i] + d
        layers.append(IcnnLayer(w_input, _bias(rng, fan_in, h), gate))
    return IcnnParams(layers, activation)


def single_layer_icnn(w_input, bias, activation="softplus") -> IcnnParams:
    """``G(y) = g(w_input y + bias)`` summed over units: one activated layer
    read out by a unit-gate, zero-bias affine head."""
    w_input = np.atleast_2d(np.asarray(w_input, dtype=np.float64))
    bias = np.atleast_1d(np.asarray(bias, dtype=np.float64))
    h, d = w_input.shape
    head = IcnnLayer(np.zeros((1, d)), np.zeros(1), np.ones((1, h)))
    return IcnnParams([IcnnLayer(w_input, bias), head], activation)


def init_picnn(convex_dim: int, nonconvex_dim: int, hidden: Sequence[int],
               u_hidden: Optional[Sequence[int]] = None,
               activation: str = "softplus",
               scheme: InitScheme = InitScheme(), seed=0) -> PicnnParams:
    """Random PICNN with convex-path widths ``hidden`` (head appended)."""
    hz = list(hidden) + [1]
    if u_hidden is None:
        u_hidden = list(hidden)
    hu = [nonconvex_dim] + list(u_hidden)
    if len(hu) != len(hz):
        raise ValueError("u_hidden must have the same length as hidden")
    rng = np.random.default_rng(seed)
    dy = convex_dim
    u_layers = [(_xavier(rng, hu[i + 1], hu[i]), _bias(rng, hu[i], hu[i + 1]))
                for i in range(len(hu) - 1)]
    layers = []
    for i, h in enumerate(hz):
        du = hu[i]
        kw = dict(
            w_y=_xavier(rng, h, dy), w_yu=_xavier(rng, dy, du),
            b_y=np.ones(dy), w_u=_xavier(rng, h, du),
            bias=_bias(rng, dy + du, h))
        if i > 0:
            kw.update(w_z=_gate(rng, scheme, h, hz[i - 1]),
                      w_zu=_xavier(rng, hz[i - 1], du), b_z=np.ones(hz[i - 1]))
        layers.append(PicnnLayer(**kw))
    return PicnnParams(u_layers, layers, activation)


# ---------------------------------------------------------------------------
# ICNN evaluation


def _icnn_tape(params: IcnnParams, Y: np.ndarray):
    """Pre-activations ``a_i`` for every layer (last one is the output)."""
    kind = params.activation
    pre = []
    z = None
    for layer in params.layers:
        a = Y @ layer.w_input.T + layer.bias
        if layer.w_gate is not None:
            a = a + z @ layer.w_gate.T
        pre.append(a)
        z = _act(kind, a)
    return pre


def icnn_forward(params: IcnnParams, y):
    Y, single = _as_batch(y, params.input_dim)
    out = _icnn_tape(params, Y)[-1][:, 0]
    return out[0] if single else out


def _icnn_adjoints(params, pre):
    """Reverse pass: returns ``s_i = dG/da_i`` for every layer."""
    kind = params.activation
    n = pre[0].shape[0]
    s = [None] * len(params.layers)
    s[-1] = np.ones((n, 1))
    for i in range(len(params.layers) - 1, 0, -1):
        dz = s[i] @ params.layers[i].w_gate
        s[i - 1] = dz * _dact(kind, pre[i - 1])
    return s


def icnn_grad(params: IcnnParams, y):
    """Input gradient of the ICNN."""
    Y, single = _as_batch(y, params.input_dim)
    pre = _icnn_tape(params, Y)
    s = _icnn_adjoints(params, pre)
    g = sum(si @ layer.w_input for si, layer in zip(s, params.layers))
    return g[0] if single else g


def _icnn_input_jacobians(params, pre):
    """``J_i = da_i/dy`` with shape (n, h_i, d) for every layer."""
    kind = params.activation
    J = []
    for i, layer in enumerate(params.layers):
        Ji = np.broadcast_to(layer.w_input, (pre[i].shape[0],) + layer.w_input.shape)
        if layer.w_gate is not None:
            dz = _dact(kind, pre[i - 1])[:, :, None] * J[-1]
            Ji = Ji + np.einsum("hk,nkd->nhd", layer.w_gate, dz)
        J.append(Ji)
    return J


def icnn_hessian(params: IcnnParams, y):
    """Input Hessian ``sum_i J_i^T diag(s_i g''(a_i)) J_i`` (softplus only)."""
    if params.activation != "softplus":
        raise UnsupportedActivationError("icnn_hessian requires softplus")
    Y, single = _as_batch(y, params.input_dim)
    pre = _icnn_tape(params, Y)
    s = _icnn_adjoints(params, pre)
    J = _icnn_input_jacobians(params, pre)
    d = params.input_dim
    H = np.zeros((Y.shape[0], d, d))
    # the head is affine: no curvature contribution from the last layer
    for i in range(len(params.layers) - 1):
        w = s[i + 1] @ params.layers[i + 1].w_gate * _ddact("softplus", pre[i])
        H += np.einsum("nhd,nh,nhe->nde", J[i], w, J[i])
    H = 0.5 * (H + np.swapaxes(H, 1, 2))
    return H[0] if single else H


def icnn_value_grad_hessian(params: IcnnParams, y, need_hessian=True):
    """Value, gradient and (optionally) Hessian from one shared forward pass."""
    Y, single = _as_batch(y, params.input_dim)
    pre = _icnn_tape(params, Y)
    s = _icnn_adjoints(params, pre)
    val = pre[-1][:, 0]
    g = sum(si @ layer.w_input for si, layer in zip(s, params.layers))
    H = None
    if need_hessian:
        if params.activation != "softplus":
            raise UnsupportedActivationError("Hessian requires softplus")
        J = _icnn_input_jacobians(params, pre)
        d = params.input_dim
        H = np.zeros((Y.shape[0], d, d))
        for i in range(len(params.layers) - 1):
            w = s[i + 1] @ params.layers[i + 1].w_gate * _ddact("softplus", pre[i])
            H += np.einsum("nhd,nh,nhe->nde", J[i], w, J[i])
        H = 0.5 * (H + np.swapaxes(H, 1, 2))
    if single:
        return val[0], g[0], (None if H is None else H[0])
    return val, g, H


def icnn_param_vjp_of_grad(params: IcnnParams, y, v) -> IcnnParams:
    """Gradient of ``v . grad_y G(y)`` with respect to every parameter.

    For a batch, per-sample directions ``v[n]`` are used and the results are
    summed over the batch. Uses a tangent-augmented forward pass followed by
    a hand-written reverse pass.
    """
    if params.activation != "softplus":
        raise UnsupportedActivationError("parameter VJP requires softplus")
    grads, _ = _icnn_tangent_reverse(params, y, v)
    return grads


def icnn_hvp(params: IcnnParams, y, v):
    """Hessian-vector product ``H(y) v`` without forming ``H``."""
    _, hv = _icnn_tangent_reverse(params, y, v)
    return hv


def _icnn_tangent_reverse(params, y, v):
    d = params.input_dim
    Y, single = _as_batch(y, d)
    V, _ = _as_batch(v, d, "v")
    if V.shape[0] != Y.shape[0]:
        V = np.broadcast_to(V, Y.shape)
    kind = "softplus"
    layers = params.layers
    pre = _icnn_tape(params, Y)
    # forward tangent: dot_a_i = d a_i / d eps along y + eps v
    dpre = []
    for i, layer in enumerate(layers):
        da = V @ layer.w_input.T
        if layer.w_gate is not None:
            da = da + (_dact(kind, pre[i - 1]) * dpre[-1]) @ layer.w_gate.T
        dpre.append(da)

    grads = params.zeros_like()
    n = Y.shape[0]
    P = np.ones((n, 1))        # adjoint of dot_a for the output layer
    Q = np.zeros((n, 1))       # adjoint of a
    hv = np.zeros_like(Y)
    for i in range(len(layers) - 1, -1, -1):
        layer, g = layers[i], grads.layers[i]
        g.w_input += P.T @ V + Q.T @ Y
        g.bias += Q.sum(axis=0)
        hv += Q @ layer.w_input
        if layer.w_gate is None:
            break
        sp = _dact(kind, pre[i - 1])
        zdot = sp * dpre[i - 1]
        z = _act(kind, pre[i - 1])
        g.w_gate += P.T @ zdot + Q.T @ z
        adj_zdot = P @ layer.w_gate
        adj_z = Q @ layer.w_gate
        P, Q = (adj_zdot * sp,
                adj_z * sp + adj_zdot * _ddact(kind, pre[i - 1]) * dpre[i - 1])
    return grads, (hv[0] if single else hv)


# ---------------------------------------------------------------------------
# PICNN evaluation


def _picnn_forward_tape(params: PicnnParams, X, Y, V=None):
    kind = params.activation
    U = [X]
    upre = []
    for w, b in params.u_layers:
        a = U[-1] @ w.T + b
        upre.append(a)
        U.append(_act(kind, a))
    tape = []
    z = zdot = None
    for i, layer in enumerate(params.layers):
        u = U[i]
        e = u @ layer.w_yu.T + layer.b_y
        a = (Y * e) @ layer.w_y.T + u @ layer.w_u.T + layer.bias
        adot = None if V is None else (V * e) @ layer.w_y.T
        c = cpre = None
        if layer.w_z is not None:
            cpre = u @ layer.w_zu.T + layer.b_z
            c = np.maximum(cpre, 0.0)
            a = a + (z * c) @ layer.w_z.T
            if V is not None:
                adot = adot + (zdot * c) @ layer.w_z.T
        tape.append(dict(a=a, adot=adot, e=e, c=c, cpre=cpre, z=z, zdot=zdot))
        if i < len(params.layers) - 1:
            z = _act(kind, a)
            if V is not None:
                zdot = _dact(kind, a) * adot
    return U, upre, tape


def picnn_forward(params: PicnnParams, x, y):
    X, single = _as_batch(x, params.nonconvex_dim, "x")
    Y, _ = _as_batch(y, params.convex_dim)
    _, _, tape = _picnn_forward_tape(params, X, Y)
    out = tape[-1]["a"][:, 0]
    return out[0] if single else out


def _picnn_reverse(params, X, Y, V, seed_tangent):
    """Reverse pass through the (tangent-augmented) PICNN.

    With ``seed_tangent=False`` this differentiates ``G`` itself; with True it
    differentiates ``v . grad_y G``. Returns parameter grads (summed over the
    batch) and the adjoints of ``x`` and ``y``.
    """
    kind = params.activation
    U, upre, tape = _picnn_forward_tape(params, X, Y, V)
    n = X.shape[0]
    grads = params.zeros_like()
    adj_u = [np.zeros_like(u) for u in U]
    adj_y = np.zeros_like(Y)
    P = np.ones((n, 1)) if seed_tangent else np.zeros((n, 1))
    Q = np.zeros((n, 1)) if seed_tangent else np.ones((n, 1))
    L = len(params.layers)
    for i in range(L - 1, -1, -1):
        layer, g, t = params.layers[i], grads.layers[i], tape[i]
        u, e = U[i], t["e"]
        adj_e = np.zeros_like(e)
        if seed_tangent:
            g.w_y += P.T @ (V * e)
            adj_e += (P @ layer.w_y) * V
        g.w_y += Q.T @ (Y * e)
        adj_e += (Q @ layer.w_y) * Y
        adj_y += (Q @ layer.w_y) * e
        g.w_u += Q.T @ u
        g.bias += Q.sum(axis=0)
        adj_u[i] += Q @ layer.w_u
        g.w_yu += adj_e.T @ u
        g.b_y += adj_e.sum(axis=0)
        adj_u[i] += adj_e @ layer.w_yu
        if layer.w_z is None:
            continue
        c, z, zdot = t["c"], t["z"], t["zdot"]
        adj_c = (Q @ layer.w_z) * z
        g.w_z += Q.T @ (z * c)
        adj_z = (Q @ layer.w_z) * c
        adj_zdot = np.zeros_like(z)
        if seed_tangent:
            g.w_z += P.T @ (zdot * c)
            adj_c += (P @ layer.w_z) * zdot
            adj_zdot = (P @ layer.w_z) * c
        r = adj_c * (t["cpre"] > 0)
        g.w_zu += r.T @ u
        g.b_z += r.sum(axis=0)
        adj_u[i] += r @ layer.w_zu
        ap, adotp = tape[i - 1]["a"], tape[i - 1]["adot"]
        sp = _dact(kind, ap)
        if seed_tangent:
            P, Q = adj_zdot * sp, adj_z * sp + adj_zdot * _ddact(kind, ap) * adotp
        else:
            P, Q = np.zeros_like(sp), adj_z * sp
        # u_i = act(W u_{i-1} + b): push adj_u[i] down before layer i-1 reads it
        w_prev, _ = params.u_layers[i - 1]
        r = adj_u[i] * _dact(kind, upre[i - 1])
        gw, gb = grads.u_layers[i - 1]
        gw += r.T @ U[i - 1]
        gb += r.sum(axis=0)
        adj_u[i - 1] += r @ w_prev
    return grads, adj_u[0], adj_y


def _picnn_inputs(params, x, y, v=None):
    X, single = _as_batch(x, params.nonconvex_dim, "x")
    Y, _ = _as_batch(y, params.convex_dim)
    if X.shape[0] != Y.shape[0]:
        raise ValueError("x and y batch sizes differ")
    V = None
    if v is not None:
        V, _ = _as_batch(v, params.convex_dim, "v")
        V = np.broadcast_to(V, Y.shape)
    return X, Y, V, single


def picnn_grad_y(params: PicnnParams, x, y):
    X, Y, _, single = _picnn_inputs(params, x, y)
    _, _, gy = _picnn_reverse(params, X, Y, None, seed_tangent=False)
    return gy[0] if single else gy


def picnn_hessian_y(params: PicnnParams, x, y):
    """Hessian in the convex variables (softplus only)."""
    if params.activation != "softplus":
        raise UnsupportedActivationError("picnn_hessian_y requires softplus")
    X, Y, _, single = _picnn_inputs(params, x, y)
    kind = params.activation
    U, _, tape = _picnn_forward_tape(params, X, Y)
    n, dy = Y.shape
    L = len(params.layers)
    # adjoints s_i = dG/da_i
    s = [None] * L
    s[-1] = np.ones((n, 1))
    for i in range(L - 1, 0, -1):
        s[i - 1] = (s[i] @ params.layers[i].w_z) * tape[i]["c"] * _dact(kind, tape[i - 1]["a"])
    H = np.zeros((n, dy, dy))
    J = None
    for i, layer in enumerate(params.layers):
        Ji = layer.w_y[None, :, :] * tape[i]["e"][:, None, :]
        if layer.w_z is not None:
            dz = (_dact(kind, tape[i - 1]["a"]) * tape[i]["c"])[:, :, None] * J
            Ji = Ji + np.einsum("hk,nkd->nhd", layer.w_z, dz)
        if i > 0:
            # curvature of z_i = act(a_{i-1}) weighted by dG/dz_i
            w = (s[i] @ layer.w_z) * tape[i]["c"] * _ddact(kind, tape[i - 1]["a"])
            H += np.einsum("nhd,nh,nhe->nde", J, w, J)
        J = Ji
    H = 0.5 * (H + np.swapaxes(H, 1, 2))
    return H[0] if single else H


def picnn_param_vjp_of_grad_y(params: PicnnParams, x, y, v) -> PicnnParams:
    """Gradient of ``v . grad_y G(x, y)`` with respect to every parameter."""
    if params.activation != "softplus":
        raise UnsupportedActivationError("parameter VJP requires softplus")
    X, Y, V, _ = _picnn_inputs(params, x, y, v)
    grads, _, _ = _picnn_reverse(params, X, Y, V, seed_tangent=True)
    return grads


def picnn_grad_x_vjp(params: PicnnParams, x, y, v):
    """Gradient of ``v . grad_y G(x, y)`` with respect to the non-convex input."""
    if params.activation != "softplus":
        raise UnsupportedActivationError("x-path VJP requires softplus")
    X, Y, V, single = _picnn_inputs(params, x, y, v)
    _, gx, _ = _picnn_reverse(params, X, Y, V, seed_tangent=True)
    return gx[0] if single else gx


def picnn_hvp_y(params: PicnnParams, x, y, v):
    X, Y, V, single = _picnn_inputs(params, x, y, v)
    _, _, hv = _picnn_reverse(params, X, Y, V, seed_tangent=True)
    return hv[0] if single else hv


# ---------------------------------------------------------------------------
# serialization


def _fmt(x) -> str:
    if isinstance(x, bool) or x is None:
        return json.dumps(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not np.isfinite(x):
            raise ValueError("cannot serialize non-finite float")
        return format(x, ".17g")
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, np.ndarray):
        return _fmt(x.tolist())
    if isinstance(x, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in x.items()) + "}"
    if isinstance(x, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    raise TypeError(f"cannot serialize {type(x).__name__}")


def dumps_json(obj) -> str:
    """JSON text with every float written at 17 significant digits."""
    return _fmt(obj)


def icnn_to_dict(params: IcnnParams) -> dict:
    layers = []
    for layer in params.layers:
        entry = {}
        if layer.w_gate is not None:
            entry["w_gate"] = layer.w_gate
        entry["w_input"] = layer.w_input
        entry["bias"] = layer.bias
        layers.append(entry)
    return {"version": SERIAL_VERSION, "activation": params.activation,
            "dims": params.dims, "layers": layers}


def icnn_from_dict(doc: dict) -> IcnnParams:
    if doc.get("version") != SERIAL_VERSION:
        raise ValueError(f"unsupported ICNN document version {doc.get('version')!r}")
    d = doc["dims"][0]
    layers = []
    for entry in doc["layers"]:
        w_input = np.asarray(entry["w_input"], dtype=np.float64).reshape(-1, d)
        gate = entry.get("w_gate")
        if gate is not None:
            gate = np.atleast_2d(np.asarray(gate, dtype=np.float64))
        layers.append(IcnnLayer(w_input, np.asarray(entry["bias"], dtype=np.float64), gate))
    params = IcnnParams(layers, doc["activation"])
    if params.dims != list(doc["dims"]):
        raise ValueError("dims do not match layer shapes")
    return params


def save_icnn(params: IcnnParams, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_json(icnn_to_dict(params)))


def load_icnn(path) -> IcnnParams:
    with open(path) as fh:
        return icnn_from_dict(json.load(fh))
