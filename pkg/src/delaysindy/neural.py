"""Small dense-network engine in float64 numpy.

Three things distinguish it from a generic MLP: (1) a fused forward pass that
carries a direction vector alongside the values, producing Jacobian-vector
products without ever materializing a Jacobian; (2) a reverse pass that
differentiates through BOTH the value and the tangent computation, which brings
in second derivatives of the activation; (3) everything is deterministic and
64-bit so gradients can be checked against central finite differences tightly.

Activations must be twice differentiable; ReLU is rejected because its second
derivative vanishes almost everywhere and the tangent-path gradients would be
silently wrong at the kink.
"""

import numpy as np
from dataclasses import dataclass, field


class NumericError(RuntimeError):
    """A layer produced a non-finite value."""

    def __init__(self, layer):
        self.layer = layer
        super().__init__(f"non-finite output at layer {layer}")


@dataclass
class Network:
    layer_dims: tuple
    weights: list
    biases: list
    activation: str = "sigmoid"
    seed: int | None = None


@dataclass
class TangentPair:
    value: np.ndarray
    tangent: np.ndarray

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)
        self.tangent = np.asarray(self.tangent, dtype=float)
        if self.value.shape != self.tangent.shape:
            raise ValueError("value and tangent must have equal shape")


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


_ACTIVATIONS = ("sigmoid", "tanh", "elu")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _act(name, a):
    if name == "sigmoid":
        return _sigmoid(a)
    if name == "tanh":
        return np.tanh(a)
    if name == "elu":
        return np.where(a > 0, a, np.exp(np.minimum(a, 0.0)) - 1.0)
    raise ValueError(f"unknown activation {name!r}; choose from {_ACTIVATIONS} "
                     "(a twice-differentiable nonlinearity is required)")


def _act_derivs(name, a, v):
    """First and second derivative, recovered from preact a and postact v."""
    if name == "sigmoid":
        s1 = v * (1.0 - v)
        return s1, s1 * (1.0 - 2.0 * v)
    if name == "tanh":
        s1 = 1.0 - v * v
        return s1, -2.0 * v * s1
    if name == "elu":
        ex = v + 1.0  # equals exp(a) on the negative branch
        s1 = np.where(a > 0, 1.0, ex)
        s2 = np.where(a > 0, 0.0, ex)
        return s1, s2


def init_network(layer_dims, activation="sigmoid", seed=0):
    """Xavier-uniform weights, zero biases, deterministic under seed."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"layer_dims needs >= 2 positive entries, got {layer_dims}")
    if activation not in _ACTIVATIONS:
        _act(activation, np.zeros(1))  # raises with the explanation
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (din + dout))
        weights.append(rng.uniform(-limit, limit, size=(dout, din)))
        biases.append(np.zeros(dout))
    return Network(layer_dims=dims, weights=weights, biases=biases,
                   activation=activation, seed=seed)


def _as_batch(x, d0):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != d0:
        raise ValueError(f"input dimension {X.shape[1]} != {d0}")
    return X, single


def forward(net, x):
    """Evaluate the network; cache holds every pre/post activation for backward."""
    X, single = _as_batch(x, net.layer_dims[0])
    L = len(net.weights)
    V = [X]
    A = []
    for l in range(L):
        a = V[-1] @ net.weights[l].T + net.biases[l]
        v = _act(net.activation, a) if l < L - 1 else a
        if not np.all(np.isfinite(v)):
            raise NumericError(l + 1)
        A.append(a)
        V.append(v)
    cache = {"A": A, "V": V, "single": single, "tangent": False}
    out = V[-1][0] if single else V[-1]
    return out, cache


def forward_with_tangent(net, pair):
    """Values plus the Jacobian-vector product J(x) @ xdot in one pass.

    The value path repeats forward() operation for operation, so the returned
    values are bitwise identical to a plain forward call.
    """
    X, single = _as_batch(pair.value, net.layer_dims[0])
    Xdot, _ = _as_batch(pair.tangent, net.layer_dims[0])
    if X.shape != Xdot.shape:
        raise ValueError("value and tangent batches must have equal shape")
    L = len(net.weights)
    V, U = [X], [Xdot]
    A, Adot = [], []
    for l in range(L):
        a = V[-1] @ net.weights[l].T + net.biases[l]
        adot = U[-1] @ net.weights[l].T
        if l < L - 1:
            v = _act(net.activation, a)
            s1, _ = _act_derivs(net.activation, a, v)
            u = s1 * adot
        else:
            v, u = a, adot
        if not np.all(np.isfinite(v)) or not np.all(np.isfinite(u)):
            raise NumericError(l + 1)
        A.append(a)
        Adot.append(adot)
        V.append(v)
        U.append(u)
    cache = {"A": A, "Adot": Adot, "V": V, "U": U, "single": single, "tangent": True}
    if single:
        return TangentPair(V[-1][0], U[-1][0]), cache
    return TangentPair(V[-1], U[-1]), cache


def backward(net, cache, output_adjoint, tangent_adjoint=None):
    """Reverse-mode accumulation over the fused value+tangent computation.

    output_adjoint is dL/d(value output); tangent_adjoint, when given, is
    dL/d(tangent output) and pulls in the activation second derivative.
    Returns (input_adjoint, input_tangent_adjoint, grads) with grads a list of
    (dW, db) per layer; input_tangent_adjoint is None without a tangent path.
    """
    L = len(net.weights)
    dV, _ = _as_batch(output_adjoint, net.layer_dims[-1])
    dU = None
    if tangent_adjoint is not None:
        if not cache["tangent"]:
            raise ValueError("tangent_adjoint given but cache has no tangent path")
        dU, _ = _as_batch(tangent_adjoint, net.layer_dims[-1])
    V = cache["V"]
    U = cache.get("U")
    grads = [None] * L
    for l in reversed(range(L)):
        if l == L - 1:
            dA, dAdot = dV, dU
        else:
            s1, s2 = _act_derivs(net.activation, cache["A"][l], V[l + 1])
            if dU is not None:
                dA = s1 * dV + s2 * cache["Adot"][l] * dU
                dAdot = s1 * dU
            else:
                dA = s1 * dV
                dAdot = None
        dW = dA.T @ V[l]
        db = dA.sum(axis=0)
        if dAdot is not None:
            dW = dW + dAdot.T @ U[l]
        grads[l] = (dW, db)
        dV = dA @ net.weights[l]
        dU = dAdot @ net.weights[l] if dAdot is not None else None
    if cache["single"]:
        dV = dV[0]
        dU = dU[0] if dU is not None else None
    if not cache["tangent"]:
        dU = None
    return dV, dU, grads


def network_params(net):
    """Flat parameter list [W1, b1, W2, b2, ...] sharing storage with the network."""
    out = []
    for W, b in zip(net.weights, net.biases):
        out.append(W)
        out.append(b)
    return out


def set_network_params(net, params):
    L = len(net.weights)
    if len(params) != 2 * L:
        raise ValueError("wrong parameter count")
    net.weights = [np.asarray(params[2 * l], dtype=float) for l in range(L)]
    net.biases = [np.asarray(params[2 * l + 1], dtype=float) for l in range(L)]


def grads_as_params(grads):
    """Match network_params ordering for a backward() grads list."""
    out = []
    for dW, db in grads:
        out.append(dW)
        out.append(db)
    return out


def init_adam(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params],
                     t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_update(params, grads, state):
    """One Adam step with bias correction; returns (new_params, new_state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads, and state must line up")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return new_p, AdamState(m=new_m, v=new_v, t=t, lr=state.lr,
                            beta1=b1, beta2=b2, eps=state.eps)


def save_network(net, path):
    """Text dump: manifest lines, then every parameter row-major, one per line.

    17 significant digits reproduce float64 exactly, so load is bit-exact.
    """
    with open(path, "w") as fh:
        fh.write("layer_dims," + ",".join(str(d) for d in net.layer_dims) + "\n")
        fh.write(f"activation,{net.activation}\n")
        fh.write(f"seed,{'' if net.seed is None else net.seed}\n")
        for W, b in zip(net.weights, net.biases):
            for val in W.ravel():
                fh.write("%.17g\n" % val)
            for val in b:
                fh.write("%.17g\n" % val)


def load_network(path):
    with open(path) as fh:
        dims = tuple(int(d) for d in fh.readline().strip().split(",")[1:])
        activation = fh.readline().strip().split(",")[1]
        seed_txt = fh.readline().strip().split(",")[1]
        seed = int(seed_txt) if seed_txt else None
        weights, biases = [], []
        for din, dout in zip(dims[:-1], dims[1:]):
            W = np.array([float(fh.readline()) for _ in range(dout * din)])
            weights.append(W.reshape(dout, din))
            biases.append(np.array([float(fh.readline()) for _ in range(dout)]))
    return Network(layer_dims=dims, weights=weights, biases=biases,
                   activation=activation, seed=seed)
