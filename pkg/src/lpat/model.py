"""Dense/dense/LSTM/dense health-degree classifier with perturbation injection points.

The stack is fixed: two identity-activation dense layers applied per time step,
an LSTM over the window, and a final dense layer on the last hidden state,
softmax on top. Perturbations can be injected at five named points:

    0  raw input                      (w, n)   per time step
    1  after dense-1                  (w, hidden1)
    2  after dense-2                  (w, hidden2)
    3  final LSTM hidden state        (lstm_units,)
    4  pre-softmax logits             (classes,)

Forward caches every injection-point activation; backward returns exact
reverse-mode gradients (full backpropagation through time) for all parameters
and for the activation at every injection point. All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit as sigmoid

POINT_INPUT = 0
POINT_DENSE1 = 1
POINT_DENSE2 = 2
POINT_LSTM = 3
POINT_LOGITS = 4
ALL_POINTS = (0, 1, 2, 3, 4)
SEQUENCE_POINTS = (0, 1, 2)

GATE_ORDER = ("i", "f", "o", "j")

# A PerturbationSet maps injection point -> tensor shaped like that point's
# activation. An empty dict means an unperturbed forward pass.
PerturbationSet = dict


class ShapeError(ValueError):
    """Input or perturbation tensor does not match the layer geometry."""


@dataclass
class DenseParams:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]


@dataclass
class LstmParams:
    """Gate weights stacked row-wise in the order i, f, o, j.

    W is (4q, d), U is (4q, q), b is (4q,). Per-gate blocks are exposed via
    ``gate`` so the four (W_a, U_a, b_a) triples remain addressable.
    """

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    @property
    def units(self) -> int:
        return self.U.shape[1]

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = GATE_ORDER.index(name)
        q = self.units
        sl = slice(k * q, (k + 1) * q)
        return self.W[sl], self.U[sl], self.b[sl]


@dataclass
class Network:
    dense1: DenseParams
    dense2: DenseParams
    lstm: LstmParams
    dense3: DenseParams

    @property
    def dims(self) -> dict[str, int]:
        return {
            "n_attrs": self.dense1.in_dim,
            "hidden1": self.dense1.out_dim,
            "hidden2": self.dense2.out_dim,
            "lstm_units": self.lstm.units,
            "classes": self.dense3.out_dim,
        }

    def params(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed by a stable flat name."""
        return {
            "dense1.W": self.dense1.W, "dense1.b": self.dense1.b,
            "dense2.W": self.dense2.W, "dense2.b": self.dense2.b,
            "lstm.W": self.lstm.W, "lstm.U": self.lstm.U, "lstm.b": self.lstm.b,
            "dense3.W": self.dense3.W, "dense3.b": self.dense3.b,
        }

    def copy(self) -> "Network":
        return Network(
            dense1=DenseParams(self.dense1.W.copy(), self.dense1.b.copy()),
            dense2=DenseParams(self.dense2.W.copy(), self.dense2.b.copy()),
            lstm=LstmParams(self.lstm.W.copy(), self.lstm.U.copy(), self.lstm.b.copy()),
            dense3=DenseParams(self.dense3.W.copy(), self.dense3.b.copy()),
        )


def init_network(n_attrs: int, hidden1: int = 128, hidden2: int = 128,
                 lstm_units: int = 200, classes: int = 3, seed: int = 0) -> Network:
    """Seed-deterministic init: uniform[-s, s] with s = sqrt(6/(in+out)) for
    weight matrices, zero biases except the LSTM forget gate bias at 1."""
    rng = np.random.default_rng(seed)

    def uni(out_dim, in_dim, shape=None):
        s = np.sqrt(6.0 / (in_dim + out_dim))
        return rng.uniform(-s, s, size=shape or (out_dim, in_dim))

    q = lstm_units
    b_lstm = np.zeros(4 * q)
    b_lstm[q:2 * q] = 1.0  # forget gate block
    return Network(
        dense1=DenseParams(uni(hidden1, n_attrs), np.zeros(hidden1)),
        dense2=DenseParams(uni(hidden2, hidden1), np.zeros(hidden2)),
        lstm=LstmParams(
            W=uni(q, hidden2, shape=(4 * q, hidden2)),
            U=uni(q, q, shape=(4 * q, q)),
            b=b_lstm,
        ),
        dense3=DenseParams(uni(classes, q), np.zeros(classes)),
    )


@dataclass
class ForwardCache:
    """Everything backward needs: per-point activations (post-perturbation,
    i.e. exactly what fed the next layer), LSTM internals per step, and the
    output distribution. Arrays carry a leading batch dimension."""

    xhat: dict[int, np.ndarray]
    gates: np.ndarray   # (B, w, 4q) activated gate values i,f,o,j
    c: np.ndarray       # (B, w, q) cell states
    tanh_c: np.ndarray  # (B, w, q)
    h: np.ndarray       # (B, w, q) hidden states
    probs: np.ndarray   # (B, classes)

    @property
    def batch_size(self) -> int:
        return self.probs.shape[0]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dense_forward(x: np.ndarray, params: DenseParams, activation: str = "identity") -> np.ndarray:
    """y = Wx + b. Only the identity activation exists in this stack."""
    if activation != "identity":
        raise ValueError(f"unsupported activation: {activation}")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"dense input has {x.shape[-1]} features, expected {params.in_dim}")
    return x @ params.W.T + params.b


def lstm_step(x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray,
              params: LstmParams) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM cell update.

    a_hat = W x_t + U h_prev + b per gate; i, f, o pass through the sigmoid,
    j through tanh; c_t = i*j + f*c_prev; h_t = o*tanh(c_t).
    """
    x_t = np.asarray(x_t, dtype=float)
    h_prev = np.asarray(h_prev, dtype=float)
    c_prev = np.asarray(c_prev, dtype=float)
    q = params.units
    if x_t.shape[-1] != params.in_dim:
        raise ShapeError(f"lstm input has {x_t.shape[-1]} features, expected {params.in_dim}")
    if h_prev.shape[-1] != q or c_prev.shape[-1] != q:
        raise ShapeError(f"lstm state width must be {q}")
    a = x_t @ params.W.T + h_prev @ params.U.T + params.b
    i_t = sigmoid(a[..., :q])
    f_t = sigmoid(a[..., q:2 * q])
    o_t = sigmoid(a[..., 2 * q:3 * q])
    j_t = np.tanh(a[..., 3 * q:])
    c_t = i_t * j_t + f_t * c_prev
    h_t = o_t * np.tanh(c_t)
    return h_t, c_t


def _lstm_forward(p: LstmParams, x: np.ndarray):
    """Run the LSTM over (B, w, d) inputs; returns per-step internals."""
    B, w, _ = x.shape
    q = p.units
    pre = x @ p.W.T + p.b  # input contribution for every step at once
    gates = np.empty((B, w, 4 * q))
    c = np.empty((B, w, q))
    tanh_c = np.empty((B, w, q))
    h = np.empty((B, w, q))
    h_prev = np.zeros((B, q))
    c_prev = np.zeros((B, q))
    for t in range(w):
        a = pre[:, t] + h_prev @ p.U.T
        g = np.empty((B, 4 * q))
        g[:, :3 * q] = sigmoid(a[:, :3 * q])
        g[:, 3 * q:] = np.tanh(a[:, 3 * q:])
        c_t = g[:, :q] * g[:, 3 * q:] + g[:, q:2 * q] * c_prev
        tc = np.tanh(c_t)
        h_t = g[:, 2 * q:3 * q] * tc
        gates[:, t] = g
        c[:, t] = c_t
        tanh_c[:, t] = tc
        h[:, t] = h_t
        h_prev, c_prev = h_t, c_t
    return gates, c, tanh_c, h


def _check_pert_shapes(perts: dict, shapes: dict[int, tuple]) -> None:
    for m, r in perts.items():
        if m not in shapes:
            raise ShapeError(f"unknown injection point {m}")
        if np.shape(r) != shapes[m]:
            raise ShapeError(
                f"perturbation at point {m} has shape {np.shape(r)}, expected {shapes[m]}")


def forward_batch(net: Network, X: np.ndarray,
                  perts: Optional[dict] = None) -> ForwardCache:
    """Full forward over a (B, w, n) batch with optional perturbations.

    Perturbation tensors carry the batch dimension: point m in {0,1,2} is
    (B, w, dim_m), point 3 is (B, lstm_units), point 4 is (B, classes).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 3:
        raise ShapeError(f"expected (batch, window, attrs) input, got shape {X.shape}")
    B, w, n = X.shape
    d = net.dims
    if n != d["n_attrs"]:
        raise ShapeError(f"input has {n} attributes, network expects {d['n_attrs']}")
    perts = perts or {}
    _check_pert_shapes(perts, {
        0: (B, w, n), 1: (B, w, d["hidden1"]), 2: (B, w, d["hidden2"]),
        3: (B, d["lstm_units"]), 4: (B, d["classes"]),
    })

    xhat0 = X + perts[0] if 0 in perts else X
    a1 = xhat0 @ net.dense1.W.T + net.dense1.b
    xhat1 = a1 + perts[1] if 1 in perts else a1
    a2 = xhat1 @ net.dense2.W.T + net.dense2.b
    xhat2 = a2 + perts[2] if 2 in perts else a2
    gates, c, tanh_c, h = _lstm_forward(net.lstm, xhat2)
    hw = h[:, -1]
    xhat3 = hw + perts[3] if 3 in perts else hw
    z = xhat3 @ net.dense3.W.T + net.dense3.b
    xhat4 = z + perts[4] if 4 in perts else z
    return ForwardCache(
        xhat={0: xhat0, 1: xhat1, 2: xhat2, 3: xhat3, 4: xhat4},
        gates=gates, c=c, tanh_c=tanh_c, h=h, probs=softmax(xhat4),
    )


def forward(net: Network, features: np.ndarray,
            perturbations: Optional[dict] = None) -> ForwardCache:
    """Forward one (w, n) sample; returns a batch-of-one cache."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        raise ShapeError(f"expected a (window, attrs) sample, got shape {features.shape}")
    perts = None
    if perturbations:
        perts = {m: np.asarray(r, dtype=float)[None, ...] for m, r in perturbations.items()}
    return forward_batch(net, features[None, ...], perts)


def resume_forward(net: Network, base: ForwardCache, point: int,
                   r: np.ndarray) -> ForwardCache:
    """Forward pass that reuses ``base`` activations below ``point`` and adds
    perturbation ``r`` (batched) only at that point.

    Valid when ``base`` was computed on the same network and inputs; the
    returned cache shares the untouched lower arrays with ``base``.
    """
    xhat = dict(base.xhat)
    xhat[point] = base.xhat[point] + r
    gates, c, tanh_c, h = base.gates, base.c, base.tanh_c, base.h
    if point == 0:
        xhat[1] = xhat[0] @ net.dense1.W.T + net.dense1.b
    if point <= 1:
        xhat[2] = xhat[1] @ net.dense2.W.T + net.dense2.b
    if point <= 2:
        gates, c, tanh_c, h = _lstm_forward(net.lstm, xhat[2])
        xhat[3] = h[:, -1]
    if point <= 3:
        xhat[4] = xhat[3] @ net.dense3.W.T + net.dense3.b
    return ForwardCache(xhat=xhat, gates=gates, c=c, tanh_c=tanh_c, h=h,
                        probs=softmax(xhat[4]))


def _lstm_backward(p: LstmParams, cache: ForwardCache, dh_last: np.ndarray,
                   want_param_grads: bool):
    """BPTT from a gradient on the final hidden state.

    Only h_w feeds the layers above, so dh at earlier steps comes purely from
    the recurrence. c_0 = h_0 = 0, hence the forget-gate path and the
    recurrent weights contribute nothing before t = 0.
    """
    B, w, q = cache.h.shape
    x = cache.xhat[2]
    if want_param_grads:
        dW = np.zeros_like(p.W)
        dU = np.zeros_like(p.U)
        db = np.zeros_like(p.b)
    dx = np.empty_like(x)
    dh = dh_last
    dc = np.zeros((B, q))
    for t in reversed(range(w)):
        g = cache.gates[:, t]
        i_t, f_t, o_t, j_t = g[:, :q], g[:, q:2 * q], g[:, 2 * q:3 * q], g[:, 3 * q:]
        tc = cache.tanh_c[:, t]
        do = dh * tc
        dc = dc + dh * o_t * (1.0 - tc * tc)
        da = np.empty((B, 4 * q))
        da[:, :q] = dc * j_t * i_t * (1.0 - i_t)
        if t > 0:
            da[:, q:2 * q] = dc * cache.c[:, t - 1] * f_t * (1.0 - f_t)
        else:
            da[:, q:2 * q] = 0.0
        da[:, 2 * q:3 * q] = do * o_t * (1.0 - o_t)
        da[:, 3 * q:] = dc * i_t * (1.0 - j_t * j_t)
        if want_param_grads:
            dW += da.T @ x[:, t]
            if t > 0:
                dU += da.T @ cache.h[:, t - 1]
            db += da.sum(axis=0)
        dx[:, t] = da @ p.W
        dh = da @ p.U
        dc = dc * f_t
    if want_param_grads:
        return dx, (dW, dU, db)
    return dx, None


def backward_batch(net: Network, cache: ForwardCache, dlogits: np.ndarray, *,
                   want_param_grads: bool = True, down_to: int = 0):
    """Exact gradients of a scalar objective given its logit gradient.

    ``dlogits[b]`` is d(objective)/d(logits of sample b); parameter gradients
    sum over the batch, activation gradients stay per sample. ``down_to``
    stops the sweep once the gradient at that injection point is known
    (parameter gradients then require down_to == 0).
    """
    if want_param_grads and down_to != 0:
        raise ValueError("parameter gradients require a full sweep (down_to=0)")
    dlogits = np.asarray(dlogits, dtype=float)
    grads: Optional[dict[str, np.ndarray]] = {} if want_param_grads else None
    act: dict[int, np.ndarray] = {4: dlogits}
    if down_to >= 4:
        return grads, act

    if want_param_grads:
        grads["dense3.W"] = dlogits.T @ cache.xhat[3]
        grads["dense3.b"] = dlogits.sum(axis=0)
    g3 = dlogits @ net.dense3.W
    act[3] = g3
    if down_to >= 3:
        return grads, act

    dx2, lstm_grads = _lstm_backward(net.lstm, cache, g3, want_param_grads)
    if want_param_grads:
        grads["lstm.W"], grads["lstm.U"], grads["lstm.b"] = lstm_grads
    act[2] = dx2
    if down_to >= 2:
        return grads, act

    if want_param_grads:
        grads["dense2.W"] = np.einsum("bto,bti->oi", dx2, cache.xhat[1])
        grads["dense2.b"] = dx2.sum(axis=(0, 1))
    g1 = dx2 @ net.dense2.W
    act[1] = g1
    if down_to >= 1:
        return grads, act

    if want_param_grads:
        grads["dense1.W"] = np.einsum("bto,bti->oi", g1, cache.xhat[0])
        grads["dense1.b"] = g1.sum(axis=(0, 1))
    act[0] = g1 @ net.dense1.W
    return grads, act


def backward(net: Network, cache: ForwardCache, dlogits: np.ndarray):
    """Single-sample wrapper: (w, n) caches from ``forward``; dlogits (classes,).

    Returns (parameter gradients, {point: activation gradient}) with the batch
    dimension squeezed out of the activation gradients.
    """
    grads, act = backward_batch(net, cache, np.asarray(dlogits, dtype=float)[None, :])
    return grads, {m: g[0] for m, g in act.items()}


def nll_dlogits(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of -log p(label) w.r.t. logits: softmax minus one-hot."""
    probs = np.atleast_2d(probs)
    out = probs.copy()
    out[np.arange(out.shape[0]), np.asarray(labels, dtype=int)] -= 1.0
    return out


def loglik_dlogits(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of +log p(label) w.r.t. logits: one-hot minus softmax."""
    return -nll_dlogits(probs, labels)


def kl_dlogits(p_ref: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Gradient of KL(p_ref || softmax(z)) w.r.t. z, with p_ref constant."""
    return np.atleast_2d(probs) - np.atleast_2d(p_ref)
