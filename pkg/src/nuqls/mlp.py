"""Minimal fully-connected network with exact parameter-Jacobian machinery.

Everything here is pure float64 numpy: forward evaluation, reverse-mode
Jacobians, and matrix-free JVP/VJP products for MLP-shaped graphs only.

Parameters live in a single flat vector.  The flattening order is fixed and
stable across versions: layer-major, weights before biases, i.e.

    [W1.ravel(), b1, W2.ravel(), b2, ...]

with ``W`` stored row-major as (fan_out, fan_in).  Reproducible seeds depend
on this order; do not change it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "MlpSpec",
    "init_params",
    "forward",
    "forward_batch",
    "jacobian",
    "jacobian_stack",
    "jvp",
    "jvp_batch",
    "vjp",
    "vjp_batch",
    "grad_from_output_grads",
    "unpack_params",
    "pack_params",
]


def _tanh_pair(x):
    t = np.tanh(x)
    return t, 1.0 - t * t


def _silu_pair(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s * (1.0 + x * (1.0 - s))


def _relu_pair(x):
    m = (x > 0).astype(np.float64)
    return x * m, m


def _identity_pair(x):
    return x, np.ones_like(x)


# name -> value-and-derivative of the activation; relu derivative at 0 is 0
ACTIVATIONS: dict[str, Callable] = {
    "tanh": _tanh_pair,
    "silu": _silu_pair,
    "relu": _relu_pair,
    "identity": _identity_pair,
}

SCALINGS = ("standard", "ntk")
INIT_SCHEMES = ("xavier_normal", "standard_normal")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully-connected network f: R^d -> R^c.

    ``scaling="ntk"`` multiplies each layer's pre-activation by
    1/sqrt(fan_in) at forward time; parameters are then naturally
    initialized with unit variance.  Hidden layers use ``activation``;
    the output layer is always linear.
    """

    input_dim: int
    output_dim: int
    hidden_widths: tuple[int, ...] = ()
    activation: str = "tanh"
    scaling: str = "standard"
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.scaling not in SCALINGS:
            raise ValueError(f"unknown scaling {self.scaling!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every layer, input to output."""
        dims = [self.input_dim, *self.hidden_widths, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        p = 0
        for fan_in, fan_out in self.layer_dims:
            p += fan_out * fan_in
            if self.bias:
                p += fan_out
        return p

    def layer_scale(self, fan_in: int) -> float:
        return 1.0 / np.sqrt(fan_in) if self.scaling == "ntk" else 1.0


def init_params(spec: MlpSpec, scheme: str = "xavier_normal", seed: int = 0) -> np.ndarray:
    """Draw an initial flat parameter vector, deterministic given seed.

    ``xavier_normal``: weights ~ N(0, 2/(fan_in+fan_out)), biases ~ N(0, 1).
    ``standard_normal``: everything ~ N(0, 1).
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.layer_dims:
        w = rng.standard_normal((fan_out, fan_in))
        if scheme == "xavier_normal":
            w *= np.sqrt(2.0 / (fan_in + fan_out))
        chunks.append(w.ravel())
        if spec.bias:
            chunks.append(rng.standard_normal(fan_out))
    return np.concatenate(chunks)


def unpack_params(spec: MlpSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Split a flat vector into per-layer (W, b) views (no copies)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.shape[0] != spec.param_count:
        raise ValueError(
            f"parameter vector has length {theta.shape}, expected ({spec.param_count},)"
        )
    layers = []
    off = 0
    for fan_in, fan_out in spec.layer_dims:
        w = theta[off : off + fan_out * fan_in].reshape(fan_out, fan_in)
        off += fan_out * fan_in
        b = None
        if spec.bias:
            b = theta[off : off + fan_out]
            off += fan_out
        layers.append((w, b))
    return layers


def pack_params(spec: MlpSpec, layers: list[tuple[np.ndarray, np.ndarray | None]]) -> np.ndarray:
    chunks = []
    for w, b in layers:
        chunks.append(np.asarray(w, dtype=np.float64).ravel())
        if spec.bias:
            chunks.append(np.asarray(b, dtype=np.float64).ravel())
    out = np.concatenate(chunks)
    if out.shape[0] != spec.param_count:
        raise ValueError("packed length does not match spec")
    return out


def _as_batch(spec: MlpSpec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"input has shape {x.shape}, expected (*, {spec.input_dim})")
    return x, single


def _forward_trace(spec, theta, X):
    """Forward pass keeping what autodiff needs, in one transcendental sweep.

    Returns (acts, derivs, out): acts[l] is the input to layer l+1
    (acts[0] = X), derivs[l] the activation derivative at hidden layer l+1's
    pre-activation, out the (n, c) network output.
    """
    layers = unpack_params(spec, theta)
    act_pair = ACTIVATIONS[spec.activation]
    acts = [X]
    derivs = []
    a = X
    for li, (w, b) in enumerate(layers):
        scale = spec.layer_scale(w.shape[1])
        pre = a @ w.T
        if b is not None:
            pre = pre + b
        pre = pre * scale
        if li < len(layers) - 1:
            a, d = act_pair(pre)
            acts.append(a)
            derivs.append(d)
    return acts, derivs, pre


def forward_batch(spec: MlpSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Evaluate f(theta, x) row-wise on an (n, d) input matrix -> (n, c)."""
    X, _ = _as_batch(spec, X)
    return _forward_trace(spec, theta, X)[2]


def forward(spec: MlpSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate f(theta, x) for a single input vector -> (c,)."""
    x, single = _as_batch(spec, x)
    if not single:
        raise ValueError("forward expects a single input vector; use forward_batch")
    return forward_batch(spec, theta, x)[0]


def grad_from_output_grads(spec: MlpSpec, theta: np.ndarray, X: np.ndarray,
                           G: np.ndarray) -> np.ndarray:
    """sum_i J(theta, x_i)^T G_i by one reverse pass over the batch.

    This is the training work-horse: with G = dLoss/df it returns the full
    parameter gradient without materializing any Jacobian.
    """
    X, _ = _as_batch(spec, X)
    G = np.asarray(G, dtype=np.float64)
    if G.shape != (X.shape[0], spec.output_dim):
        raise ValueError(f"output grads have shape {G.shape}, expected {(X.shape[0], spec.output_dim)}")
    layers = unpack_params(spec, theta)
    acts, derivs, _ = _forward_trace(spec, theta, X)

    out = np.empty(spec.param_count)
    off_end = spec.param_count
    delta = G  # dLoss/d(pre_L) before the layer scale
    for li in range(len(layers) - 1, -1, -1):
        w, b = layers[li]
        fan_out, fan_in = w.shape
        scale = spec.layer_scale(fan_in)
        d = delta * scale
        if b is not None:
            off_end -= fan_out
            np.sum(d, axis=0, out=out[off_end : off_end + fan_out])
        off_end -= fan_out * fan_in
        gw = out[off_end : off_end + fan_out * fan_in].reshape(fan_out, fan_in)
        np.matmul(d.T, acts[li], out=gw)
        if li > 0:
            delta = (d @ w) * derivs[li - 1]
    return out


def vjp(spec: MlpSpec, theta: np.ndarray, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """J(theta, x)^T u for a single input, without materializing J."""
    x, single = _as_batch(spec, x)
    if not single:
        raise ValueError("vjp expects a single input vector; use vjp_batch")
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (spec.output_dim,):
        raise ValueError(f"cotangent has shape {u.shape}, expected ({spec.output_dim},)")
    return grad_from_output_grads(spec, theta, x, u[None, :])


def jvp_batch(spec: MlpSpec, theta: np.ndarray, X: np.ndarray, v: np.ndarray) -> np.ndarray:
    """J(theta, x_i) v for every row of X -> (n, c), without materializing J."""
    X, _ = _as_batch(spec, X)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (spec.param_count,):
        raise ValueError(f"tangent has shape {v.shape}, expected ({spec.param_count},)")
    layers = unpack_params(spec, theta)
    tangents = unpack_params(spec, v)
    acts, derivs, _ = _forward_trace(spec, theta, X)

    da = np.zeros_like(X)
    for li, ((w, b), (dw, db)) in enumerate(zip(layers, tangents)):
        scale = spec.layer_scale(w.shape[1])
        dpre = acts[li] @ dw.T + da @ w.T
        if db is not None:
            dpre = dpre + db
        dpre = dpre * scale
        if li < len(layers) - 1:
            da = derivs[li] * dpre
    return dpre


def jvp(spec: MlpSpec, theta: np.ndarray, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """J(theta, x) v for a single input -> (c,)."""
    x, single = _as_batch(spec, x)
    if not single:
        raise ValueError("jvp expects a single input vector; use jvp_batch")
    return jvp_batch(spec, theta, x, v)[0]


def _per_sample_grads(spec, layers, acts, derivs, G):
    """Per-sample parameter gradients (n, p) for output cotangents G (n, c)."""
    n = acts[0].shape[0]
    out = np.empty((n, spec.param_count))
    off_end = spec.param_count
    delta = G
    # walk layers from output to input, filling the flat slots right-to-left
    for li in range(len(layers) - 1, -1, -1):
        w, b = layers[li]
        fan_out, fan_in = w.shape
        scale = spec.layer_scale(fan_in)
        d = delta * scale
        if b is not None:
            off_end -= fan_out
            out[:, off_end : off_end + fan_out] = d
        off_end -= fan_out * fan_in
        gw = out[:, off_end : off_end + fan_out * fan_in].reshape(n, fan_out, fan_in)
        np.multiply(d[:, :, None], acts[li][:, None, :], out=gw)
        if li > 0:
            delta = (d @ w) * derivs[li - 1]
    assert off_end == 0
    return out


def vjp_batch(spec: MlpSpec, theta: np.ndarray, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Row-wise VJPs: row i of the result is J(theta, x_i)^T U_i -> (n, p)."""
    X, _ = _as_batch(spec, X)
    U = np.asarray(U, dtype=np.float64)
    if U.shape != (X.shape[0], spec.output_dim):
        raise ValueError(f"cotangents have shape {U.shape}, expected {(X.shape[0], spec.output_dim)}")
    layers = unpack_params(spec, theta)
    acts, derivs, _ = _forward_trace(spec, theta, X)
    return _per_sample_grads(spec, layers, acts, derivs, U)


def jacobian(spec: MlpSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Exact reverse-mode Jacobian J(theta, x) of shape (c, p).

    Row k is the gradient of output k with respect to the flat parameters.
    """
    x, single = _as_batch(spec, x)
    if not single:
        raise ValueError("jacobian expects a single input vector; use jacobian_stack")
    return jacobian_stack(spec, theta, x).reshape(spec.output_dim, spec.param_count)


def jacobian_stack(spec: MlpSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Stacked Jacobian over a batch: (n*c, p), rows ordered sample-major.

    Row i*c + k is the gradient of output k at input x_i.
    """
    X, _ = _as_batch(spec, X)
    n, c, p = X.shape[0], spec.output_dim, spec.param_count
    layers = unpack_params(spec, theta)
    acts, derivs, _ = _forward_trace(spec, theta, X)
    out = np.empty((n * c, p))
    ek = np.zeros((n, c))
    for k in range(c):
        ek[:, :] = 0.0
        ek[:, k] = 1.0
        out[k::c, :] = _per_sample_grads(spec, layers, acts, derivs, ek)
    return out
