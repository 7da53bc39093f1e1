"""Small feedforward network engine on numpy.

Parameters live in one flat float64 vector per network; per-layer weight
matrices (out x in) and bias vectors are views into it, which keeps
optimizer updates and warm starts single-array operations.  Supports tanh
and GroupSort activations, reverse-mode gradients with respect to the
parameters, Jacobians with respect to the input, and the mixed case needed
by schemes that differentiate a loss containing the network's own input
gradient.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.random import Generator, Philox

TANH = "tanh"
GROUPSORT = "groupsort"


@dataclass(frozen=True)
class NetworkArchitecture:
    input_dim: int
    hidden_sizes: Tuple[int, ...]
    output_dim: int
    activation: str = TANH
    grouping: int = 0  # group size for groupsort

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input and output dimensions must be >= 1")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be >= 1")
        if self.activation == GROUPSORT:
            if self.grouping < 2:
                raise ValueError("groupsort needs grouping size >= 2")
            for h in self.hidden_sizes:
                if h % self.grouping != 0:
                    raise ValueError(
                        f"grouping size {self.grouping} does not divide hidden size {h}"
                    )
        elif self.activation != TANH:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        """(out, in) per affine layer, hidden layers first."""
        dims = [self.input_dim, *self.hidden_sizes, self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)


class NetworkParams:
    """Weights and biases of one network, stored flat.

    ``layers`` exposes the (weight, bias) views in order; mutating them
    mutates the flat vector and vice versa.  The same container is used
    for parameter-shaped gradient collections.
    """

    __slots__ = ("arch", "flat", "_views")

    def __init__(self, arch: NetworkArchitecture, flat: Optional[np.ndarray] = None):
        self.arch = arch
        if flat is None:
            flat = np.zeros(arch.n_params)
        else:
            flat = np.asarray(flat, dtype=np.float64)
            if flat.shape != (arch.n_params,):
                raise ValueError(
                    f"flat parameter vector must have length {arch.n_params}, got {flat.shape}"
                )
        self.flat = flat
        views = []
        offset = 0
        for out, inp in arch.layer_shapes:
            w = self.flat[offset : offset + out * inp].reshape(out, inp)
            offset += out * inp
            b = self.flat[offset : offset + out]
            offset += out
            views.append((w, b))
        self._views = views

    @property
    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return self._views

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, self.flat.copy())

    def param_name(self, flat_index: int) -> str:
        """Human-readable location of one flat coordinate."""
        offset = 0
        for li, (out, inp) in enumerate(self.arch.layer_shapes):
            if flat_index < offset + out * inp:
                return f"layer {li} weights"
            offset += out * inp
            if flat_index < offset + out:
                return f"layer {li} bias"
            offset += out
        return "out of range"


def init_params(arch: NetworkArchitecture, seed: int) -> NetworkParams:
    """Glorot-uniform weights on [-sqrt(6/(fan_in+fan_out)), +..], zero biases."""
    rng = Generator(Philox(key=seed))
    params = NetworkParams(arch)
    for w, b in params.layers:
        out, inp = w.shape
        bound = np.sqrt(6.0 / (inp + out))
        w[...] = rng.uniform(-bound, bound, size=(out, inp))
        b[...] = 0.0
    return params


# --- activations ----------------------------------------------------------
#
# Each activation provides:
#   value(z)                 -> a, ctx
#   pullback(ctx, v)         -> (da/dz)^T v        (cotangent transport)
#   curvature(ctx, sbar, q)  -> z-adjoint of the pullback's z-dependence,
#                               i.e. sbar * q * rho''(z) elementwise; zero
#                               for piecewise-linear activations.


def _tanh_value(z):
    a = np.tanh(z)
    return a, a


def _tanh_pullback(a, v):
    return v * (1.0 - a * a)


def _tanh_curvature(a, sbar, q):
    return sbar * q * (-2.0 * a * (1.0 - a * a))


def groupsort_apply(v: np.ndarray, grouping: int) -> np.ndarray:
    """Sort each contiguous block of ``grouping`` entries in decreasing order."""
    v = np.asarray(v, dtype=np.float64)
    m = v.shape[-1]
    if m % grouping != 0:
        raise ValueError(f"grouping size {grouping} does not divide vector length {m}")
    blocks = v.reshape(*v.shape[:-1], m // grouping, grouping)
    out = -np.sort(-blocks, axis=-1, kind="stable")
    return out.reshape(v.shape)


def _groupsort_value(z, grouping):
    m = z.shape[-1]
    blocks = z.reshape(*z.shape[:-1], m // grouping, grouping)
    idx = np.argsort(-blocks, axis=-1, kind="stable")
    a = np.take_along_axis(blocks, idx, axis=-1).reshape(z.shape)
    return a, (idx, z.shape, grouping)


def _groupsort_pullback(ctx, v):
    idx, shape, grouping = ctx
    m = shape[-1]
    vb = v.reshape(*shape[:-1], m // grouping, grouping)
    out = np.empty_like(vb)
    np.put_along_axis(out, idx, vb, axis=-1)
    return out.reshape(shape)


def _groupsort_pushforward(ctx, v):
    idx, shape, grouping = ctx
    m = shape[-1]
    vb = v.reshape(*shape[:-1], m // grouping, grouping)
    out = np.take_along_axis(vb, idx, axis=-1)
    return out.reshape(shape)


class _Act:
    """Dispatch helper bound to one architecture."""

    def __init__(self, arch: NetworkArchitecture):
        self.kind = arch.activation
        self.grouping = arch.grouping

    def value(self, z):
        if self.kind == TANH:
            return _tanh_value(z)
        return _groupsort_value(z, self.grouping)

    def pullback(self, ctx, v):
        if self.kind == TANH:
            return _tanh_pullback(ctx, v)
        return _groupsort_pullback(ctx, v)

    def pushforward(self, ctx, v):
        # (da/dz) v; for tanh the Jacobian is symmetric (diagonal).
        if self.kind == TANH:
            return _tanh_pullback(ctx, v)
        return _groupsort_pushforward(ctx, v)

    def curvature(self, ctx, sbar, q):
        if self.kind == TANH:
            return _tanh_curvature(ctx, sbar, q)
        return 0.0


# --- forward / backward ----------------------------------------------------


def _promote(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[-1] != dim:
        raise ValueError(f"input must have {dim} entries, got shape {x.shape}")
    return x, single


def forward(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network; x may be one vector or a (batch, in) array."""
    x, single = _promote(x, params.arch.input_dim)
    act = _Act(params.arch)
    layers = params.layers
    a = x
    for li, (w, b) in enumerate(layers):
        z = a @ w.T + b
        if li < len(layers) - 1:
            a, _ = act.value(z)
        else:
            a = z
    return a[0] if single else a


def _forward_cached(params: NetworkParams, x: np.ndarray):
    """Forward pass keeping layer inputs and activation contexts."""
    act = _Act(params.arch)
    layers = params.layers
    a = x
    inputs = [a]
    ctxs = []
    for li, (w, b) in enumerate(layers):
        z = a @ w.T + b
        if li < len(layers) - 1:
            a, ctx = act.value(z)
            inputs.append(a)
            ctxs.append(ctx)
        else:
            a = z
    return a, (inputs, ctxs)


def _backward(params: NetworkParams, cache, upstream: np.ndarray) -> np.ndarray:
    """Accumulate d(sum_k upstream_k . y_k)/d(theta) into a flat vector."""
    inputs, ctxs = cache
    act = _Act(params.arch)
    layers = params.layers
    grad = NetworkParams(params.arch)
    gviews = grad.layers
    delta = upstream
    for li in range(len(layers) - 1, -1, -1):
        gw, gb = gviews[li]
        gw += delta.T @ inputs[li]
        gb += delta.sum(axis=0)
        if li > 0:
            delta = act.pullback(ctxs[li - 1], delta @ layers[li][0])
    return grad.flat


def grad_params(params: NetworkParams, x: np.ndarray, upstream: np.ndarray) -> NetworkParams:
    """Gradient of upstream . forward(params, x) with respect to the parameters.

    Batched inputs sum the per-sample gradients.
    """
    x, single = _promote(x, params.arch.input_dim)
    upstream = np.asarray(upstream, dtype=np.float64)
    if single:
        upstream = upstream[None, :]
    if upstream.shape != (x.shape[0], params.arch.output_dim):
        raise ValueError(
            f"upstream must have shape {(x.shape[0], params.arch.output_dim)}, got {upstream.shape}"
        )
    _, cache = _forward_cached(params, x)
    return NetworkParams(params.arch, _backward(params, cache, upstream))


def _input_grad_rows(params: NetworkParams, cache) -> np.ndarray:
    """Jacobian dy/dx from a cached forward pass, shape (batch, out, in)."""
    inputs, ctxs = cache
    act = _Act(params.arch)
    layers = params.layers
    batch = inputs[0].shape[0]
    out_dim = params.arch.output_dim
    rows = []
    for r in range(out_dim):
        q = np.broadcast_to(layers[-1][0][r], (batch, layers[-1][0].shape[1])).copy()
        for li in range(len(layers) - 2, -1, -1):
            s = act.pullback(ctxs[li], q)
            q = s @ layers[li][0]
        rows.append(q)
    return np.stack(rows, axis=1)


def grad_input(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Jacobian of forward with respect to x: (out, in), batched (batch, out, in)."""
    x, single = _promote(x, params.arch.input_dim)
    _, cache = _forward_cached(params, x)
    jac = _input_grad_rows(params, cache)
    return jac[0] if single else jac


def _forward_igrad_cached(params: NetworkParams, x: np.ndarray):
    """Forward pass of a scalar-output network together with its input gradient.

    Returns (y, g, cache) with y (batch, 1), g (batch, in); the cache holds
    the intermediates of both sweeps for the mixed backward pass.
    """
    if params.arch.output_dim != 1:
        raise ValueError("input-gradient training path requires scalar output")
    y, (inputs, ctxs) = _forward_cached(params, x)
    act = _Act(params.arch)
    layers = params.layers
    batch = x.shape[0]
    L = len(layers) - 1
    q = np.broadcast_to(layers[-1][0][0], (batch, layers[-1][0].shape[1])).copy()
    qs = [None] * (L + 1)  # qs[l]: cotangent entering layer l's activation
    ss = [None] * L
    qs[L] = q
    for li in range(L - 1, -1, -1):
        s = act.pullback(ctxs[li], qs[li + 1])
        ss[li] = s
        qs[li] = s @ layers[li][0]
    g = qs[0]
    return y, g, (inputs, ctxs, qs, ss)


def _backward_igrad(
    params: NetworkParams,
    cache,
    upstream_y: Optional[np.ndarray],
    upstream_g: Optional[np.ndarray],
) -> np.ndarray:
    """Parameter gradient of sum_k [u_y,k y_k + u_g,k . grad_x y_k]."""
    inputs, ctxs, qs, ss = cache
    act = _Act(params.arch)
    layers = params.layers
    L = len(layers) - 1
    grad = NetworkParams(params.arch)
    gviews = grad.layers
    zbar_extra = [None] * L

    if upstream_g is not None:
        qbar = upstream_g
        for li in range(L):
            gw, _ = gviews[li]
            gw += ss[li].T @ qbar
            sbar = qbar @ layers[li][0].T
            zbar_extra[li] = act.curvature(ctxs[li], sbar, qs[li + 1])
            qbar = act.pushforward(ctxs[li], sbar)
        gviews[L][0][0] += qbar.sum(axis=0)

    if upstream_y is not None:
        delta = upstream_y
    else:
        delta = np.zeros((inputs[0].shape[0], 1))
    gw, gb = gviews[L]
    gw += delta.T @ inputs[L]
    gb += delta.sum(axis=0)
    abar = delta @ layers[L][0]
    for li in range(L - 1, -1, -1):
        zbar = act.pullback(ctxs[li], abar)
        if zbar_extra[li] is not None and not np.isscalar(zbar_extra[li]):
            zbar = zbar + zbar_extra[li]
        gw, gb = gviews[li]
        gw += zbar.T @ inputs[li]
        gb += zbar.sum(axis=0)
        if li > 0:
            abar = zbar @ layers[li][0]
    return grad.flat


def scalar_input_grad(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Input gradient of a scalar-output network, shape (batch, in)."""
    x, single = _promote(x, params.arch.input_dim)
    _, g, _ = _forward_igrad_cached(params, x)
    return g[0] if single else g


def project_lipschitz(params: NetworkParams, bound_m: float) -> NetworkParams:
    """Project onto the 1-Lipschitz weight-constraint set for GroupSort nets.

    First weight matrix: rows scaled to 2-norm at most one.  Later weight
    matrices: rows scaled to 1-norm at most one.  Biases clipped to
    [-bound_m, bound_m].  Feasible parameters come back unchanged in value.
    """
    out = params.copy()
    for li, (w, b) in enumerate(out.layers):
        if li == 0:
            norms = np.linalg.norm(w, ord=2, axis=1)
        else:
            norms = np.abs(w).sum(axis=1)
        w /= np.maximum(1.0, norms)[:, None]
        np.clip(b, -bound_m, bound_m, out=b)
    return out


# --- checkpoint text format -------------------------------------------------


def save_network(params: NetworkParams, path) -> None:
    """Write a value-exact text checkpoint (17 significant digits)."""
    arch = params.arch
    buf = io.StringIO()
    buf.write("network v1\n")
    buf.write(f"inputs {arch.input_dim}\n")
    buf.write(f"outputs {arch.output_dim}\n")
    buf.write("hidden" + "".join(f" {h}" for h in arch.hidden_sizes) + "\n")
    if arch.activation == GROUPSORT:
        buf.write(f"activation groupsort {arch.grouping}\n")
    else:
        buf.write("activation tanh\n")
    for li, (w, b) in enumerate(params.layers):
        buf.write(f"layer {li} {w.shape[0]} {w.shape[1]}\n")
        for row in w:
            buf.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        buf.write(" ".join(f"{v:.17g}" for v in b) + "\n")
    buf.write("end\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_network(path) -> NetworkParams:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    if not lines or lines[0] != "network v1":
        raise ValueError(f"{path}: not a network checkpoint")
    pos = 1

    def take(prefix):
        nonlocal pos
        if not lines[pos].startswith(prefix):
            raise ValueError(f"{path}: expected {prefix!r} at line {pos + 1}")
        parts = lines[pos].split()[1:]
        pos += 1
        return parts

    input_dim = int(take("inputs")[0])
    output_dim = int(take("outputs")[0])
    hidden = tuple(int(h) for h in take("hidden"))
    act_parts = take("activation")
    if act_parts[0] == GROUPSORT:
        arch = NetworkArchitecture(input_dim, hidden, output_dim, GROUPSORT, int(act_parts[1]))
    else:
        arch = NetworkArchitecture(input_dim, hidden, output_dim, TANH)
    params = NetworkParams(arch)
    for li, (w, b) in enumerate(params.layers):
        hdr = take("layer")
        if int(hdr[0]) != li or (int(hdr[1]), int(hdr[2])) != w.shape:
            raise ValueError(f"{path}: layer header mismatch at layer {li}")
        for r in range(w.shape[0]):
            w[r] = np.array(lines[pos].split(), dtype=np.float64)
            pos += 1
        b[...] = np.array(lines[pos].split(), dtype=np.float64)
        pos += 1
    if lines[pos] != "end":
        raise ValueError(f"{path}: missing end marker")
    return params
