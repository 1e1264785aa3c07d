"""Regularizer estimates and weight-matrix diagnostics.

Structured noise ``xi = 1 + U (sqrt(alpha) * eps)`` multiplies the input
``h`` of one designated dense layer. To second order the expected loss
increase is the Gauss-Newton quadratic form

    < J^T H_out J , diag(h) U diag(alpha) U^T diag(h) >

averaged over the batch, where ``J`` is the Jacobian of the network output
with respect to that layer's input and ``H_out`` is half the Hessian of the
per-example loss in the output:

* ``"squared"``: loss ``||f - y||^2`` so ``H_out = I``;
* ``"cross_entropy"``: loss ``-log softmax(f)[y]`` so
  ``H_out = (diag(p) - p p^T) / 2``.

For networks that are linear after the noisy layer the expansion is exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Parameter
from .tensor import make_rng

LOSSES = ("squared", "cross_entropy")


@dataclass
class RegularizerEstimate:
    mc_value: float
    analytic_value: float
    noise_scale: float
    layer: int

    def to_dict(self):
        return {"mc_value": self.mc_value, "analytic_value": self.analytic_value,
                "noise_scale": self.noise_scale, "layer": self.layer}


def _layers(model):
    if hasattr(model, "network"):
        model = model.network
    return model.layers if hasattr(model, "layers") else list(model)


def _run(layers, x, start, stop):
    out = x
    for layer in layers[start:stop]:
        out = layer.forward(out, None, train=False)
    return out


def _split(model, x, layer):
    layers = _layers(model)
    if not 0 <= layer < len(layers):
        raise IndexError(f"layer {layer} out of range for {len(layers)} layers")
    h = ag.value_of(_run(layers, ag.lift(np.asarray(x, dtype=np.float64)), 0, layer))
    if h.ndim != 2:
        raise ValueError("the designated layer must take 2-d (batch, features) input")
    return layers, h


def _tail(layers, layer, z):
    return ag.value_of(_run(layers, ag.lift(z), layer, len(layers)))


def _loss_rows(f, y, loss):
    if loss == "squared":
        return np.sum((f - y) ** 2, axis=-1)
    if loss == "cross_entropy":
        z = f - f.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        return -np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]
    raise ValueError(f"unsupported loss {loss!r}; expected one of {LOSSES}")


def _targets(f0, y, loss):
    if loss not in LOSSES:
        raise ValueError(f"unsupported loss {loss!r}; expected one of {LOSSES}")
    if y is None:
        # squared error around the clean output; the most likely class for cross-entropy
        return f0.copy() if loss == "squared" else np.argmax(f0, axis=-1)
    y = np.asarray(y)
    if loss == "squared":
        return y.reshape(f0.shape).astype(np.float64)
    return y.astype(np.int64).ravel()


def regularizer_mc(model, x, alpha, U, n_samples: int = 10000, rng=None, layer: int = 0,
                   loss: str = "squared", y=None, chunk: int = 20000) -> float:
    """Monte-Carlo estimate of ``E[loss(noisy)] - loss(clean)``, batch-averaged.

    Samples come in antithetic pairs ``(eps, -eps)``, which removes the
    first-order term exactly; ``n_samples`` is rounded up to an even number.
    ``y=None`` uses the clean prediction as target.
    """
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    if np.any(alpha < 0):
        raise ValueError("alpha must be non-negative")
    rng = rng if rng is not None else make_rng(0)
    layers, h = _split(model, x, layer)
    n, K = h.shape
    U = np.asarray(U, dtype=np.float64)
    if U.shape != (K, K) or len(alpha) != K:
        raise ValueError(f"alpha/U must match the layer width {K}")
    f0 = _tail(layers, layer, h)
    target = _targets(f0, y, loss)
    base = _loss_rows(f0, target, loss).mean()
    if not np.any(alpha):
        return 0.0
    pairs = (int(n_samples) + 1) // 2
    scale_cols = U * np.sqrt(alpha)[None, :]
    per_chunk = max(1, chunk // n)
    total = 0.0
    done = 0
    while done < pairs:
        m = min(per_chunk, pairs - done)
        eps = rng.standard_normal((m, n, K))
        delta = h[None] * (eps @ scale_cols.T)
        t = np.broadcast_to(target, (m,) + target.shape)
        plus = _loss_rows(_tail(layers, layer, (h[None] + delta).reshape(m * n, K)).reshape(m, n, -1), t, loss)
        minus = _loss_rows(_tail(layers, layer, (h[None] - delta).reshape(m * n, K)).reshape(m, n, -1), t, loss)
        total += float(np.sum(0.5 * (plus + minus) - base))
        done += m
    return total / (pairs * n)


def layer_jacobians(model, x, layer: int = 0):
    """``(h, J, f)``: layer input ``(n, K)``, Jacobians ``(n, C, K)`` and outputs ``(n, C)``."""
    layers, h = _split(model, x, layer)
    z = Parameter(h.copy(), name="layer_input")
    f = _run(layers, z, layer, len(layers))
    C = f.shape[-1]
    J = np.empty((h.shape[0], C, h.shape[1]))
    for c in range(C):
        z.zero_grad()
        out = _run(layers, z, layer, len(layers))
        ag.backward(ag.sum(out[:, c]))
        J[:, c, :] = z.grad
    return h, J, ag.value_of(f)


def output_hessians(f, loss):
    """Per-example ``H_out`` (half the loss Hessian in the outputs), shape ``(n, C, C)``."""
    n, C = f.shape
    if loss == "squared":
        return np.broadcast_to(np.eye(C), (n, C, C)).copy()
    if loss == "cross_entropy":
        z = f - f.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        return 0.5 * (np.einsum("ij,jk->ijk", p, np.eye(C)) - p[:, :, None] * p[:, None, :])
    raise ValueError(f"unsupported loss {loss!r}; expected one of {LOSSES}")


def curvature_matrix(model, x, layer: int = 0, loss: str = "squared"):
    """Batch mean of ``diag(h) J^T H_out J diag(h)`` (a ``K x K`` PSD matrix)."""
    h, J, f = layer_jacobians(model, x, layer)
    H = output_hessians(f, loss)
    G = np.einsum("nck,ncd,ndl->nkl", J, H, J)
    return np.mean(h[:, :, None] * G * h[:, None, :], axis=0)


def regularizer_analytic(model, x, alpha, U, layer: int = 0, loss: str = "squared") -> float:
    """Gauss-Newton value ``<J^T H_out J, diag(h) U diag(alpha) U^T diag(h)>``, batch-averaged."""
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    U = np.asarray(U, dtype=np.float64)
    omega = curvature_matrix(model, x, layer, loss)
    cov = (U * alpha[None, :]) @ U.T
    return float(np.sum(omega * cov))


def regularizer_tikhonov(model, x, alpha, U, layer: int = 0, loss: str = "squared") -> float:
    """Same quantity as ``mean ||H_out^{1/2} J diag(h) U diag(sqrt(alpha))||_F^2``."""
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    U = np.asarray(U, dtype=np.float64)
    h, J, f = layer_jacobians(model, x, layer)
    H = output_hessians(f, loss)
    right = (U * np.sqrt(alpha)[None, :])
    total = 0.0
    for n in range(len(h)):
        w, V = np.linalg.eigh(H[n])
        root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
        M = root @ J[n] @ (h[n][:, None] * right)
        total += float(np.sum(M * M))
    return total / len(h)


def regularizer_column_sum(model, x, alpha, U, layer: int = 0, loss: str = "squared") -> float:
    """Same quantity as ``sum_k alpha_k U[:, k]^T Omega U[:, k]``."""
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    U = np.asarray(U, dtype=np.float64)
    omega = curvature_matrix(model, x, layer, loss)
    return float(sum(alpha[k] * U[:, k] @ omega @ U[:, k] for k in range(len(alpha))))


def estimate_regularizer(model, x, alpha, U, layer=0, loss="squared", n_samples=10000, rng=None, y=None):
    mc = regularizer_mc(model, x, alpha, U, n_samples, rng, layer, loss, y)
    an = regularizer_analytic(model, x, alpha, U, layer, loss)
    return RegularizerEstimate(mc, an, float(np.max(alpha)) if np.size(alpha) else 0.0, layer)


def spectral_norm(W, iters: int = 1000, tol: float = 1e-12) -> float:
    """Largest singular value by power iteration on ``W^T W``.

    Stops when the Rayleigh quotient changes by less than ``tol`` (relative)
    or after ``iters`` steps. A zero matrix has norm 0.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        W = W.reshape(W.shape[0], -1)
    if not np.any(W):
        return 0.0
    gram = W.T @ W
    # a fixed random start is almost surely not orthogonal to the top singular vector
    v = make_rng(0).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    lam = float(v @ gram @ v)
    for _ in range(iters):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        v = w / norm
        new = float(v @ gram @ v)
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            lam = new
            break
        lam = new
    return float(np.sqrt(max(lam, 0.0)))


def stable_rank(W, iters: int = 1000, tol: float = 1e-14) -> float:
    """``||W||_F^2 / ||W||_2^2``; scale invariant, in ``[1, min(W.shape)]``."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        W = W.reshape(W.shape[0], -1)
    if not np.any(W):
        raise ValueError("stable rank of a zero matrix is undefined")
    sn = spectral_norm(W, iters, tol)
    ratio = float(np.sum(W * W) / sn ** 2)
    # power iteration approaches sigma_max from below, so clip tiny overshoot
    return min(max(ratio, 1.0), float(min(W.shape)))


def weight_matrices(model):
    """``(name, matrix)`` for each parametric layer, conv kernels flattened to ``out x (in k k)``."""
    out = []
    for i, layer in enumerate(_layers(model)):
        theta = getattr(layer, "theta", None)
        if theta is None:
            continue
        W = np.asarray(theta.value)
        if W.ndim == 4:
            W = W.reshape(W.shape[0], -1)
        out.append((f"{i}.{type(layer).__name__}", W))
    return out


def weight_summary(model) -> list:
    rows = []
    for name, W in weight_matrices(model):
        sn = spectral_norm(W)
        rows.append({"layer": name, "shape": list(W.shape), "spectral_norm": sn,
                     "stable_rank": stable_rank(W) if sn > 0 else None})
    return rows
