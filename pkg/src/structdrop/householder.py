"""Householder chains and structured multiplicative Gaussian noise.

A chain of ``T`` reflections ``H_t = I - 2 v_t v_t^T / |v_t|^2`` defines the
orthogonal factor ``U = H_T ... H_1`` of the noise covariance
``U diag(alpha) U^T``. The first vector is a free parameter and every later
one is produced from its predecessor by a small dense map, either full
``K x K`` or a rank-``r`` bottleneck with a ReLU.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Node, Parameter

#: Vectors shorter than this are replaced by ``e_1`` before reflecting.
MIN_NORM = 1e-12


def householder_apply(v, x):
    """Reflect ``x`` (a vector, or a matrix of column vectors) across ``v``.

    Costs O(K) per column; the K x K reflection is never formed.
    """
    v = np.asarray(v, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    vv = float(v @ v)
    if vv == 0.0:
        raise ValueError("Householder vector must be nonzero")
    if x.ndim == 1:
        return x - (2.0 * (v @ x) / vv) * v
    return x - np.outer(v, (2.0 / vv) * (v @ x))


class HouseholderChain:
    """Trainable sequence of Householder vectors.

    Parameters
    ----------
    dim : int
        Length ``K`` of every reflection vector.
    n_transforms : int
        Number of reflections ``T``. ``T = 0`` gives ``U = I``.
    rank : int or None
        Hidden width of the vector-to-vector map. ``None`` uses a full
        ``K x K`` affine map.
    rng : numpy Generator
        Used for initialisation only.
    """

    def __init__(self, dim, n_transforms=1, rank=None, rng=None, name="hh", init_scale=0.1):
        if n_transforms < 0:
            raise ValueError("n_transforms must be >= 0")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = int(dim)
        self.n_transforms = int(n_transforms)
        self.rank = rank
        self.v1 = None
        self.maps = []
        if self.n_transforms == 0:
            return
        v = rng.standard_normal(self.dim)
        self.v1 = Parameter(v / np.linalg.norm(v), name=f"{name}.v1")
        for t in range(2, self.n_transforms + 1):
            if rank is None:
                m = {"w": Parameter(init_scale * rng.standard_normal((dim, dim)), name=f"{name}.fc{t}.w"),
                     "b": Parameter(np.zeros(dim), name=f"{name}.fc{t}.b")}
            else:
                m = {"w1": Parameter(init_scale * rng.standard_normal((dim, rank)), name=f"{name}.fc{t}.w1"),
                     # positive hidden bias keeps the ReLU units alive at init
                     "b1": Parameter(np.ones(rank), name=f"{name}.fc{t}.b1"),
                     "w2": Parameter(init_scale * rng.standard_normal((rank, dim)), name=f"{name}.fc{t}.w2"),
                     "b2": Parameter(np.zeros(dim), name=f"{name}.fc{t}.b2")}
            self.maps.append(m)

    def parameters(self):
        out = [] if self.v1 is None else [self.v1]
        for m in self.maps:
            out.extend(m.values())
        return out

    def _step(self, m, v: Node) -> Node:
        row = ag.reshape(v, (1, self.dim))
        if "w" in m:
            out = ag.matmul(row, m["w"]) + m["b"]
        else:
            hidden = ag.relu(ag.matmul(row, m["w1"]) + m["b1"])
            out = ag.matmul(hidden, m["w2"]) + m["b2"]
        return ag.reshape(out, (self.dim,))

    def vectors(self) -> list:
        """The reflection vectors ``v_1 .. v_T`` as graph nodes (guarded)."""
        if self.n_transforms == 0:
            return []
        vs = [self.v1]
        for m in self.maps:
            vs.append(self._step(m, vs[-1]))
        guarded = []
        for v in vs:
            if np.sqrt(np.sum(v.value ** 2)) < MIN_NORM:
                e1 = np.zeros(self.dim)
                e1[0] = 1.0
                v = Node(e1)
            guarded.append(v)
        return guarded

    def apply_rows(self, rows, vectors=None) -> Node:
        """Map every row ``r`` of an ``n x K`` array to ``U r``."""
        y = ag.lift(rows)
        for v in (self.vectors() if vectors is None else vectors):
            col = ag.reshape(v, (self.dim, 1))
            scale = 2.0 / ag.sum(ag.square(v))
            y = y - ag.matmul(ag.matmul(y, col) * scale, ag.reshape(v, (1, self.dim)))
        return y

    def matrix_node(self) -> Node:
        """``U`` as a differentiable node."""
        return ag.transpose(self.apply_rows(np.eye(self.dim)))

    def matrix(self) -> np.ndarray:
        return chain_matrix(self)


def chain_matrix(chain: HouseholderChain) -> np.ndarray:
    """Dense ``U = H_T ... H_1``."""
    u = np.eye(chain.dim)
    for v in chain.vectors():
        u = householder_apply(v.value, u)
    return u


def sample_structured_noise(alpha, U, rng, n):
    """``n`` rows drawn from N(1, U diag(alpha) U^T) as ``1 + U(sqrt(alpha) * eps)``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    eps = rng.standard_normal((int(n), alpha.shape[0]))
    return 1.0 + (eps * np.sqrt(alpha)) @ U.T
