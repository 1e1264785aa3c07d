"""Variational objectives, optimisers, the training loop and MC prediction."""
from __future__ import annotations

import base64
import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Node, Parameter
from .layers import Network, build_network
from .tensor import make_rng, rng_state

#: Default KL-weight search grids.
LAMBDA_GRID_CLASSIFICATION = (0.1, 0.2, 0.5)
LAMBDA_GRID_REGRESSION = (1e-5, 1e-4, 1e-3, 1e-2)

CHECKPOINT_FORMAT = "structdrop-checkpoint"
CHECKPOINT_VERSION = 1


class DivergenceError(FloatingPointError):
    """Raised when the objective or a parameter becomes non-finite."""

    def __init__(self, message, epoch=None, trace=None):
        super().__init__(message)
        self.epoch = epoch
        self.trace = trace or []


@dataclass
class Objective:
    """What is being minimised.

    ``kl_weight`` multiplies every KL term; ``n_data`` is the training-set
    size, so a batch of size ``B`` has its log-likelihood scaled by ``N/B``.
    """

    variant: str = "vsd"
    kl_weight: float = 1.0
    n_data: int = 1
    likelihood: str = "categorical"
    mc_train: int | None = None

    def __post_init__(self):
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.likelihood not in ("categorical", "gaussian"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.n_data < 1:
            raise ValueError("n_data must be positive")

    @property
    def train_samples(self):
        if self.mc_train is not None:
            return int(self.mc_train)
        return 2 if self.variant == "bbb" else 1


@dataclass
class TrainSpec:
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.9
    lr_step_size: int | None = 10
    lr_gamma: float = 0.3
    lr_milestones: list | None = None
    epochs: int = 10
    batch_size: int = 100
    seed: int = 0
    mc_samples: int = 100

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lr_milestones is not None and list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ValueError("lr_milestones must be sorted")
        if self.epochs < 0 or self.batch_size < 1 or self.mc_samples < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and mc_samples >= 1 required")
        self.betas = tuple(self.betas)

    def lr_at(self, epoch: int) -> float:
        """Multi-step schedule; ``epoch`` counts from 0."""
        if self.lr_milestones is not None:
            drops = sum(1 for m in self.lr_milestones if epoch >= m)
        elif self.lr_step_size:
            drops = epoch // self.lr_step_size
        else:
            drops = 0
        return self.lr * self.lr_gamma ** drops

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


class Model:
    """A network plus its likelihood.

    ``spec`` holds everything needed to rebuild the network from scratch:
    ``architecture``, ``input_shape``, ``variant``, ``layer_defaults``,
    ``likelihood``, ``log_precision`` and ``learn_precision``.
    """

    def __init__(self, spec: dict, seed: int = 0):
        self.spec = copy.deepcopy(spec)
        rng = make_rng(seed)
        self.network: Network = build_network(spec["architecture"], spec["input_shape"],
                                              spec.get("variant", "vsd"), rng=rng,
                                              defaults=spec.get("layer_defaults"))
        self.likelihood = spec.get("likelihood", "categorical")
        self.log_precision = None
        if self.likelihood == "gaussian":
            self.log_precision = Parameter(np.array(float(spec.get("log_precision", 0.0))),
                                           name="log_precision",
                                           trainable=bool(spec.get("learn_precision", True)))

    def parameters(self):
        out = [p for p in self.network.parameters() if p.trainable]
        if self.log_precision is not None and self.log_precision.trainable:
            out.append(self.log_precision)
        return out

    def named_parameters(self) -> dict:
        named = dict(self.network.named_parameters())
        if self.log_precision is not None:
            named["log_precision"] = self.log_precision
        return named

    def forward(self, x, rng=None, train=False):
        return self.network.forward(x, rng, train)

    def kl(self):
        return self.network.kl()

    def state(self) -> dict:
        return {k: p.value.copy() for k, p in self.named_parameters().items()}

    def load_state(self, state: dict):
        named = self.named_parameters()
        missing = set(named) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, p in named.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {p.value.shape}")
            p.value = v.copy()
            p.zero_grad()


def hier_sample_z(gamma, delta, rng):
    """One draw of ``z = exp(gamma + sqrt(delta) * eps)``, shared by a whole batch."""
    gamma = np.asarray(gamma, dtype=np.float64)
    eps = rng.standard_normal(gamma.shape)
    return np.exp(gamma + np.sqrt(np.asarray(delta, dtype=np.float64)) * eps)


def elbo_terms(model: Model, X, y, objective: Objective, rng):
    """``(total, data_term, kl_term)`` nodes of the negative ELBO on a batch."""
    n = len(X)
    scale = objective.n_data / n
    loglik = Node(0.0)
    samples = objective.train_samples
    for _ in range(samples):
        out = model.forward(X, rng, train=True)
        if objective.likelihood == "categorical":
            loglik = loglik - ag.softmax_cross_entropy(out, y)
        else:
            target = np.asarray(y, dtype=np.float64).reshape(out.shape)
            loglik = loglik + ag.gaussian_log_density(target, out, model.log_precision)
    data = -(scale / samples) * loglik
    kl = model.kl()
    total = data + objective.kl_weight * kl
    if not np.isfinite(total.value):
        raise DivergenceError("objective is not finite")
    return total, data, kl


def negative_elbo(model: Model, X, y, objective: Objective, rng) -> Node:
    """``-(N/|B|) sum log p(y|x, noise) + kl_weight * sum_layers KL``."""
    return elbo_terms(model, X, y, objective, rng)[0]


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad ** 2
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class SGD:
    def __init__(self, params, lr=1e-2, momentum=0.9):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.buf = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        for p, b in zip(self.params, self.buf):
            b *= self.momentum
            b += p.grad
            p.value = p.value - self.lr * b

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def make_optimizer(params, spec: TrainSpec):
    if spec.optimizer == "adam":
        return Adam(params, spec.lr, spec.betas, spec.eps)
    return SGD(params, spec.lr, spec.momentum)


def train(model: Model, X, y, spec: TrainSpec, objective: Objective, callback=None):
    """Minimise the negative ELBO with minibatch gradient steps.

    Returns ``(model, trace)``; ``trace`` has one dict per epoch with the
    mean objective, data term and KL term over that epoch's batches.
    Single-threaded runs with the same seed give identical traces.
    On a non-finite objective the parameters are rolled back to the end
    of the last finite epoch and :class:`DivergenceError` is raised.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if n == 0:
        raise ValueError("empty training set")
    rng = make_rng(spec.seed)
    params = model.parameters()
    opt = make_optimizer(params, spec)
    trace = []
    good = model.state()
    for epoch in range(spec.epochs):
        opt.lr = spec.lr_at(epoch)
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        try:
            for start in range(0, n, spec.batch_size):
                idx = order[start:start + spec.batch_size]
                opt.zero_grad()
                total, data, kl = elbo_terms(model, X[idx], np.asarray(y)[idx], objective, rng)
                sums += (total.item(), data.item(), kl.item())
                ag.backward(total)
                opt.step()
                batches += 1
            if not all(np.all(np.isfinite(p.value)) for p in params):
                raise DivergenceError("parameters became non-finite")
        except DivergenceError as exc:
            model.load_state(good)
            raise DivergenceError(f"{exc} at epoch {epoch + 1}", epoch=epoch + 1, trace=trace) from None
        mean = sums / batches
        row = {"epoch": epoch + 1, "lr": opt.lr, "objective": float(mean[0]),
               "data_term": float(mean[1]), "kl_term": float(mean[2])}
        trace.append(row)
        good = model.state()
        if callback is not None:
            callback(row)
    return model, trace


def _is_stochastic(model: Model) -> bool:
    variant = model.spec.get("variant", "vsd")
    layers = model.network.layers
    return variant != "map" or any(getattr(l, "variant", None) not in (None, "map") for l in layers)


def predict(model: Model, X, S: int = 100, rng=None, batch_size: int = 1000):
    """Monte-Carlo predictive distribution.

    Classification returns averaged softmax probabilities ``(n, C)``.
    Regression returns ``(mean, var)`` where ``var`` adds the MC spread of
    the network output to the likelihood variance ``1/precision``.
    Deterministic models use a single pass regardless of ``S``.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    rng = rng if rng is not None else make_rng(0)
    stochastic = _is_stochastic(model)
    draws = S if stochastic else 1
    chunks = []
    for start in range(0, len(X), batch_size):
        xb = X[start:start + batch_size]
        outs = np.stack([model.forward(xb, rng, train=stochastic).value for _ in range(draws)])
        if model.likelihood == "categorical":
            z = outs - outs.max(axis=-1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=-1, keepdims=True)
            chunks.append(p.mean(axis=0))
        else:
            mean = outs.mean(axis=0)
            var = outs.var(axis=0) + math.exp(-float(model.log_precision.value))
            chunks.append((mean, var))
    if model.likelihood == "categorical":
        return np.concatenate(chunks)
    return np.concatenate([c[0] for c in chunks]), np.concatenate([c[1] for c in chunks])


# -- checkpoints ---------------------------------------------------------

def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "float64", "data": base64.b64encode(a.tobytes()).decode()}


def _decode(d: dict) -> np.ndarray:
    if d.get("dtype") != "float64":
        raise ValueError(f"unsupported dtype {d.get('dtype')!r}")
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def checkpoint_dict(model: Model, spec: TrainSpec, objective: Objective, epoch: int, rng=None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": int(epoch),
        "train_spec": asdict(spec),
        "train_spec_sha256": spec.digest(),
        "objective": asdict(objective),
        "model": model.spec,
        "rng_state": rng_state(rng) if rng is not None else None,
        "parameters": {k: _encode(v) for k, v in model.state().items()},
    }


def model_from_checkpoint(ckpt: dict) -> Model:
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a structdrop checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ckpt.get('version')}")
    model = Model(ckpt["model"])
    model.load_state({k: _decode(v) for k, v in ckpt["parameters"].items()})
    return model
