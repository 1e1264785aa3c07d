"""Stochastic layers and a sequential network container.

Every parametric layer exposes ``forward(x, rng, train)`` and ``kl()``.
``train=True`` draws fresh noise (one realisation per example); with
``train=False`` the layer runs its deterministic mean pass. Monte-Carlo
prediction calls the layers with ``train=True``.

Biases never carry noise.
"""
from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from . import kl as klmod
from .autograd import Node, Parameter
from .householder import HouseholderChain
from .tensor import child_rng

VARIANTS = ("vsd", "vsd-hier", "vd", "ard-vd", "mcd", "bbb", "map")

#: Upper clamp on log(alpha) for plain variational dropout.
VD_LOG_ALPHA_MAX = math.log(1.0 - 1e-6)


def xavier_uniform(rng, fan_in, fan_out, shape):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def bias_uniform(rng, fan_in, n):
    # U(-1/sqrt(fan_in), 1/sqrt(fan_in)); spreads ReLU kinks instead of stacking them at 0
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=n)


class Layer:
    stochastic = False

    def parameters(self):
        return []

    def forward(self, x, rng=None, train=False):
        raise NotImplementedError

    def kl(self):
        return Node(0.0)


class Activation(Layer):
    _fns = {"relu": ag.relu, "tanh": ag.tanh, "sigmoid": ag.sigmoid}

    def __init__(self, kind="relu"):
        if kind not in self._fns:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x, rng=None, train=False):
        return self._fns[self.kind](x)


class Flatten(Layer):
    def forward(self, x, rng=None, train=False):
        x = ag.lift(x)
        return ag.reshape(x, (x.shape[0], -1))


class Pool2d(Layer):
    def __init__(self, kind="max"):
        self.kind = kind

    def forward(self, x, rng=None, train=False):
        return ag.max_pool2d(x) if self.kind == "max" else ag.avg_pool2d(x)


class _StructuredNoise:
    """Droprates, Householder chain and optional hierarchical latent over ``K`` units."""

    def _init_noise(self, dim, n_transforms, rank, hierarchical, log_alpha_init,
                    hyperprior, rng, name):
        self.noise_dim = dim
        self.hierarchical = hierarchical
        self.log_alpha = Parameter(np.full(dim, float(log_alpha_init)), name=f"{name}.log_alpha")
        self.chain = HouseholderChain(dim, n_transforms, rank=rank, rng=rng, name=f"{name}.hh")
        self.hyper_a, self.hyper_b = hyperprior
        if hierarchical:
            self.gamma = Parameter(np.zeros(dim), name=f"{name}.gamma")
            self.log_delta = Parameter(np.full(dim, math.log(1e-2)), name=f"{name}.log_delta")

    def _noise_params(self):
        out = [self.log_alpha] + self.chain.parameters()
        if self.hierarchical:
            out += [self.gamma, self.log_delta]
        return out

    def sample_xi(self, n, rng) -> Node:
        """Per-row structured noise ``1 + U(sqrt(alpha) * eps)``, times a shared ``z`` if hierarchical."""
        eps = rng.standard_normal((n, self.noise_dim))
        eta = eps * ag.exp(0.5 * self.log_alpha)
        xi = 1.0 + self.chain.apply_rows(eta)
        if self.hierarchical:
            xi = xi * self.sample_z(rng)
        return xi

    def sample_z(self, rng) -> Node:
        eps = rng.standard_normal(self.noise_dim)
        return ag.exp(self.gamma + ag.exp(0.5 * self.log_delta) * eps)

    def mean_scale(self):
        if self.hierarchical:
            return ag.exp(self.gamma + 0.5 * ag.exp(self.log_delta))
        return None

    def U_node(self):
        if self.chain.n_transforms == 0:
            return Node(np.eye(self.noise_dim))
        return self.chain.matrix_node()

    def noise_kl(self, n_columns):
        alpha = ag.exp(self.log_alpha)
        U = self.U_node()
        if not self.hierarchical:
            return klmod.kl_eb_vsd(alpha, U, n_columns)
        delta = ag.exp(self.log_delta)
        return (klmod.kl_hier_eb_expected(alpha, U, self.gamma, delta, n_columns)
                + klmod.kl_lognormal_gamma(self.gamma, delta, self.hyper_a, self.hyper_b))


class VsdDense(Layer, _StructuredNoise):
    """Dense layer ``y = (x * xi) @ theta + bias`` with structured Gaussian ``xi``.

    With ``noise=False`` the layer is a plain affine map with no KL term;
    used for one-dimensional inputs.
    """

    stochastic = True

    def __init__(self, in_dim, out_dim, n_transforms=1, rank=None, hierarchical=False,
                 log_alpha_init=math.log(0.25), hyperprior=(1.0, 2.0), noise=True,
                 rng=None, name="dense"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.noise = noise
        self.theta = Parameter(xavier_uniform(rng, in_dim, out_dim, (in_dim, out_dim)), name=f"{name}.theta")
        self.bias = Parameter(bias_uniform(rng, in_dim, out_dim), name=f"{name}.bias")
        self._init_noise(in_dim, n_transforms, rank, hierarchical, log_alpha_init, hyperprior, rng, name)
        self.last_noise = None

    def parameters(self):
        out = [self.theta, self.bias]
        return out + self._noise_params() if self.noise else out

    def forward(self, x, rng=None, train=False):
        x = ag.lift(x)
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input features, got {x.shape[1]}")
        self.last_noise = None
        if self.noise and train:
            xi = self.sample_xi(x.shape[0], rng)
            self.last_noise = xi.value
            x = x * xi
        elif self.noise and self.hierarchical:
            x = x * self.mean_scale()
        return ag.matmul(x, self.theta) + self.bias

    def kl(self):
        return self.noise_kl(self.out_dim) if self.noise else Node(0.0)


class VsdConv2d(Layer, _StructuredNoise):
    """Convolution whose input channels are scaled by structured noise.

    One noise value per (example, input channel), shared over spatial
    positions; equivalent to scaling kernel slice ``k`` by ``xi_k``.
    """

    stochastic = True

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=0,
                 n_transforms=1, rank=None, hierarchical=False, log_alpha_init=math.log(0.25),
                 hyperprior=(1.0, 2.0), noise=True, rng=None, name="conv"):
        rng = rng if rng is not None else np.random.default_rng(0)
        k = int(kernel_size)
        self.in_channels, self.out_channels = int(in_channels), int(out_channels)
        self.kernel_size, self.stride, self.padding = k, int(stride), int(padding)
        self.noise = noise
        fan_in, fan_out = in_channels * k * k, out_channels * k * k
        self.theta = Parameter(xavier_uniform(rng, fan_in, fan_out, (out_channels, in_channels, k, k)),
                               name=f"{name}.theta")
        self.bias = Parameter(bias_uniform(rng, fan_in, out_channels), name=f"{name}.bias")
        self._init_noise(in_channels, n_transforms, rank, hierarchical, log_alpha_init, hyperprior, rng, name)
        self.last_noise = None

    def parameters(self):
        out = [self.theta, self.bias]
        return out + self._noise_params() if self.noise else out

    def forward(self, x, rng=None, train=False):
        x = ag.lift(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (n, {self.in_channels}, H, W) input, got {x.shape}")
        self.last_noise = None
        if self.noise and train:
            xi = self.sample_xi(x.shape[0], rng)
            self.last_noise = xi.value
            x = x * ag.reshape(xi, (x.shape[0], self.in_channels, 1, 1))
        elif self.noise and self.hierarchical:
            x = x * ag.reshape(self.mean_scale(), (1, self.in_channels, 1, 1))
        out = ag.conv2d(x, self.theta, stride=self.stride, padding=self.padding)
        return out + ag.reshape(self.bias, (1, self.out_channels, 1, 1))

    def kl(self):
        q = self.out_channels * self.kernel_size ** 2
        return self.noise_kl(q) if self.noise else Node(0.0)


class BaselineDense(Layer):
    """Dense layer for the comparison methods.

    ``variant`` is one of ``map``, ``mcd`` (Bernoulli dropout with rate ``p``),
    ``vd`` (diagonal Gaussian noise, ``alpha`` clamped below 1), ``ard-vd``
    (diagonal Gaussian noise, empirical-Bayes KL) or ``bbb`` (mean-field
    Gaussian weights).
    """

    stochastic = True

    def __init__(self, in_dim, out_dim, variant="map", p=0.5, length_scale=1e-2,
                 log_alpha_init=math.log(0.25), prior_std=1.0, log_sigma_init=-5.0,
                 noise=True, rng=None, name="dense"):
        if variant not in ("map", "mcd", "vd", "ard-vd", "bbb"):
            raise ValueError(f"unknown baseline variant {variant!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.variant = variant
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.noise = noise
        self.p, self.length_scale, self.prior_std = float(p), float(length_scale), float(prior_std)
        self.theta = Parameter(xavier_uniform(rng, in_dim, out_dim, (in_dim, out_dim)), name=f"{name}.theta")
        self.bias = Parameter(bias_uniform(rng, in_dim, out_dim), name=f"{name}.bias")
        if variant in ("vd", "ard-vd"):
            self.log_alpha = Parameter(np.full(in_dim, float(log_alpha_init)), name=f"{name}.log_alpha")
        if variant == "bbb":
            self.log_sigma = Parameter(np.full((in_dim, out_dim), float(log_sigma_init)), name=f"{name}.log_sigma")
        self.last_noise = None

    def parameters(self):
        out = [self.theta, self.bias]
        if self.variant in ("vd", "ard-vd"):
            out.append(self.log_alpha)
        if self.variant == "bbb":
            out.append(self.log_sigma)
        return out

    def effective_log_alpha(self):
        if self.variant == "vd":
            return ag.minimum(self.log_alpha, VD_LOG_ALPHA_MAX)
        return self.log_alpha

    def forward(self, x, rng=None, train=False):
        x = ag.lift(x)
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input features, got {x.shape[1]}")
        self.last_noise = None
        weight = self.theta
        if train and self.noise:
            n = x.shape[0]
            if self.variant == "mcd" and self.p > 0:
                mask = (rng.random((n, self.in_dim)) >= self.p) / (1.0 - self.p)
                self.last_noise = mask
                x = x * mask
            elif self.variant in ("vd", "ard-vd"):
                eps = rng.standard_normal((n, self.in_dim))
                xi = 1.0 + eps * ag.exp(0.5 * self.effective_log_alpha())
                self.last_noise = xi.value
                x = x * xi
            elif self.variant == "bbb":
                eps = rng.standard_normal((self.in_dim, self.out_dim))
                weight = self.theta + ag.exp(self.log_sigma) * eps
                self.last_noise = eps
        return ag.matmul(x, weight) + self.bias

    def kl(self):
        if self.variant in ("map", "mcd"):
            keep = 1.0 - self.p if self.variant == "mcd" else 1.0
            return 0.5 * self.length_scale * keep * ag.sum(ag.square(self.theta))
        if self.variant == "bbb":
            return klmod.kl_gaussian_diag(self.theta, self.log_sigma, self.prior_std)
        if not self.noise:
            return Node(0.0)
        if self.variant == "vd":
            return klmod.kl_vd_loguniform(self.effective_log_alpha())
        return klmod.kl_ard(ag.exp(self.log_alpha))


class Network:
    """Sequential stack of layers."""

    def __init__(self, layers):
        self.layers = list(layers)

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def named_parameters(self) -> dict:
        named = {}
        for i, layer in enumerate(self.layers):
            for p in layer.parameters():
                named[f"{i}.{p.name}"] = p
        return named

    def forward(self, x, rng=None, train=False):
        h = ag.lift(x)
        for layer in self.layers:
            if layer.stochastic:
                layer_rng = child_rng(rng) if rng is not None else None
                if train and layer_rng is None:
                    raise ValueError("stochastic forward pass needs an rng")
                h = layer.forward(h, layer_rng, train)
            else:
                h = layer.forward(h)
        return h

    __call__ = forward

    def kl(self):
        total = Node(0.0)
        for layer in self.layers:
            if layer.stochastic:
                total = total + layer.kl()
        return total

    @property
    def hierarchical(self):
        return any(getattr(layer, "hierarchical", False) for layer in self.layers)


def build_network(architecture, input_shape, variant="vsd", rng=None, defaults=None) -> Network:
    """Instantiate a :class:`Network` from a list of layer dicts.

    Layer dicts use ``type`` in ``dense``, ``conv``, ``relu``, ``tanh``,
    ``sigmoid``, ``maxpool``, ``avgpool``, ``flatten``. Parametric layers may
    override ``variant`` and any constructor keyword.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    defaults = dict(defaults or {})
    shape = tuple(input_shape)
    layers = []
    for i, spec in enumerate(architecture):
        spec = dict(spec)
        kind = spec.pop("type")
        if kind in Activation._fns:
            layers.append(Activation(kind))
            continue
        if kind in ("maxpool", "avgpool"):
            layers.append(Pool2d("max" if kind == "maxpool" else "avg"))
            c, h, w = shape
            shape = (c, h // 2, w // 2)
            continue
        if kind == "flatten":
            layers.append(Flatten())
            shape = (int(np.prod(shape)),)
            continue
        layer_variant = spec.pop("variant", variant)
        if layer_variant not in VARIANTS:
            raise ValueError(f"unknown variant {layer_variant!r}")
        opts = {**_variant_defaults(layer_variant, defaults), **spec}
        name = f"{kind}{i}"
        if kind == "dense":
            if len(shape) != 1:
                raise ValueError(f"dense layer {i} needs flat input, got shape {shape}")
            units = opts.pop("units")
            opts.setdefault("noise", shape[0] > 1)
            if layer_variant in ("vsd", "vsd-hier"):
                layers.append(VsdDense(shape[0], units, hierarchical=layer_variant == "vsd-hier",
                                       rng=rng, name=name, **opts))
            else:
                layers.append(BaselineDense(shape[0], units, variant=layer_variant, rng=rng, name=name, **opts))
            shape = (units,)
        elif kind == "conv":
            if len(shape) != 3:
                raise ValueError(f"conv layer {i} needs (C, H, W) input, got shape {shape}")
            if layer_variant not in ("vsd", "vsd-hier", "map"):
                raise ValueError("conv layers support the vsd, vsd-hier and map variants")
            channels = opts.pop("channels")
            k = opts.get("kernel_size", 3)
            stride, pad = opts.get("stride", 1), opts.get("padding", 0)
            if layer_variant == "map":
                opts = {key: opts[key] for key in ("kernel_size", "stride", "padding") if key in opts}
                opts["noise"] = False
            layers.append(VsdConv2d(shape[0], channels, hierarchical=layer_variant == "vsd-hier",
                                    rng=rng, name=name, **opts))
            c, h, w = shape
            shape = (channels, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
        else:
            raise ValueError(f"unknown layer type {kind!r}")
    return Network(layers)


_VSD_KEYS = ("n_transforms", "rank", "log_alpha_init", "hyperprior")
_BASE_KEYS = {"map": ("length_scale",), "mcd": ("p", "length_scale"),
              "vd": ("log_alpha_init",), "ard-vd": ("log_alpha_init",),
              "bbb": ("prior_std", "log_sigma_init")}


def _variant_defaults(variant, defaults):
    keys = _VSD_KEYS if variant in ("vsd", "vsd-hier") else _BASE_KEYS[variant]
    out = {k: defaults[k] for k in keys if defaults.get(k) is not None}
    if "hyperprior" in out:
        out["hyperprior"] = tuple(out["hyperprior"])
    return out
