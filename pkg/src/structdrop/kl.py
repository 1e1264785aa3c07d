"""Closed-form KL terms for dropout-style posteriors.

Every function accepts plain arrays or graph nodes. With plain arrays the
result is a Python float; if any argument is a :class:`~structdrop.autograd.Node`
the result is a scalar node that can be differentiated.

Notation: ``alpha`` is the length-``K`` droprate vector, ``U`` the ``K x K``
orthogonal factor, ``Q`` the number of weight columns sharing the noise.
``s_i = sum_j alpha_j U_ij^2`` is the noise variance seen by row ``i``.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

from . import autograd as ag
from .autograd import Node

# Sigmoid fit of the negative KL to the log-uniform prior (sparse variational dropout).
_VD_K1, _VD_K2, _VD_K3 = 0.63576, 1.87320, 1.48695


class DomainError(ValueError):
    pass


def _finish(result: Node, *args):
    if any(isinstance(a, Node) for a in args):
        return result
    return result.item()


def _positive(x, what):
    if np.any(ag.value_of(x) <= 0):
        raise DomainError(f"{what} must be positive")


def row_noise_variance(alpha, U):
    """``s = (U * U) @ alpha``."""
    return ag.reshape(ag.matmul(ag.square(U), ag.reshape(alpha, (-1, 1))), (-1,))


def kl_eb_vsd(alpha, U, Q):
    """Empirical-Bayes KL: ``Q/2 * sum_i log((1 + s_i) / alpha_i)``.

    Independent of the deterministic weights.
    """
    _positive(alpha, "alpha")
    a = ag.lift(alpha)
    s = row_noise_variance(a, ag.lift(U))
    out = 0.5 * Q * ag.sum(ag.log(1.0 + s) - ag.log(a))
    return _finish(out, alpha, U)


def empirical_bayes_beta(theta, alpha, U):
    """Prior precision minimising the per-column KL: ``1 / (theta^2 (1 + s_i))``."""
    theta = np.asarray(ag.value_of(theta))
    if np.any(theta == 0):
        raise DomainError("theta has zero entries; the optimal precision is undefined")
    s = ag.value_of(row_noise_variance(ag.value_of(alpha), ag.value_of(U)))
    return 1.0 / (theta ** 2 * (1.0 + s)[:, None])


def kl_full(alpha, U, theta, beta):
    """Sum over columns of KL(N(theta_j, diag(theta_j) U diag(alpha) U^T diag(theta_j)) || N(0, diag(1/beta_j)))."""
    _positive(alpha, "alpha")
    _positive(beta, "beta")
    if np.any(ag.value_of(theta) == 0):
        raise DomainError("theta has zero entries; the posterior is singular there")
    a, t, b = ag.lift(alpha), ag.lift(theta), ag.lift(beta)
    s = ag.reshape(row_noise_variance(a, ag.lift(U)), (-1, 1))
    t2 = ag.square(t)
    terms = -ag.log(b) - ag.log(ag.reshape(a, (-1, 1)) * t2) - 1.0 + b * t2 * (1.0 + s)
    return _finish(0.5 * ag.sum(terms), alpha, U, theta, beta)


def kl_lognormal_gamma(gamma, delta, a, b):
    """KL(logNormal(gamma, delta) || InvGamma(a, b)) summed over dimensions.

    ``delta`` is the variance of ``log z``; ``b`` is the inverse-Gamma scale.
    """
    _positive(delta, "delta")
    if a <= 0 or b <= 0:
        raise DomainError("hyperprior parameters a, b must be positive")
    g, d = ag.lift(gamma), ag.lift(delta)
    const = -a * math.log(b) + float(gammaln(a)) - 0.5 * (1.0 + math.log(2 * math.pi))
    terms = a * g + b * ag.exp(0.5 * d - g) - 0.5 * ag.log(d) + const
    return _finish(ag.sum(terms), gamma, delta)


def kl_hier_eb_expected(alpha, U, gamma, delta, Q):
    """Expected conditional EB-KL under ``z ~ logNormal(gamma, delta)``.

    ``Q/2 * sum_i [E z_i - E log z_i - 1 + log((1 + s_i) / alpha_i)]``
    with ``E z = exp(gamma + delta/2)`` and ``E log z = gamma``.
    """
    _positive(alpha, "alpha")
    _positive(delta, "delta")
    a, g, d = ag.lift(alpha), ag.lift(gamma), ag.lift(delta)
    s = row_noise_variance(a, ag.lift(U))
    terms = ag.exp(g + 0.5 * d) - g - 1.0 + ag.log(1.0 + s) - ag.log(a)
    return _finish(0.5 * Q * ag.sum(terms), alpha, U, gamma, delta)


def kl_ard(alpha):
    """ARD variational-dropout KL in noise space: ``0.5 * sum log(1 + 1/alpha)``."""
    _positive(alpha, "alpha")
    a = ag.lift(alpha)
    return _finish(0.5 * ag.sum(ag.log(1.0 + 1.0 / a)), alpha)


def kl_vd_loguniform(log_alpha):
    """Approximate KL to the log-uniform prior (sigmoid fit), per noise unit."""
    la = ag.lift(log_alpha)
    neg_kl = (_VD_K1 * ag.sigmoid(_VD_K2 + _VD_K3 * la)
              - 0.5 * ag.log(1.0 + ag.exp(-la)) - _VD_K1)
    return _finish(-ag.sum(neg_kl), log_alpha)


def kl_gaussian_diag(mu, log_sigma, prior_std=1.0):
    """KL(N(mu, sigma^2) || N(0, prior_std^2)) summed elementwise."""
    m, ls = ag.lift(mu), ag.lift(log_sigma)
    var_ratio = ag.exp(2.0 * ls) / prior_std ** 2
    terms = math.log(prior_std) - ls + 0.5 * (var_ratio + ag.square(m) / prior_std ** 2) - 0.5
    return _finish(ag.sum(terms), mu, log_sigma)
