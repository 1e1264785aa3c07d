"""Built-in oracle checks run by ``structdrop verify``.

Each check compares a library routine with an independent computation
(Monte-Carlo, dense linear algebra, finite differences or brute force).
"""
from __future__ import annotations

import sys
import time

import numpy as np
from scipy.stats import multivariate_normal

from . import autograd as ag
from . import diagnostics as diag
from . import kl as klmod
from . import metrics
from .householder import HouseholderChain
from .inference import Model, Objective, negative_elbo
from .layers import build_network
from .tensor import make_rng


def check_orthogonality():
    worst = 0.0
    for dim, T, rank in ((4, 1, None), (6, 3, None), (8, 4, 2)):
        U = HouseholderChain(dim, T, rank=rank, rng=make_rng(dim)).matrix()
        worst = max(worst, np.abs(U.T @ U - np.eye(dim)).max())
    return worst < 1e-12, f"max |U^T U - I| = {worst:.2e}"


def check_kl_monte_carlo():
    rng = make_rng(11)
    K = 3
    alpha = rng.uniform(0.2, 0.8, K)
    U = HouseholderChain(K, 2, rng=make_rng(12)).matrix()
    theta = rng.normal(0.0, 1.0, (K, 1)) + 1.5
    beta = klmod.empirical_bayes_beta(theta, alpha, U) * 1.3
    closed = klmod.kl_full(alpha, U, theta, beta)
    mean = theta[:, 0]
    cov = (theta * U * alpha) @ (theta * U).T
    q = multivariate_normal(mean, cov)
    p = multivariate_normal(np.zeros(K), np.diag(1.0 / beta[:, 0]))
    w = q.rvs(size=200000, random_state=np.random.default_rng(13))
    terms = q.logpdf(w) - p.logpdf(w)
    se = terms.std() / np.sqrt(len(terms))
    ok = abs(terms.mean() - closed) < 4 * se
    return ok, f"closed {closed:.5f} vs MC {terms.mean():.5f} (se {se:.1e})"


def check_eb_collapse():
    rng = make_rng(21)
    alpha = rng.uniform(0.1, 2.0, 5)
    U = HouseholderChain(5, 2, rng=make_rng(22)).matrix()
    theta = rng.normal(size=(5, 4))
    beta = klmod.empirical_bayes_beta(theta, alpha, U)
    diff = abs(klmod.kl_full(alpha, U, theta, beta) - klmod.kl_eb_vsd(alpha, U, 4))
    return diff < 1e-10, f"|kl_full(beta*) - kl_eb| = {diff:.1e}"


def check_gradients():
    spec = {"architecture": [{"type": "dense", "units": 4}, {"type": "tanh"}, {"type": "dense", "units": 3}],
            "input_shape": [3], "variant": "vsd", "likelihood": "categorical",
            "layer_defaults": {"n_transforms": 2}}
    model = Model(spec, seed=3)
    X = make_rng(4).normal(size=(5, 3))
    y = np.array([0, 1, 2, 1, 0])
    obj = Objective("vsd", 0.5, 50, "categorical")
    err = ag.finite_difference_check(lambda: negative_elbo(model, X, y, obj, make_rng(5)), model.parameters())
    return err < 1e-5, f"max relative FD error {err:.1e}"


def check_metrics():
    s_in = np.array([0.9, 0.8, 0.8, 0.6, 0.55])
    s_out = np.array([0.7, 0.6, 0.5, 0.8])
    brute = np.mean([(a > b) + 0.5 * (a == b) for a in s_in for b in s_out])
    got = metrics.auroc(s_in, s_out)
    return abs(got - brute) < 1e-15, f"auroc {got:.6f} vs pairwise {brute:.6f}"


def check_spectral():
    W = make_rng(31).normal(size=(8, 5))
    sn = diag.spectral_norm(W)
    ref = np.linalg.svd(W, compute_uv=False)[0]
    return abs(sn - ref) < 1e-6, f"power iteration {sn:.8f} vs SVD {ref:.8f}"


def check_regularizer():
    net = build_network([{"type": "dense", "units": 4}, {"type": "dense", "units": 3},
                         {"type": "dense", "units": 2}], [3], "map", make_rng(41))
    X = make_rng(42).normal(size=(4, 3))
    U = HouseholderChain(4, 2, rng=make_rng(43)).matrix()
    alpha = np.full(4, 1e-3)
    an = diag.regularizer_analytic(net, X, alpha, U, layer=1)
    mc = diag.regularizer_mc(net, X, alpha, U, 200000, make_rng(44), layer=1)
    rel = abs(mc - an) / an
    return rel < 0.02, f"analytic {an:.4e} vs MC {mc:.4e} (rel {rel:.1e})"


CHECKS = [
    ("householder orthogonality", check_orthogonality),
    ("KL closed form vs Monte-Carlo", check_kl_monte_carlo),
    ("empirical-Bayes KL collapse", check_eb_collapse),
    ("objective gradients vs finite differences", check_gradients),
    ("AUROC vs pairwise enumeration", check_metrics),
    ("spectral norm vs SVD", check_spectral),
    ("regularizer Gauss-Newton vs Monte-Carlo", check_regularizer),
]


def run_all(stream=None) -> bool:
    stream = stream or sys.stdout
    all_ok = True
    for name, fn in CHECKS:
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - report and continue
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail} [{time.perf_counter() - start:.2f}s]", file=stream)
    print("all checks passed" if all_ok else "some checks FAILED", file=stream)
    return all_ok
