"""Oracle suites: lattice vs brute force, and gradients vs finite differences."""

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from . import lattice
from .model import ModelConfig, param_init, total_loss, total_loss_grad
from .numerics import Rng, log_softmax_rows

__all__ = [
    "SuiteResult",
    "random_lattice",
    "lattice_suite",
    "posterior_suite",
    "gradient_suite",
    "grad_error",
    "finite_difference_grads",
    "run_all",
    "injected_fault",
]


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    seconds: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<12} max_err={self.max_error:.3e} "
                f"tol={self.tolerance:.0e} ({self.seconds:.2f}s) {self.detail}").rstrip()


def random_lattice(m, n, rng, scale=1.0):
    prior = log_softmax_rows(scale * rng.standard_normal(n))
    trans = log_softmax_rows(scale * rng.standard_normal((m - 1, n, n)))
    emit = scale * rng.standard_normal((m, n))
    return lattice.LatticePotentials(prior, trans.reshape(m - 1, n, n), emit)


def _shapes(max_m=8, max_n=4):
    return [(m, n) for m in range(1, max_m + 1) for n in range(1, max_n + 1)]


def lattice_suite(seeds=100, max_m=8, max_n=4, tol=1e-9):
    """Forward vs enumeration (abs tol) and Viterbi score vs enumeration (exact)."""
    t0 = time.perf_counter()
    worst, score_mismatch = 0.0, 0
    for seed in range(seeds):
        rng = Rng(seed)
        for m, n in _shapes(max_m, max_n):
            lat = random_lattice(m, n, rng)
            worst = max(worst, abs(lattice.forward(lat)[1] - lattice.brute_force_loglik(lat)))
            vit = lattice.viterbi(lat)
            best = lattice.brute_force_best_path(lat)
            if vit.score != best.score or lattice.path_score(lat, vit.states) != vit.score:
                score_mismatch += 1
    ok = worst <= tol and score_mismatch == 0
    return SuiteResult("lattice", ok, worst, tol, time.perf_counter() - t0,
                       f"viterbi_mismatches={score_mismatch}")


def posterior_suite(seeds=100, max_m=8, max_n=4, gamma_tol=1e-10, xi_tol=1e-9):
    t0 = time.perf_counter()
    g_err, x_err = 0.0, 0.0
    for seed in range(seeds):
        rng = Rng(seed)
        for m, n in _shapes(max_m, max_n):
            post = lattice.posteriors(random_lattice(m, n, rng))
            g_err = max(g_err, np.abs(post.gamma.sum(axis=1) - 1.0).max())
            if m > 1:
                x_err = max(x_err, np.abs(post.xi.sum(axis=2) - post.gamma[:-1]).max(),
                            np.abs(post.xi.sum(axis=1) - post.gamma[1:]).max())
    ok = g_err <= gamma_tol and x_err <= xi_tol
    return SuiteResult("posteriors", ok, max(g_err, x_err), xi_tol, time.perf_counter() - t0,
                       f"gamma_err={g_err:.1e} xi_err={x_err:.1e}")


def finite_difference_grads(params, x, cfg, step=1e-5):
    num = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            lp = total_loss(params, x, cfg)
            p[idx] = old - step
            lm = total_loss(params, x, cfg)
            p[idx] = old
            g[idx] = (lp - lm) / (2 * step)
        num[name] = g
    return num


def grad_error(analytic, numeric, abs_floor=1e-8):
    """Return ``(max_rel, max_abs)`` over all parameters.

    Relative error is only counted for entries whose absolute error exceeds
    ``abs_floor``, so near-zero gradients are judged on the absolute scale.
    """
    worst_rel, worst_abs = 0.0, 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        diff = np.abs(a - n)
        worst_abs = max(worst_abs, float(diff.max(initial=0.0)))
        big = diff > abs_floor
        if big.any():
            rel = diff[big] / np.maximum(np.abs(a[big]), np.abs(n[big]))
            worst_rel = max(worst_rel, float(rel.max()))
    return worst_rel, worst_abs


GRAD_CONFIGS = [
    dict(variant=v, hop=h) for v in ("neural_hmm", "vq_apc") for h in (1, 3)
]


def gradient_suite(seed=0, tol=1e-4, step=1e-5, num_frames=20, configs=None):
    t0 = time.perf_counter()
    worst = 0.0
    details = []
    for overrides in configs or GRAD_CONFIGS:
        cfg = ModelConfig(num_states=4, time_shift=5, feat_dim=6, hidden_dim=8,
                          cell="elman", **overrides)
        rng = Rng(seed)
        params = param_init(cfg, rng)
        x = rng.standard_normal((num_frames, cfg.feat_dim))
        _, analytic = total_loss_grad(params, x, cfg)
        err, abs_err = grad_error(analytic, finite_difference_grads(params, x, cfg, step))
        details.append(f"{cfg.variant}/H={cfg.hop}:rel={err:.1e},abs={abs_err:.1e}")
        worst = max(worst, err)
    return SuiteResult("gradients", worst <= tol, worst, tol, time.perf_counter() - t0,
                       " ".join(details))


@contextlib.contextmanager
def injected_fault(kind):
    """Deliberately break the lattice kernel to confirm the suites notice."""
    if kind is None:
        yield
        return
    if kind != "xi-sign":
        raise ValueError(f"unknown fault {kind!r}")
    original = lattice.posteriors

    def flipped(lat):
        post = original(lat)
        return lattice.PosteriorSet(post.gamma, -post.xi, post.loglik)

    lattice.posteriors = flipped
    try:
        yield
    finally:
        lattice.posteriors = original


def run_all(fault=None, seeds=100):
    with injected_fault(fault):
        return [lattice_suite(seeds), posterior_suite(seeds), gradient_suite()]
