"""Exact log-space inference on a single linear chain.

The recursions are compiled with numba; everything else is plain numpy.
Potentials are stored normalized, so the gradient of the log-likelihood
with respect to any log-potential is the posterior probability that the
entry lies on the path.
"""

from dataclasses import dataclass

import numba
import numpy as np

from .numerics import log_sum_exp

__all__ = [
    "LatticeError",
    "LatticePotentials",
    "PosteriorSet",
    "StatePath",
    "forward",
    "backward",
    "posteriors",
    "loglik_grad_potentials",
    "viterbi",
    "path_score",
    "sample_path",
    "brute_force_loglik",
    "brute_force_best_path",
]

NORM_TOL = 1e-9
BRUTE_FORCE_LIMIT = 10**6


class LatticeError(ValueError):
    pass


@dataclass
class LatticePotentials:
    prior: np.ndarray  # (N,)
    trans: np.ndarray  # (M-1, N, N), [m, i, j] = log p(node m+1 = j | node m = i)
    emit: np.ndarray  # (M, N)

    def __post_init__(self):
        self.prior = np.ascontiguousarray(self.prior, dtype=np.float64)
        self.emit = np.ascontiguousarray(self.emit, dtype=np.float64)
        n = self.prior.shape[0] if self.prior.ndim == 1 else -1
        trans = np.asarray(self.trans, dtype=np.float64)
        if trans.size == 0 and self.emit.ndim == 2:
            trans = trans.reshape(0, n, n)
        self.trans = np.ascontiguousarray(trans)

    @property
    def num_nodes(self):
        return self.emit.shape[0]

    @property
    def num_states(self):
        return self.prior.shape[0]

    def validate(self):
        if self.prior.ndim != 1 or self.prior.size < 1:
            raise LatticeError("prior must be a nonempty vector")
        n = self.prior.size
        if self.emit.ndim != 2 or self.emit.shape[1] != n or self.emit.shape[0] < 1:
            raise LatticeError(f"emit must be (M, {n}), got {self.emit.shape}")
        m = self.emit.shape[0]
        if self.trans.shape != (m - 1, n, n):
            raise LatticeError(f"trans must be {(m - 1, n, n)}, got {self.trans.shape}")
        for name, arr in (("prior", self.prior), ("trans", self.trans)):
            if np.isnan(arr).any() or (arr == np.inf).any():
                raise LatticeError(f"{name} contains NaN or +inf")
        if not np.isfinite(self.emit).all():
            raise LatticeError("emit must be finite")
        if abs(log_sum_exp(self.prior)) > NORM_TOL:
            raise LatticeError("prior does not log-sum to 0")
        if m > 1:
            rows = log_sum_exp(self.trans, axis=2)
            if np.abs(rows).max() > NORM_TOL:
                raise LatticeError("transition rows do not log-sum to 0")
        return self


@dataclass
class PosteriorSet:
    gamma: np.ndarray  # (M, N)
    xi: np.ndarray  # (M-1, N, N)
    loglik: float


@dataclass
class StatePath:
    states: np.ndarray
    score: float


@numba.njit(cache=True)
def _lse_col(a, t, j):
    # log sum_i exp(a[i] + t[i, j])
    n = a.shape[0]
    mx = -np.inf
    for i in range(n):
        v = a[i] + t[i, j]
        if v > mx:
            mx = v
    if mx == -np.inf:
        return -np.inf
    s = 0.0
    for i in range(n):
        s += np.exp(a[i] + t[i, j] - mx)
    return mx + np.log(s)


@numba.njit(cache=True)
def _forward_kernel(prior, trans, emit):
    m_nodes, n = emit.shape
    alpha = np.empty((m_nodes, n))
    for j in range(n):
        alpha[0, j] = prior[j] + emit[0, j]
    for m in range(m_nodes - 1):
        tt = trans[m]
        for j in range(n):
            alpha[m + 1, j] = _lse_col(alpha[m], tt, j) + emit[m + 1, j]
    return alpha


@numba.njit(cache=True)
def _backward_kernel(trans, emit):
    m_nodes, n = emit.shape
    beta = np.zeros((m_nodes, n))
    nxt = np.empty(n)
    for m in range(m_nodes - 2, -1, -1):
        for j in range(n):
            nxt[j] = emit[m + 1, j] + beta[m + 1, j]
        tt = trans[m]
        for i in range(n):
            mx = -np.inf
            for j in range(n):
                v = tt[i, j] + nxt[j]
                if v > mx:
                    mx = v
            if mx == -np.inf:
                beta[m, i] = -np.inf
                continue
            s = 0.0
            for j in range(n):
                s += np.exp(tt[i, j] + nxt[j] - mx)
            beta[m, i] = mx + np.log(s)
    return beta


@numba.njit(cache=True)
def _viterbi_kernel(prior, trans, emit):
    m_nodes, n = emit.shape
    delta = np.empty((m_nodes, n))
    back = np.zeros((m_nodes, n), dtype=np.int64)
    for j in range(n):
        delta[0, j] = prior[j] + emit[0, j]
    for m in range(m_nodes - 1):
        for j in range(n):
            best = -np.inf
            arg = 0
            for i in range(n):
                v = delta[m, i] + trans[m, i, j]
                if v > best:  # strict: smallest index wins ties
                    best = v
                    arg = i
            delta[m + 1, j] = best + emit[m + 1, j]
            back[m + 1, j] = arg
    path = np.zeros(m_nodes, dtype=np.int64)
    best = -np.inf
    for j in range(n):
        if delta[m_nodes - 1, j] > best:
            best = delta[m_nodes - 1, j]
            path[m_nodes - 1] = j
    for m in range(m_nodes - 1, 0, -1):
        path[m - 1] = back[m, path[m]]
    return path, best


def forward(lat, check=True):
    """Return ``(alpha, loglik)``; ``alpha[m, j]`` is the log prefix mass.

    ``check=False`` skips normalization checks so the recursion can be
    evaluated on perturbed (unnormalized) potentials.
    """
    if check:
        lat.validate()
    alpha = _forward_kernel(lat.prior, lat.trans, lat.emit)
    return alpha, log_sum_exp(alpha[-1])


def backward(lat, check=True):
    if check:
        lat.validate()
    return _backward_kernel(lat.trans, lat.emit)


def posteriors(lat, check=True):
    alpha, ll = forward(lat, check)
    beta = _backward_kernel(lat.trans, lat.emit)
    gamma = np.exp(alpha + beta - ll)
    xi = np.exp(
        alpha[:-1, :, None]
        + lat.trans
        + (lat.emit[1:] + beta[1:])[:, None, :]
        - ll
    )
    return PosteriorSet(gamma=gamma, xi=xi, loglik=ll)


def loglik_grad_potentials(lat, post=None):
    """Gradient of the log-likelihood w.r.t. prior, transition and emission entries."""
    if post is None:
        post = posteriors(lat)
    return post.gamma[0].copy(), post.xi.copy(), post.gamma.copy()


def viterbi(lat):
    lat.validate()
    states, score = _viterbi_kernel(lat.prior, lat.trans, lat.emit)
    return StatePath(states=states, score=float(score))


def path_score(lat, states):
    """Log joint of one path, summed in the same order as the Viterbi recursion."""
    z = np.asarray(states)
    s = lat.prior[z[0]] + lat.emit[0, z[0]]
    for m in range(len(z) - 1):
        s = s + lat.trans[m, z[m], z[m + 1]]
        s = s + lat.emit[m + 1, z[m + 1]]
    return float(s)


def sample_path(lat, rng):
    """Ancestral sample from the prior and transitions; emissions are ignored."""
    lat.validate()
    m_nodes = lat.num_nodes
    u = rng.random(m_nodes)
    z = np.empty(m_nodes, dtype=np.int64)

    def draw(logp, ui):
        c = np.cumsum(np.exp(logp))
        return min(int(np.searchsorted(c, ui * c[-1], side="right")), len(c) - 1)

    z[0] = draw(lat.prior, u[0])
    for m in range(m_nodes - 1):
        z[m + 1] = draw(lat.trans[m, z[m]], u[m + 1])
    return StatePath(states=z, score=path_score(lat, z))


def _all_path_scores(lat):
    """Score tensor of shape ``(N,) * M``; entry ``[z_1, ..., z_M]`` is the path's log joint.

    Terms are added in the same order as the Viterbi recursion, so equal
    paths give bit-identical scores.
    """
    lat.validate()
    m_nodes, n = lat.emit.shape
    if n**m_nodes > BRUTE_FORCE_LIMIT:
        raise LatticeError(f"instance too large for enumeration: {n}^{m_nodes}")
    s = lat.prior + lat.emit[0]
    for m in range(m_nodes - 1):
        s = (s[..., :, None] + lat.trans[m]) + lat.emit[m + 1]
    return s


def brute_force_loglik(lat):
    return log_sum_exp(_all_path_scores(lat))


def brute_force_best_path(lat):
    s = _all_path_scores(lat)
    i = int(np.argmax(s))
    states = np.array(np.unravel_index(i, s.shape), dtype=np.int64)
    return StatePath(states=states, score=float(s.reshape(-1)[i]))
