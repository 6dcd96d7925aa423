"""Neural HMM parametrization and its exact gradients.

Frame indices are 0-based throughout. A node at frame ``t`` (``t >= k``)
is scored from the encoder state ``h[t - k]``, so ``scores[t - k]`` is the
state representation for frame ``t``.

Parameters live in a plain ``dict`` mapping names to float64 arrays:

- ``enc.{l}.W_x``, ``enc.{l}.W_h``, ``enc.{l}.b`` for encoder layer ``l``
  (gate-stacked ``[i, f, g, o]`` rows for the LSTM cell)
- ``U``: ``(hidden_dim, N)`` state-score codebook
- ``V``: ``(d, N)`` emission means, one column per state
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import lattice
from .numerics import log_softmax_rows, log_sum_exp, softmax_rows

__all__ = [
    "ModelConfig",
    "ModelError",
    "SequenceTooShort",
    "Encoding",
    "ChainIndex",
    "param_init",
    "param_count",
    "param_names",
    "encode",
    "encode_backward",
    "state_scores",
    "emission_logprob",
    "chain_indices",
    "build_chain_lattices",
    "chain_loglik",
    "total_loss",
    "total_loss_grad",
    "frame_posteriors",
]

log = logging.getLogger(__name__)

VARIANTS = ("neural_hmm", "vq_apc")
CELLS = ("elman", "lstm")
LOG_2PI = np.log(2.0 * np.pi)


class ModelError(ValueError):
    pass


class SequenceTooShort(ModelError):
    pass


@dataclass
class ModelConfig:
    num_states: int = 16
    time_shift: int = 5
    hop: int = 1
    feat_dim: int = 40
    hidden_dim: int = 64
    num_layers: int = 1
    cell: str = "elman"
    variant: str = "neural_hmm"
    tap_layer: int = -1

    def validate(self):
        if self.time_shift < 1:
            raise ModelError(f"time_shift must be >= 1, got {self.time_shift}")
        if self.hop < 1:
            raise ModelError(f"hop must be >= 1, got {self.hop}")
        if self.variant not in VARIANTS:
            raise ModelError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.cell not in CELLS:
            raise ModelError(f"cell must be one of {CELLS}, got {self.cell!r}")
        min_states = 2 if self.variant == "vq_apc" else 1
        if self.num_states < min_states:
            raise ModelError(f"num_states must be >= {min_states} for {self.variant}")
        if self.feat_dim < 1 or self.hidden_dim < 1 or self.num_layers < 1:
            raise ModelError("feat_dim, hidden_dim and num_layers must be positive")
        if not -self.num_layers <= self.tap_layer < self.num_layers:
            raise ModelError(f"tap_layer {self.tap_layer} out of range for {self.num_layers} layers")
        return self

    @property
    def min_frames(self):
        return self.time_shift + self.hop + 1


@dataclass
class ChainIndex:
    offset: int
    node_times: np.ndarray


@dataclass
class Encoding:
    """Per-layer hidden states plus whatever BPTT needs."""

    layers: list  # list of (T, D_h) arrays
    inputs: np.ndarray
    cache: list = field(default_factory=list)

    @property
    def h(self):
        return self.layers[-1]


def param_names(cfg):
    names = []
    for l in range(cfg.num_layers):
        names += [f"enc.{l}.W_x", f"enc.{l}.W_h", f"enc.{l}.b"]
    return names + ["U", "V"]


def param_init(cfg, rng):
    """Uniform(+-1/sqrt(fan_in)) for encoder and U; V ~ 0.1 * N(0, 1)."""
    cfg.validate()
    gates = 4 if cfg.cell == "lstm" else 1
    dh = cfg.hidden_dim
    params = {}
    for l in range(cfg.num_layers):
        d_in = cfg.feat_dim if l == 0 else dh
        fan_in = d_in + dh
        bound = 1.0 / np.sqrt(fan_in)
        params[f"enc.{l}.W_x"] = rng.uniform(-bound, bound, (gates * dh, d_in))
        params[f"enc.{l}.W_h"] = rng.uniform(-bound, bound, (gates * dh, dh))
        params[f"enc.{l}.b"] = rng.uniform(-bound, bound, gates * dh)
    bound = 1.0 / np.sqrt(dh)
    params["U"] = rng.uniform(-bound, bound, (dh, cfg.num_states))
    params["V"] = 0.1 * rng.standard_normal((cfg.feat_dim, cfg.num_states))
    return params


def param_count(params):
    return int(sum(np.asarray(v).size for v in params.values()))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _frames(f):
    x = getattr(f, "frames", f)
    return np.asarray(x, dtype=np.float64)


def encode(params, f, cfg):
    """Run the causal recurrent encoder over all frames."""
    x = _frames(f)
    if x.ndim != 2 or x.shape[1] != cfg.feat_dim:
        raise ModelError(f"expected (T, {cfg.feat_dim}) features, got {x.shape}")
    t_len, dh = x.shape[0], cfg.hidden_dim
    layers, cache = [], []
    inp = x
    for l in range(cfg.num_layers):
        w_x = params[f"enc.{l}.W_x"]
        w_h = params[f"enc.{l}.W_h"]
        b = params[f"enc.{l}.b"]
        pre = inp @ w_x.T + b
        h = np.zeros((t_len, dh))
        prev = np.zeros(dh)
        if cfg.cell == "elman":
            for t in range(t_len):
                prev = np.tanh(pre[t] + w_h @ prev)
                h[t] = prev
            cache.append(None)
        else:
            c = np.zeros((t_len, dh))
            gates = np.zeros((t_len, 4 * dh))
            c_prev = np.zeros(dh)
            for t in range(t_len):
                z = pre[t] + w_h @ prev
                i, fg, o = _sigmoid(z[:dh]), _sigmoid(z[dh:2 * dh]), _sigmoid(z[3 * dh:])
                g = np.tanh(z[2 * dh:3 * dh])
                c_prev = fg * c_prev + i * g
                prev = o * np.tanh(c_prev)
                gates[t] = np.concatenate([i, fg, g, o])
                c[t], h[t] = c_prev, prev
            cache.append((gates, c))
        layers.append(h)
        inp = h
    return Encoding(layers=layers, inputs=x, cache=cache)


def encode_backward(params, enc, d_top, cfg, grads):
    """Backpropagate ``d_top`` (dLoss/dh of the top layer) through time.

    Accumulates encoder gradients into ``grads`` in place.
    """
    dh = cfg.hidden_dim
    d_out = d_top
    for l in range(cfg.num_layers - 1, -1, -1):
        w_x = params[f"enc.{l}.W_x"]
        w_h = params[f"enc.{l}.W_h"]
        h = enc.layers[l]
        inp = enc.inputs if l == 0 else enc.layers[l - 1]
        t_len = h.shape[0]
        d_pre = np.zeros((t_len, w_x.shape[0]))
        carry = np.zeros(dh)
        if cfg.cell == "elman":
            for t in range(t_len - 1, -1, -1):
                da = (d_out[t] + carry) * (1.0 - h[t] ** 2)
                d_pre[t] = da
                carry = w_h.T @ da
        else:
            gates, c = enc.cache[l]
            dc_carry = np.zeros(dh)
            for t in range(t_len - 1, -1, -1):
                i, fg = gates[t, :dh], gates[t, dh:2 * dh]
                g, o = gates[t, 2 * dh:3 * dh], gates[t, 3 * dh:]
                tc = np.tanh(c[t])
                dh_t = d_out[t] + carry
                dc = dh_t * o * (1.0 - tc ** 2) + dc_carry
                c_prev = c[t - 1] if t > 0 else np.zeros(dh)
                dz = np.concatenate([
                    dc * g * i * (1.0 - i),
                    dc * c_prev * fg * (1.0 - fg),
                    dc * i * (1.0 - g ** 2),
                    dh_t * tc * o * (1.0 - o),
                ])
                d_pre[t] = dz
                carry = w_h.T @ dz
                dc_carry = dc * fg
        h_prev = np.vstack([np.zeros((1, dh)), h[:-1]])
        grads[f"enc.{l}.W_x"] += d_pre.T @ inp
        grads[f"enc.{l}.W_h"] += d_pre.T @ h_prev
        grads[f"enc.{l}.b"] += d_pre.sum(axis=0)
        d_out = d_pre @ w_x
    return d_out


def state_scores(h, U, k):
    """Rows ``s[t - k] = h[t - k] @ U`` for frames ``t = k .. T-1``."""
    h = getattr(h, "h", h)
    t_len = h.shape[0]
    if t_len <= k:
        raise SequenceTooShort(f"sequence shorter than time shift: T={t_len}, k={k}")
    return h[: t_len - k] @ U


def emission_logprob(x, V):
    """Log N(x; v_j, I) for every column ``v_j``; ``x`` may be (d,) or (M, d)."""
    x = np.asarray(x, dtype=np.float64)
    d = V.shape[0]
    if x.shape[-1] != d:
        raise ModelError(f"dimension mismatch: x has {x.shape[-1]}, V has {d}")
    diff = x[..., :, None] - V
    return -0.5 * d * LOG_2PI - 0.5 * np.sum(diff * diff, axis=-2)


def chain_indices(num_frames, cfg):
    k, hop = cfg.time_shift, cfg.hop
    if num_frames < k + hop + 1:
        raise SequenceTooShort(
            f"sequence too short: T={num_frames} needs at least k+H+1={k + hop + 1} frames"
        )
    return [ChainIndex(c, np.arange(k + c, num_frames, hop)) for c in range(hop)]


def _chain_lattice(scores, emits, nodes, k, linear=False):
    s = scores[nodes - k]
    prior = log_softmax_rows(s[0])
    if linear:
        phi = np.broadcast_to(s[1:, None, :], (len(nodes) - 1, s.shape[1], s.shape[1]))
    else:
        phi = s[:-1, :, None] * s[1:, None, :]
    trans = log_softmax_rows(phi)
    return lattice.LatticePotentials(prior, trans, emits[nodes])


def build_chain_lattices(params, f, cfg, enc=None, linear_transitions=False):
    """One lattice per hop offset.

    ``linear_transitions`` replaces each transition score row by the next
    node's score vector, removing the dependence on the previous state.
    """
    x = _frames(f)
    chains = chain_indices(x.shape[0], cfg)
    enc = enc if enc is not None else encode(params, x, cfg)
    scores = state_scores(enc.h, params["U"], cfg.time_shift)
    emits = emission_logprob(x, params["V"])
    return [
        (ci, _chain_lattice(scores, emits, ci.node_times, cfg.time_shift, linear_transitions))
        for ci in chains
    ]


def chain_loglik(lat):
    return lattice.forward(lat)[1]


def _vq_apc_terms(scores, emits):
    """Per-frame log mixture likelihood and code posteriors."""
    joint = log_softmax_rows(scores) + emits
    ll = log_sum_exp(joint, axis=1)
    return ll, np.exp(joint - ll[:, None])


def total_loss(params, f, cfg):
    """Negative log-likelihood of frames ``k .. T-1`` (summed, not averaged)."""
    x = _frames(f)
    if cfg.variant == "vq_apc":
        chain_indices(x.shape[0], cfg)
        enc = encode(params, x, cfg)
        scores = state_scores(enc.h, params["U"], cfg.time_shift)
        ll, _ = _vq_apc_terms(scores, emission_logprob(x[cfg.time_shift:], params["V"]))
        return -float(ll.sum())
    return -sum(chain_loglik(lat) for _, lat in build_chain_lattices(params, x, cfg))


def frame_posteriors(params, f, cfg, linear_transitions=False):
    """Per-frame state posteriors for frames ``k .. T-1``."""
    x = _frames(f)
    enc = encode(params, x, cfg)
    k = cfg.time_shift
    if cfg.variant == "vq_apc":
        scores = state_scores(enc.h, params["U"], k)
        return _vq_apc_terms(scores, emission_logprob(x[k:], params["V"]))[1]
    out = np.zeros((x.shape[0] - k, cfg.num_states))
    for ci, lat in build_chain_lattices(params, x, cfg, enc, linear_transitions):
        out[ci.node_times - k] = lattice.posteriors(lat).gamma
    return out


def total_loss_grad(params, f, cfg):
    """Return ``(loss, grads)`` with ``grads`` keyed like ``params``."""
    x = _frames(f)
    k = cfg.time_shift
    enc = encode(params, x, cfg)
    U, V = params["U"], params["V"]
    scores = state_scores(enc.h, U, k)
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    d_scores = np.zeros_like(scores)

    if cfg.variant == "vq_apc":
        chain_indices(x.shape[0], cfg)
        xs = x[k:]
        ll, resp = _vq_apc_terms(scores, emission_logprob(xs, V))
        loss = -float(ll.sum())
        d_scores -= resp - softmax_rows(scores)
        grads["V"] -= xs.T @ resp - V * resp.sum(axis=0)
    else:
        emits = emission_logprob(x, V)
        loss = 0.0
        for ci in chain_indices(x.shape[0], cfg):
            nodes = ci.node_times
            lat = _chain_lattice(scores, emits, nodes, k)
            post = lattice.posteriors(lat)
            loss -= post.loglik
            s = scores[nodes - k]
            ds = np.zeros_like(s)
            ds[0] += post.gamma[0] - np.exp(lat.prior)
            if len(nodes) > 1:
                g_phi = post.xi - post.gamma[:-1, :, None] * np.exp(lat.trans)
                ds[:-1] += np.einsum("mij,mj->mi", g_phi, s[1:])
                ds[1:] += np.einsum("mij,mi->mj", g_phi, s[:-1])
            d_scores[nodes - k] -= ds
            xn = x[nodes]
            grads["V"] -= xn.T @ post.gamma - V * post.gamma.sum(axis=0)

    h_used = enc.h[: x.shape[0] - k]
    grads["U"] += h_used.T @ d_scores
    d_h = np.zeros_like(enc.h)
    d_h[: x.shape[0] - k] = d_scores @ U.T
    encode_backward(params, enc, d_h, cfg, grads)
    return loss, grads
