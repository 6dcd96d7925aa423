"""Decoding and the three probing evaluations: NMI, segmentation, linear probe."""

from dataclasses import dataclass

import numpy as np

from . import lattice
from .model import build_chain_lattices, chain_indices, emission_logprob, encode, state_scores
from .numerics import log_softmax_rows, softmax_rows

__all__ = [
    "CodeSequence",
    "SegScore",
    "LinearProbe",
    "decode_codes",
    "contingency",
    "nmi",
    "boundaries_from_codes",
    "segments_to_boundaries",
    "seg_prf",
    "seg_prf_counts",
    "representations",
    "probe_train",
    "probe_eval",
    "write_codes",
    "read_codes",
    "format_report",
    "write_report_csv",
]


@dataclass
class CodeSequence:
    codes: np.ndarray  # one code per frame k .. T-1
    time_shift: int
    frame_shift_ms: float = 10.0


@dataclass
class SegScore:
    precision: float
    recall: float
    f1: float
    hits: int
    hyp_total: int
    ref_total: int


def decode_codes(params, frames, cfg):
    """Viterbi per chain, scattered back to the frames each chain emits."""
    x = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    k = cfg.time_shift
    if cfg.variant == "vq_apc":
        # Frames are independent given the encoder: per-frame MAP code.
        chain_indices(x.shape[0], cfg)
        enc = encode(params, x, cfg)
        joint = log_softmax_rows(state_scores(enc.h, params["U"], k)) + emission_logprob(
            x[k:], params["V"]
        )
        return CodeSequence(np.argmax(joint, axis=1).astype(np.int64), k)
    codes = np.full(x.shape[0] - k, -1, dtype=np.int64)
    for ci, lat in build_chain_lattices(params, x, cfg):
        codes[ci.node_times - k] = lattice.viterbi(lat).states
    assert (codes >= 0).all()
    return CodeSequence(codes, k)


def contingency(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} codes vs {b.shape[0]} labels")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    return table


def _entropy(p):
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def nmi(codes, labels, norm="arithmetic", table=None):
    """Normalized mutual information between codes and reference labels.

    ``norm`` picks the denominator: ``arithmetic`` (H(Z)+H(Y))/2,
    ``max`` max(H(Z), H(Y)) or ``sqrt`` sqrt(H(Z)H(Y)). Pass a
    precomputed contingency ``table`` to pool counts across utterances.
    """
    if table is None:
        c = getattr(codes, "codes", codes)
        table = contingency(c, labels)
    joint = table / table.sum()
    pz, py = joint.sum(axis=1), joint.sum(axis=0)
    hz, hy = _entropy(pz), _entropy(py)
    if hz == 0.0 or hy == 0.0:
        return 0.0
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(pz, py)[nz])))
    if norm == "arithmetic":
        denom = 0.5 * (hz + hy)
    elif norm == "max":
        denom = max(hz, hy)
    elif norm == "sqrt":
        denom = np.sqrt(hz * hy)
    else:
        raise ValueError(f"unknown NMI normalization {norm!r}")
    return float(min(1.0, max(0.0, mi / denom)))


def boundaries_from_codes(codes):
    c = np.asarray(getattr(codes, "codes", codes))
    if c.size == 0:
        raise ValueError("empty code sequence")
    return np.flatnonzero(c[1:] != c[:-1]) + 1


def segments_to_boundaries(segments, offset=0):
    """Interior boundaries of a segmentation, shifted by ``-offset`` frames."""
    starts = [s for s, _, _ in segments[1:] if s - offset > 0]
    return np.asarray([s - offset for s in starts], dtype=np.int64)


def _check_sorted(a, name):
    if np.any(np.diff(a) < 0):
        raise ValueError(f"{name} boundaries are not sorted")


def seg_prf_counts(hyp, ref, tol_frames=2):
    """One-to-one boundary matching; returns ``(hits, len(hyp), len(ref))``.

    Reference boundaries are visited in time order and each takes the
    earliest unmatched hypothesis within ``tol_frames`` (inclusive). All
    tolerance windows have the same width, so this yields a maximum
    matching and the hit count is the same with the roles swapped.
    """
    hyp = np.asarray(hyp, dtype=np.int64)
    ref = np.asarray(ref, dtype=np.int64)
    _check_sorted(hyp, "hypothesis")
    _check_sorted(ref, "reference")
    hits, j = 0, 0
    for r in ref:
        while j < len(hyp) and hyp[j] < r - tol_frames:
            j += 1
        if j < len(hyp) and hyp[j] <= r + tol_frames:
            hits += 1
            j += 1
    return hits, len(hyp), len(ref)


def _prf(hits, n_hyp, n_ref):
    if n_hyp == 0 and n_ref == 0:
        return SegScore(1.0, 1.0, 1.0, 0, 0, 0)
    p = hits / n_hyp if n_hyp else 0.0
    r = hits / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return SegScore(p, r, f, hits, n_hyp, n_ref)


def seg_prf(hyp, ref, tol_ms=20.0, frame_shift_ms=10.0):
    tol = int(np.floor(tol_ms / frame_shift_ms + 1e-9))
    return _prf(*seg_prf_counts(hyp, ref, tol))


def seg_prf_pooled(pairs, tol_ms=20.0, frame_shift_ms=10.0):
    """Sum hit/hyp/ref counts over ``(hyp, ref)`` pairs, then form ratios."""
    tol = int(np.floor(tol_ms / frame_shift_ms + 1e-9))
    tot = np.zeros(3, dtype=np.int64)
    for hyp, ref in pairs:
        tot += seg_prf_counts(hyp, ref, tol)
    return _prf(*(int(v) for v in tot))


def representations(params, frames, cfg, layer=None):
    """Encoder outputs of the tap layer for frames ``k .. T-1``.

    Row ``i`` is the hidden vector the model uses to score frame ``k + i``.
    """
    layer = cfg.tap_layer if layer is None else layer
    enc = encode(params, frames, cfg)
    h = enc.layers[layer]
    return h[: h.shape[0] - cfg.time_shift]


@dataclass
class LinearProbe:
    W: np.ndarray  # (dim, C)
    b: np.ndarray  # (C,)
    classes: np.ndarray

    def predict(self, reps):
        idx = np.argmax(np.asarray(reps) @ self.W + self.b, axis=1)
        return self.classes[idx]


def probe_train(reps, labels, epochs=10, lr=1e-3, batch_size=32, seed=0):
    """Multinomial logistic regression trained with Adam on frozen features."""
    x = np.asarray(reps, dtype=np.float64)
    y_raw = np.asarray(labels)
    if x.shape[0] != y_raw.shape[0]:
        raise ValueError(f"label/frame mismatch: {x.shape[0]} frames vs {y_raw.shape[0]} labels")
    classes, y = np.unique(y_raw, return_inverse=True)
    n, dim = x.shape
    n_cls = len(classes)
    W = np.zeros((dim, n_cls))
    b = np.zeros(n_cls)
    mw, vw, mb, vb = (np.zeros_like(W), np.zeros_like(W), np.zeros_like(b), np.zeros_like(b))
    b1, b2, eps = 0.9, 0.999, 1e-8
    gen = np.random.Generator(np.random.PCG64(seed))
    t = 0
    for _ in range(epochs):
        order = gen.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            p = softmax_rows(x[idx] @ W + b)
            p[np.arange(len(idx)), y[idx]] -= 1.0
            p /= len(idx)
            gw, gb = x[idx].T @ p, p.sum(axis=0)
            t += 1
            mw = b1 * mw + (1 - b1) * gw
            vw = b2 * vw + (1 - b2) * gw * gw
            mb = b1 * mb + (1 - b1) * gb
            vb = b2 * vb + (1 - b2) * gb * gb
            W -= lr * (mw / (1 - b1**t)) / (np.sqrt(vw / (1 - b2**t)) + eps)
            b -= lr * (mb / (1 - b1**t)) / (np.sqrt(vb / (1 - b2**t)) + eps)
    return LinearProbe(W, b, classes)


def probe_eval(probe, reps, labels):
    """Frame error rate of the probe."""
    reps = np.asarray(reps)
    labels = np.asarray(labels)
    if reps.shape[0] != labels.shape[0]:
        raise ValueError(f"label/frame mismatch: {reps.shape[0]} frames vs {labels.shape[0]} labels")
    return float(np.mean(probe.predict(reps) != labels))


def write_codes(path, items):
    """``items``: iterable of ``(utterance_id, codes)``."""
    with open(path, "w") as fh:
        for uid, codes in items:
            c = getattr(codes, "codes", codes)
            fh.write(uid + " " + " ".join(str(int(v)) for v in c) + "\n")


def read_codes(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                out[parts[0]] = np.array([int(v) for v in parts[1:]], dtype=np.int64)
    return out


def format_report(rows):
    """Aligned two-column text table from ``(metric, value)`` rows."""
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {value:.6f}" for name, value in rows)


def write_report_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("metric,value\n")
        for name, value in rows:
            fh.write(f"{name},{value!r}\n")
