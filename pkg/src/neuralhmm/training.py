"""Adam training loop, checkpoints and synthetic data.

Checkpoint layout (little-endian)::

    b"NHMM"  u32 version  u32 n_tensors
    n_tensors x { u32 name_len, name (utf-8), u32 ndim, ndim x u64 dims,
                  prod(dims) x f64 }

Tensor names: ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>``,
``meta/epoch``, ``meta/step``, ``meta/rng`` (the six PCG64 state words,
bit-cast to float64) and ``meta/model_config`` (UTF-8 JSON, one byte per
float64 entry).
"""

import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import features, lattice
from .model import ModelConfig, param_init, total_loss_grad
from .numerics import Rng

__all__ = [
    "CheckpointError",
    "TrainingError",
    "TrainConfig",
    "Checkpoint",
    "SynthSpec",
    "TrainResult",
    "adam_step",
    "clip_global_norm",
    "save_checkpoint",
    "load_checkpoint",
    "separated_means",
    "synth_generate",
    "train",
]

log = logging.getLogger(__name__)

CKPT_MAGIC = b"NHMM"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 5
    batch_size: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float = 5.0

    def validate(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        return self


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict
    adam_m: dict
    adam_v: dict
    epoch: int = 0
    step: int = 0
    rng_state: np.ndarray = field(default_factory=lambda: np.zeros(6, dtype=np.uint64))
    version: int = CKPT_VERSION


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_lines: list
    epoch_losses: list


def clip_global_norm(grads, max_norm):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(params, grads, moments, cfg, t):
    """One bias-corrected Adam update after global-norm clipping.

    ``moments`` is ``(m, v)``; ``t`` is the 1-based step index. Returns new
    ``(params, (m, v))`` and leaves the inputs untouched.
    """
    m, v = moments
    for name, p in params.items():
        if name not in grads or grads[name].shape != p.shape:
            got = None if name not in grads else grads[name].shape
            raise ValueError(f"gradient shape mismatch for {name}: {got} vs {p.shape}")
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    grads, _ = clip_global_norm(grads, cfg.grad_clip_norm)
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        new_m[name] = b1 * m[name] + (1.0 - b1) * g
        new_v[name] = b2 * v[name] + (1.0 - b2) * g * g
        m_hat = new_m[name] / (1.0 - b1**t)
        v_hat = new_v[name] / (1.0 - b2**t)
        new_p[name] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return new_p, (new_m, new_v)


def _encode_bytes(b):
    return np.frombuffer(b, dtype=np.uint8).astype(np.float64)


def _decode_bytes(arr):
    return bytes(np.asarray(arr).astype(np.uint8))


def save_checkpoint(path, ckpt):
    tensors = []
    for name in ckpt.params:
        tensors.append((f"param/{name}", ckpt.params[name]))
        tensors.append((f"adam_m/{name}", ckpt.adam_m[name]))
        tensors.append((f"adam_v/{name}", ckpt.adam_v[name]))
    tensors.append(("meta/epoch", np.array([ckpt.epoch], dtype=np.float64)))
    tensors.append(("meta/step", np.array([ckpt.step], dtype=np.float64)))
    tensors.append(("meta/rng", np.asarray(ckpt.rng_state, dtype="<u8").view("<f8")))
    cfg_json = json.dumps(asdict(ckpt.model_config), sort_keys=True).encode()
    tensors.append(("meta/model_config", _encode_bytes(cfg_json)))

    out = [CKPT_MAGIC, struct.pack("<II", ckpt.version, len(tensors))]
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")

    cfg = ModelConfig(**json.loads(_decode_bytes(tensors["meta/model_config"])))
    params, m, v = {}, {}, {}
    for name, arr in tensors.items():
        kind, _, pname = name.partition("/")
        {"param": params, "adam_m": m, "adam_v": v}.get(kind, {})[pname] = arr
    return Checkpoint(
        model_config=cfg,
        params=params,
        adam_m=m,
        adam_v=v,
        epoch=int(tensors["meta/epoch"][0]),
        step=int(tensors["meta/step"][0]),
        rng_state=tensors["meta/rng"].view("<u8").astype(np.uint64),
        version=version,
    )


@dataclass
class SynthSpec:
    num_states: int = 3
    dim: int = 8
    means: np.ndarray = None  # (num_states, dim); drawn if None
    stay_prob: float = 0.9
    utt_len: int = 200
    num_utts: int = 200
    min_mean_dist: float = 6.0

    def validate(self):
        if not 0.0 < self.stay_prob <= 1.0:
            raise ValueError(f"stay_prob must lie in (0, 1], got {self.stay_prob}")
        if self.num_states < 1 or self.dim < 1 or self.utt_len < 1 or self.num_utts < 1:
            raise ValueError("num_states, dim, utt_len and num_utts must be positive")
        if self.means is not None:
            mu = np.asarray(self.means, dtype=np.float64)
            if mu.shape != (self.num_states, self.dim):
                raise ValueError(f"means must be {(self.num_states, self.dim)}, got {mu.shape}")
            dist = np.linalg.norm(mu[:, None] - mu[None], axis=-1)
            if self.num_states > 1 and dist[~np.eye(self.num_states, dtype=bool)].min() == 0:
                raise ValueError("state means must be pairwise distinct")
        return self


def separated_means(n, d, min_dist, rng):
    """Zero-centred random means whose closest pair is exactly ``min_dist`` apart."""
    mu = rng.standard_normal((n, d))
    if n == 1:
        return np.zeros((1, d))
    mu -= mu.mean(axis=0)
    dist = np.linalg.norm(mu[:, None] - mu[None], axis=-1)
    closest = dist[~np.eye(n, dtype=bool)].min()
    return mu * (min_dist / closest)


def synth_lattice(spec, length):
    """Generative HMM of ``spec`` as lattice potentials (emissions zeroed)."""
    n = spec.num_states
    with np.errstate(divide="ignore"):
        if n == 1:
            trans = np.zeros((1, 1))
        else:
            trans = np.full((n, n), (1.0 - spec.stay_prob) / (n - 1))
            np.fill_diagonal(trans, spec.stay_prob)
        log_trans = np.log(trans)
    return lattice.LatticePotentials(
        np.full(n, -np.log(n)),
        np.broadcast_to(log_trans, (length - 1, n, n)),
        np.zeros((length, n)),
    )


def synth_generate(spec, rng, out_dir=None):
    """Sample utterances from a Gaussian HMM.

    Returns ``(means, utterances)`` where each utterance is a dict with
    ``id``, ``frames`` and ``states``. With ``out_dir`` set, also writes
    LMF1 features, label files and ``manifest.tsv`` there.
    """
    spec.validate()
    means = (
        np.asarray(spec.means, dtype=np.float64)
        if spec.means is not None
        else separated_means(spec.num_states, spec.dim, spec.min_mean_dist, rng)
    )
    lat = synth_lattice(spec, spec.utt_len)
    utts = []
    for u in range(spec.num_utts):
        states = lattice.sample_path(lat, rng).states
        frames = means[states] + rng.standard_normal((spec.utt_len, spec.dim))
        utts.append({"id": f"synth{u:05d}", "frames": frames, "states": states})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        entries = []
        for utt in utts:
            fpath = os.path.join(out_dir, utt["id"] + ".lmf")
            lpath = os.path.join(out_dir, utt["id"] + ".lab")
            features.write_features(fpath, utt["frames"])
            features.write_labels(lpath, features.frames_to_segments(list(utt["states"])))
            entries.append(features.ManifestEntry(utt["id"], fpath, lpath))
        features.write_manifest(os.path.join(out_dir, "manifest.tsv"), entries)
        np.savetxt(os.path.join(out_dir, "means.txt"), means, fmt="%.17g")
    return means, utts


def _load_utterances(manifest):
    """Accept a manifest path, a list of ManifestEntry, or a list of (id, frames)."""
    if isinstance(manifest, (str, os.PathLike)):
        manifest = features.read_manifest(manifest)
    utts = []
    for item in manifest:
        if isinstance(item, features.ManifestEntry):
            try:
                frames = features.read_features(item.feature_path).frames
            except (OSError, ValueError) as e:
                raise TrainingError(f"cannot read features {item.feature_path}: {e}") from e
            utts.append((item.utt_id, np.asarray(frames, dtype=np.float64)))
        else:
            uid, frames = item
            utts.append((uid, np.asarray(frames, dtype=np.float64)))
    if not utts:
        raise TrainingError("manifest is empty")
    return utts


def train(manifest, model_cfg, train_cfg, out_dir=None, resume=None, force=False,
          log_path=None):
    """Train from scratch, or continue from ``resume`` (a Checkpoint).

    Each optimizer step sums loss and gradients over the batch and divides
    by the number of modeled frames (``T - k`` per utterance). One log
    record per step: ``epoch step utterance_frames loss``.
    """
    model_cfg.validate()
    train_cfg.validate()
    utts = _load_utterances(manifest)
    rng = Rng(train_cfg.seed)
    if resume is None:
        params = param_init(model_cfg, rng)
        m = {k: np.zeros_like(p) for k, p in params.items()}
        v = {k: np.zeros_like(p) for k, p in params.items()}
        start_epoch, step = 0, 0
    else:
        params = {k: p.copy() for k, p in resume.params.items()}
        m = {k: a.copy() for k, a in resume.adam_m.items()}
        v = {k: a.copy() for k, a in resume.adam_v.items()}
        start_epoch, step = resume.epoch, resume.step
        rng.set_state(resume.rng_state)

    usable = []
    for uid, frames in utts:
        if frames.shape[0] < model_cfg.min_frames:
            log.warning("skipping %s: %d frames < k+H+1=%d", uid, frames.shape[0],
                        model_cfg.min_frames)
        else:
            usable.append((uid, frames))
    if not usable:
        raise TrainingError("no utterance is long enough to train on")

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    log_fh = open(log_path, "a" if resume is not None else "w") if log_path else None
    log_lines, epoch_losses = [], []
    ckpt = None
    try:
        for epoch in range(start_epoch + 1, train_cfg.epochs + 1):
            order = rng.permutation(len(usable))
            ep_loss, ep_frames = 0.0, 0
            for b0 in range(0, len(order), train_cfg.batch_size):
                batch = [usable[i] for i in order[b0:b0 + train_cfg.batch_size]]
                loss_sum, n_frames = 0.0, 0
                grads = {k: np.zeros_like(p) for k, p in params.items()}
                for _, frames in batch:
                    loss, g = total_loss_grad(params, frames, model_cfg)
                    loss_sum += loss
                    n_frames += frames.shape[0] - model_cfg.time_shift
                    for k in grads:
                        grads[k] += g[k]
                grads = {k: g / n_frames for k, g in grads.items()}
                step += 1
                params, (m, v) = adam_step(params, grads, (m, v), train_cfg, step)
                step_loss = loss_sum / n_frames
                if not np.isfinite(step_loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch} step {step}")
                line = f"{epoch} {step} {n_frames} {step_loss!r}"
                log_lines.append(line)
                if log_fh:
                    log_fh.write(line + "\n")
                ep_loss += loss_sum
                ep_frames += n_frames
            epoch_losses.append(ep_loss / ep_frames)
            log.info("epoch %d mean loss %.6f", epoch, epoch_losses[-1])
            ckpt = Checkpoint(model_cfg, params, m, v, epoch=epoch, step=step,
                              rng_state=rng.state())
            if out_dir is not None:
                path = os.path.join(out_dir, f"epoch{epoch:03d}.nhmm")
                if os.path.exists(path) and not force:
                    raise TrainingError(f"refusing to overwrite {path} (use force)")
                save_checkpoint(path, ckpt)
    finally:
        if log_fh:
            log_fh.close()
    if ckpt is None:
        ckpt = Checkpoint(model_cfg, params, m, v, epoch=start_epoch, step=step,
                          rng_state=rng.state())
    return TrainResult(checkpoint=ckpt, log_lines=log_lines, epoch_losses=epoch_losses)
