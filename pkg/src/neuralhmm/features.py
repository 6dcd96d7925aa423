"""Log Mel front end, normalization, and on-disk formats.

File formats
------------
LMF1 feature file (little-endian): ``b"LMF1"``, u32 T, u32 d, then T*d
float32 values in row-major order.

Label file: one segment per line, ``start_frame end_frame label`` with
frame indices at the 10 ms rate and ``end_frame`` exclusive.

Manifest: ``utterance_id<TAB>feature_path[<TAB>label_path]`` per line.
Relative paths are resolved against the manifest's directory.
"""

import os
import struct
import wave
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FeatureFormatError",
    "FrameMatrix",
    "MelConfig",
    "NormStats",
    "Waveform",
    "ManifestEntry",
    "read_wav",
    "write_wav",
    "mel_filterbank",
    "log_mel",
    "compute_norm_stats",
    "normalize",
    "write_features",
    "read_features",
    "read_labels",
    "write_labels",
    "labels_to_frames",
    "frames_to_segments",
    "read_manifest",
    "write_manifest",
    "write_norm_stats",
    "read_norm_stats",
]

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8
LMF_MAGIC = b"LMF1"


class FeatureFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray  # int16
    sample_rate: int = SAMPLE_RATE


@dataclass
class FrameMatrix:
    frames: np.ndarray  # (T, d)
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class MelConfig:
    sample_rate: int = SAMPLE_RATE
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    num_mels: int = 40

    @property
    def window_samples(self):
        return int(round(self.sample_rate * self.frame_length_ms / 1000))

    @property
    def shift_samples(self):
        return int(round(self.sample_rate * self.frame_shift_ms / 1000))

    @property
    def n_fft(self):
        n = 1
        while n < self.window_samples:
            n *= 2
        return n


@dataclass
class ManifestEntry:
    utt_id: str
    feature_path: str
    label_path: str = None
    extra: dict = field(default_factory=dict)


def read_wav(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with wave.open(str(path), "rb") as w:
            nch, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            comp = w.getcomptype()
            raw = w.readframes(w.getnframes())
    except wave.Error as e:
        raise FeatureFormatError(f"{path}: not a PCM WAV file ({e})") from e
    if comp != "NONE" or width != 2:
        raise FeatureFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit {comp}")
    if nch != 1:
        raise FeatureFormatError(f"{path}: expected mono, got {nch} channels")
    if rate != SAMPLE_RATE:
        raise FeatureFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.int16), rate)


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(np.asarray(samples, dtype="<i2").tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg):
    """Triangular filters on the Mel scale spanning 0 Hz to Nyquist.

    Returns ``(num_mels, n_fft // 2 + 1)``. Filter edges sit at
    ``num_mels + 2`` points equally spaced in Mel; weights are the
    continuous triangle evaluated at each FFT bin frequency.
    """
    n_bins = cfg.n_fft // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.num_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def hann_window(n):
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def log_mel(w, cfg=None):
    cfg = cfg or MelConfig()
    x = np.asarray(w.samples, dtype=np.float64)
    win, shift = cfg.window_samples, cfg.shift_samples
    if len(x) < win:
        raise FeatureFormatError(f"waveform too short: {len(x)} samples < window {win}")
    n_frames = 1 + (len(x) - win) // shift
    idx = np.arange(win)[None, :] + shift * np.arange(n_frames)[:, None]
    frames = x[idx] * hann_window(win)
    mag = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1))
    mel = mag @ mel_filterbank(cfg).T
    return FrameMatrix(
        np.log(np.maximum(mel, LOG_FLOOR)),
        frame_shift_ms=cfg.frame_shift_ms,
        frame_length_ms=cfg.frame_length_ms,
    )


def compute_norm_stats(dataset):
    mats = [np.asarray(f.frames if isinstance(f, FrameMatrix) else f) for f in dataset]
    mats = [m for m in mats if m.shape[0] > 0]
    if not mats:
        raise ValueError("empty dataset")
    allf = np.concatenate(mats, axis=0).astype(np.float64)
    mean = allf.mean(axis=0)
    std = np.sqrt(((allf - mean) ** 2).mean(axis=0))
    return NormStats(mean=mean, std=np.maximum(std, STD_FLOOR))


def normalize(f, stats):
    x = f.frames if isinstance(f, FrameMatrix) else np.asarray(f)
    if x.shape[1] != stats.mean.shape[0]:
        raise ValueError(f"dimension mismatch: features {x.shape[1]}, stats {stats.mean.shape[0]}")
    out = (x - stats.mean) / stats.std
    if isinstance(f, FrameMatrix):
        return FrameMatrix(out, f.frame_shift_ms, f.frame_length_ms)
    return out


def write_norm_stats(path, stats):
    np.savetxt(path, np.stack([stats.mean, stats.std]), fmt="%.17g")


def read_norm_stats(path):
    arr = np.loadtxt(path, ndmin=2)
    return NormStats(mean=arr[0], std=arr[1])


def write_features(path, f):
    x = f.frames if isinstance(f, FrameMatrix) else np.asarray(f)
    t, d = x.shape
    with open(path, "wb") as fh:
        fh.write(LMF_MAGIC + struct.pack("<II", t, d))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != LMF_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic")
    if len(data) < 12:
        raise FeatureFormatError(f"{path}: truncated header")
    t, d = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * t * d:
        raise FeatureFormatError(f"{path}: truncated payload (expected {t}x{d} floats)")
    x = np.frombuffer(data, dtype="<f4", offset=12).reshape(t, d)
    return FrameMatrix(x.astype(np.float32))


def read_labels(path):
    segs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise FeatureFormatError(f"{path}:{lineno}: expected 'start end label'")
            segs.append((int(parts[0]), int(parts[1]), parts[2]))
    return segs


def write_labels(path, segments):
    with open(path, "w") as fh:
        for s, e, lab in segments:
            fh.write(f"{s} {e} {lab}\n")


def labels_to_frames(segments, num_frames=None):
    """Expand segments into a per-frame list of label strings."""
    if not segments:
        return []
    end = segments[-1][1] if num_frames is None else num_frames
    out = [None] * end
    for s, e, lab in segments:
        for t in range(s, min(e, end)):
            out[t] = lab
    return out


def frames_to_segments(labels):
    segs = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            segs.append((start, t, str(labels[start])))
            start = t
    return segs


def read_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise FeatureFormatError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
            paths = [p if os.path.isabs(p) else os.path.join(base, p) for p in parts[1:]]
            entries.append(ManifestEntry(parts[0], *paths))
    return entries


def write_manifest(path, entries):
    with open(path, "w") as fh:
        for e in entries:
            fields = [e.utt_id, e.feature_path] + ([e.label_path] if e.label_path else [])
            fh.write("\t".join(fields) + "\n")
