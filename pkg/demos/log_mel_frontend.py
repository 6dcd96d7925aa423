"""
Log Mel front end
=================

A one-second 1 kHz tone through the 25 ms / 10 ms, 40-band log Mel
pipeline, followed by mean/variance normalization and an LMF1 round trip.
"""

import os
import tempfile

import numpy as np

from neuralhmm import features

t = np.arange(16000) / 16000
tone = (8000 * np.sin(2 * np.pi * 1000 * t)).astype(np.int16)

with tempfile.TemporaryDirectory() as tmp:
    wav = os.path.join(tmp, "tone.wav")
    features.write_wav(wav, tone)
    fm = features.log_mel(features.read_wav(wav))
    print("frames x dims:", fm.frames.shape)  # 98 x 40

    centers = features.mel_to_hz(
        np.linspace(0, features.hz_to_mel(8000), 42)[1:-1])
    peak = np.argmax(fm.frames[10])
    print(f"peak band {peak}, centre {centers[peak]:.0f} Hz")

    stats = features.compute_norm_stats([fm])
    normed = features.normalize(fm, stats)
    path = os.path.join(tmp, "tone.lmf")
    features.write_features(path, normed)
    back = features.read_features(path)
    print("LMF1 bytes:", os.path.getsize(path), "round trip equal:",
          np.array_equal(back.frames, normed.frames.astype(np.float32)))
