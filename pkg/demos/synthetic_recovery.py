"""
Recovering hidden states from synthetic speech-like data
========================================================

Sample sequences from a sticky 3-state Gaussian HMM, train a neural HMM
and the VQ-APC objective on them, then decode codes and score them with
NMI and boundary F1 against the true states.
"""

import numpy as np

from neuralhmm.model import ModelConfig
from neuralhmm.numerics import Rng
from neuralhmm.probing import boundaries_from_codes, decode_codes, nmi, seg_prf_pooled
from neuralhmm.training import SynthSpec, TrainConfig, synth_generate, train

spec = SynthSpec(num_states=3, dim=8, stay_prob=0.9, utt_len=200, num_utts=200)
means, utts = synth_generate(spec, Rng(0))
data = [(u["id"], u["frames"]) for u in utts]

for variant in ("neural_hmm", "vq_apc"):
    cfg = ModelConfig(num_states=3, time_shift=2, hop=1, feat_dim=8, hidden_dim=32,
                      variant=variant)
    res = train(data, cfg, TrainConfig(epochs=5, seed=0))
    codes = [decode_codes(res.checkpoint.params, u["frames"], cfg).codes for u in utts]
    truth = [u["states"][cfg.time_shift:] for u in utts]
    seg = seg_prf_pooled(
        [(boundaries_from_codes(c), boundaries_from_codes(t)) for c, t in zip(codes, truth)]
    )
    print(f"{variant:>10}: epoch losses {np.round(res.epoch_losses, 3)}")
    print(f"{'':>10}  NMI {nmi(np.concatenate(codes), np.concatenate(truth)):.4f}  "
          f"boundary P/R/F1 {seg.precision:.3f}/{seg.recall:.3f}/{seg.f1:.3f}")
