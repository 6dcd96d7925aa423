"""
Low frame-rate chains
=====================

With hop H the frames after the time shift are split into H interleaved
chains. Each chain is an ordinary HMM over every H-th frame, and the
training loss is the sum of their negative log-likelihoods.
"""

import numpy as np

from neuralhmm import lattice
from neuralhmm.model import (
    ModelConfig, build_chain_lattices, frame_posteriors, param_init, total_loss,
)
from neuralhmm.numerics import Rng

cfg = ModelConfig(num_states=5, time_shift=5, hop=7, feat_dim=4, hidden_dim=8)
rng = Rng(1)
params = param_init(cfg, rng)
x = rng.standard_normal((30, cfg.feat_dim))

chains = build_chain_lattices(params, x, cfg)
for ci, lat in chains:
    # print 1-based frame numbers
    print(f"chain {ci.offset}: frames {(ci.node_times + 1).tolist()}")

per_chain = [-lattice.forward(lat)[1] for _, lat in chains]
print("sum of chain losses", sum(per_chain))
print("total_loss         ", total_loss(params, x, cfg))

###############################################################################
# Swapping the outer-product transition for one that ignores the previous
# state turns every chain into independent per-frame mixtures, the VQ-APC
# objective.

cfg1 = ModelConfig(num_states=5, time_shift=5, hop=1, feat_dim=4, hidden_dim=8)
g_lin = frame_posteriors(params, x, cfg1, linear_transitions=True)
g_vq = frame_posteriors(params, x, ModelConfig(**{**cfg1.__dict__, "variant": "vq_apc"}))
print("max |gamma_linear - gamma_vq_apc| =", np.abs(g_lin - g_vq).max())
