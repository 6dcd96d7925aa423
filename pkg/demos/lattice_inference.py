"""
Exact inference on one chain
============================

Forward, backward and Viterbi on a small random lattice, checked against
enumerating every state sequence.
"""

import numpy as np

from neuralhmm import lattice
from neuralhmm.numerics import Rng
from neuralhmm.selfcheck import random_lattice

lat = random_lattice(6, 3, Rng(0))

alpha, loglik = lattice.forward(lat)
print("forward log-likelihood  ", loglik)
print("enumerated              ", lattice.brute_force_loglik(lat))

# Posteriors double as the gradient of the log-likelihood w.r.t. the
# log-potentials: each row of gamma sums to one.
post = lattice.posteriors(lat)
print("gamma rows sum to", post.gamma.sum(axis=1))

best = lattice.viterbi(lat)
print("viterbi path", best.states, "score", best.score)
print("enumerated  ", lattice.brute_force_best_path(lat).states)

###############################################################################
# Ancestral sampling ignores the emissions and walks prior then transitions.

for seed in range(3):
    print("sample", lattice.sample_path(lat, Rng(seed)).states)
