import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from neuralhmm import lattice
from neuralhmm.model import ModelConfig, build_chain_lattices, param_init
from neuralhmm.numerics import Rng
from neuralhmm.probing import (
    boundaries_from_codes, decode_codes, nmi, probe_eval, probe_train, read_codes,
    seg_prf, seg_prf_counts, write_codes, format_report, write_report_csv,
)


def model(**kw):
    base = dict(num_states=3, time_shift=2, hop=1, feat_dim=3, hidden_dim=4)
    base.update(kw)
    cfg = ModelConfig(**base)
    r = Rng(7)
    return cfg, param_init(cfg, r), r.standard_normal((17, cfg.feat_dim))


def test_decode_h1_is_viterbi():
    cfg, params, x = model()
    (_, lat), = build_chain_lattices(params, x, cfg)
    codes = decode_codes(params, x, cfg)
    np.testing.assert_array_equal(codes.codes, lattice.viterbi(lat).states)
    assert len(codes.codes) == 17 - 2


def test_decode_single_state():
    cfg, params, x = model(num_states=1, hop=3)
    np.testing.assert_array_equal(decode_codes(params, x, cfg).codes, 0)


def test_decode_h2_interleaves_chains():
    cfg, params, x = model(hop=2)
    (c0, l0), (c1, l1) = build_chain_lattices(params, x, cfg)
    p0, p1 = lattice.viterbi(l0).states, lattice.viterbi(l1).states
    manual = []
    for i in range(len(p0)):
        manual.append(p0[i])
        if i < len(p1):
            manual.append(p1[i])
    np.testing.assert_array_equal(decode_codes(params, x, cfg).codes, manual)


def test_decode_vq_apc_matches_linear_viterbi():
    cfg, params, x = model(variant="vq_apc")
    hmm_cfg = ModelConfig(**{**cfg.__dict__, "variant": "neural_hmm"})
    (_, lat), = build_chain_lattices(params, x, hmm_cfg, linear_transitions=True)
    np.testing.assert_array_equal(decode_codes(params, x, cfg).codes, lattice.viterbi(lat).states)


def test_nmi_perfect_and_constant():
    labels = np.array(["a", "b", "b", "c", "a", "c"])
    assert nmi([5, 2, 2, 9, 5, 9], labels) == pytest.approx(1.0, abs=1e-12)
    assert nmi([0] * 6, labels) == 0.0


def test_nmi_two_by_two_table_by_hand():
    # counts [[2,1],[1,2]]
    codes = [0, 0, 0, 1, 1, 1]
    labels = [0, 0, 1, 0, 1, 1]
    mi = (2 / 3) * math.log(4 / 3) + (1 / 3) * math.log(2 / 3)
    assert nmi(codes, labels) == pytest.approx(mi / math.log(2), abs=1e-12)
    assert nmi(codes, labels, norm="max") == pytest.approx(mi / math.log(2), abs=1e-12)


def test_nmi_three_by_two_normalizations_by_hand():
    # counts [[3,0],[1,1],[0,2]] over 7 frames
    codes = [0, 0, 0, 1, 1, 2, 2]
    labels = [0, 0, 0, 0, 1, 1, 1]
    pz, py = [3 / 7, 2 / 7, 2 / 7], [4 / 7, 3 / 7]
    joint = {(0, 0): 3 / 7, (1, 0): 1 / 7, (1, 1): 1 / 7, (2, 1): 2 / 7}
    mi = sum(p * math.log(p / (pz[a] * py[b])) for (a, b), p in joint.items())
    hz = -sum(p * math.log(p) for p in pz)
    hy = -sum(p * math.log(p) for p in py)
    assert nmi(codes, labels) == pytest.approx(2 * mi / (hz + hy), abs=1e-12)
    assert nmi(codes, labels, norm="sqrt") == pytest.approx(mi / math.sqrt(hz * hy), abs=1e-12)
    assert nmi(codes, labels, norm="max") == pytest.approx(mi / max(hz, hy), abs=1e-12)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 4)), min_size=1, max_size=40),
       st.permutations(range(4)))
def test_nmi_symmetric_and_relabel_invariant(pairs, perm):
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    v = nmi(a, b)
    assert 0.0 <= v <= 1.0
    assert nmi(b, a) == pytest.approx(v, abs=1e-12)
    assert nmi(np.array(perm)[a], b) == pytest.approx(v, abs=1e-12)


def test_nmi_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        nmi([0, 1], [0])


def test_boundaries_from_codes():
    assert boundaries_from_codes([4, 4, 4]).tolist() == []
    assert boundaries_from_codes([1, 1, 2, 2, 2, 3]).tolist() == [2, 5]
    assert boundaries_from_codes([1, 2, 1, 2]).tolist() == [1, 2, 3]
    with pytest.raises(ValueError):
        boundaries_from_codes([])


@given(st.lists(st.integers(0, 3), min_size=1, max_size=50))
def test_boundary_count_bound(codes):
    assert len(boundaries_from_codes(codes)) <= len(codes) - 1


def max_matching(hyp, ref, tol):
    # Exhaustive search over all one-to-one matchings.
    best = 0
    for assignment in itertools.product([None] + list(range(len(hyp))), repeat=len(ref)):
        used = [a for a in assignment if a is not None]
        if len(used) != len(set(used)):
            continue
        if all(a is None or abs(hyp[a] - r) <= tol for a, r in zip(assignment, ref)):
            best = max(best, len(used))
    return best


def test_seg_prf_fixture():
    s = seg_prf([11, 12, 40], [10, 20])
    assert max_matching([11, 12, 40], [10, 20], 2) == 1
    assert (s.hits, s.hyp_total, s.ref_total) == (1, 3, 2)
    assert s.precision == 1 / 3 and s.recall == 1 / 2
    assert s.f1 == pytest.approx(2 / 5, abs=1e-15)


def test_seg_prf_identity_and_tolerance_edge():
    ref = [5, 17, 30]
    assert seg_prf(ref, ref).f1 == 1.0
    assert seg_prf([r + 2 for r in ref], ref).f1 == 1.0
    assert seg_prf([r + 3 for r in ref], ref).f1 == 0.0


def test_seg_prf_empty_cases():
    both = seg_prf([], [])
    assert (both.precision, both.recall, both.f1) == (1.0, 1.0, 1.0)
    s = seg_prf([], [3])
    assert (s.precision, s.recall, s.f1) == (0.0, 0.0, 0.0)


def test_seg_prf_unsorted():
    with pytest.raises(ValueError, match="sorted"):
        seg_prf([5, 3], [1])


sorted_sets = st.lists(st.integers(0, 40), max_size=6, unique=True).map(sorted)


@given(sorted_sets, sorted_sets)
def test_seg_prf_is_maximum_matching_and_symmetric(hyp, ref):
    hits, _, _ = seg_prf_counts(hyp, ref, 2)
    assert hits == max_matching(hyp, ref, 2)
    a, b = seg_prf(hyp, ref), seg_prf(ref, hyp)
    assert (a.precision, a.recall, a.f1) == (b.recall, b.precision, b.f1)


def test_probe_separable():
    r = np.random.default_rng(0)
    y = r.integers(0, 2, 2000)
    x = r.normal(size=(2000, 5))
    x[:, 0] += np.where(y == 1, 4.0, -4.0)
    probe = probe_train(x[:1500], y[:1500])
    assert probe_eval(probe, x[1500:], y[1500:]) <= 0.01


def test_probe_on_noise_is_chance():
    r = np.random.default_rng(1)
    x = r.normal(size=(6000, 4))
    y = np.tile([0, 1], 3000)
    r.shuffle(y)
    probe = probe_train(x[:3000], y[:3000])
    assert abs(probe_eval(probe, x[3000:], y[3000:]) - 0.5) <= 0.03


def test_probe_majority_baseline_and_string_labels():
    r = np.random.default_rng(2)
    y = np.array(["aa"] * 900 + ["iy"] * 100)
    x = np.zeros((1000, 3))
    probe = probe_train(x, y, epochs=2)
    assert probe_eval(probe, x, y) == pytest.approx(0.10)
    with pytest.raises(ValueError, match="mismatch"):
        probe_train(x[:5], y)


def test_codes_and_report_files(tmp_path):
    write_codes(tmp_path / "c.txt", [("u1", [0, 1, 1]), ("u2", [2])])
    assert (tmp_path / "c.txt").read_text() == "u1 0 1 1\nu2 2\n"
    back = read_codes(tmp_path / "c.txt")
    assert back["u1"].tolist() == [0, 1, 1] and back["u2"].tolist() == [2]
    rows = [("nmi", 0.5), ("f1", 0.25)]
    assert format_report(rows).splitlines() == ["nmi  0.500000", "f1   0.250000"]
    write_report_csv(tmp_path / "r.csv", rows)
    assert (tmp_path / "r.csv").read_text() == "metric,value\nnmi,0.5\nf1,0.25\n"
