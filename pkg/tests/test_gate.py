import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from refold.data import GAP_INDEX, softmax_rows
from refold.gate import (TAU_GRID, GateExample, GateFeatures, GateModel, extract_features, gated_infer, label,
                         total_cross_entropy, train_stage2, tune_tau)
from refold.stacker import StackedAlignment, anchor_row, reliability_bias

from oracles import argmax_first, kl_oracle


def alignment(rng, length, k, coverage=0.6):
    z = rng.normal(size=(length, 20))
    valid = np.ones((k + 1, length), dtype=bool)
    valid[1:] = rng.random((k, length)) < coverage
    tokens = np.where(valid, rng.integers(0, 20, size=(k + 1, length)), GAP_INDEX)
    tokens[0] = anchor_row(z)
    tm = rng.uniform(0.1, 1.0, size=k)
    return StackedAlignment(tokens, valid, tm, reliability_bias(tm, 0.1)), z


def dist(rng, length):
    return softmax_rows(rng.normal(scale=2.0, size=(length, 20)))


# -- features ------------------------------------------------------------------------------

def test_identical_distributions_give_zero_divergence():
    rng = np.random.default_rng(0)
    a, z = alignment(rng, 9, 3)
    p = softmax_rows(z)
    f = extract_features(p, p.copy(), a)
    assert f.mean_kl == 0.0 and f.flip_rate == 0.0


def test_no_neighbors_zero_coverage():
    rng = np.random.default_rng(1)
    a, z = alignment(rng, 6, 0)
    f = extract_features(softmax_rows(z), dist(rng, 6), a)
    assert (f.coverage, f.mean_tm, f.max_tm, f.k_valid) == (0.0, 0.0, 0.0, 0.0)


def test_all_gap_neighbor_not_counted():
    rng = np.random.default_rng(2)
    a, z = alignment(rng, 5, 2, coverage=1.0)
    valid = a.valid.copy()
    valid[2] = False
    b = StackedAlignment(np.where(valid, a.tokens, GAP_INDEX), valid, a.tm_scores, a.beta)
    f = extract_features(softmax_rows(z), dist(rng, 5), b)
    assert f.k_valid == 1.0 and f.coverage == 1.0


@given(st.integers(0, 10_000))
def test_features_match_oracle(seed):
    rng = np.random.default_rng(seed)
    length, k = int(rng.integers(1, 12)), int(rng.integers(1, 5))
    a, z = alignment(rng, length, k)
    pb, pf = softmax_rows(z), dist(rng, length)
    f = extract_features(pb, pf, a)
    kl = kl_oracle(pf, pb)
    ent = np.mean([-sum(x * np.log(x) for x in row if x > 0) for row in pb])
    assert abs(f.mean_kl - kl) < 1e-10
    assert abs(f.mean_base_entropy - ent) < 1e-10
    flips = np.mean([argmax_first(pf[i]) != argmax_first(pb[i]) for i in range(length)])
    assert f.flip_rate == flips
    cols = [any(a.valid[j, i] for j in range(1, k + 1)) for i in range(length)]
    assert f.coverage == pytest.approx(np.mean(cols), abs=1e-15)
    assert f.mean_tm == pytest.approx(np.mean(a.tm_scores)) and f.max_tm == max(a.tm_scores)


def test_feature_shape_errors():
    rng = np.random.default_rng(3)
    a, z = alignment(rng, 4, 1)
    with pytest.raises(ValueError):
        extract_features(softmax_rows(z), dist(rng, 5), a)


# -- labels --------------------------------------------------------------------------------

def test_label_tie_is_zero():
    p = dist(np.random.default_rng(4), 6)
    assert label(p, p.copy(), np.arange(6)) == 0


def test_label_hand_built():
    y = np.array([0])
    p_base = np.full((1, 20), (1 - np.exp(-0.7)) / 19)
    p_base[0, 0] = np.exp(-0.7)
    p_fused = np.full((1, 20), (1 - np.exp(-0.5)) / 19)
    p_fused[0, 0] = np.exp(-0.5)
    assert total_cross_entropy(p_base, y) == pytest.approx(0.7)
    assert total_cross_entropy(p_fused, y) == pytest.approx(0.5)
    assert label(p_base, p_fused, y) == 1
    assert label(p_fused, p_base, y) == 0


def test_cross_entropy_floor_and_errors():
    p = np.zeros((1, 20))
    p[0, 1] = 1.0
    assert total_cross_entropy(p, [0]) == pytest.approx(-np.log(1e-12))
    with pytest.raises(ValueError):
        total_cross_entropy(p, [0, 1])


# -- logistic fit -------------------------------------------------------------------------

def _separable(rng, n=40):
    X = rng.normal(size=(n, 7))
    y = (X[:, 0] + 0.5 * X[:, 3] > 0).astype(int)
    return X, y


def test_separable_set_perfectly_classified():
    X, y = _separable(np.random.default_rng(5))
    g = train_stage2(X, y)
    pred = np.array([g.score(x) >= 0.5 for x in X])
    assert np.mean(pred == y) == 1.0


def test_single_class_warns_and_is_constant():
    X = np.random.default_rng(6).normal(size=(10, 7))
    with pytest.warns(UserWarning, match="single class"):
        hi = train_stage2(X, np.ones(10))
    with pytest.warns(UserWarning):
        lo = train_stage2(X, np.zeros(10))
    assert all(hi.score(x) > 0.99 for x in X)
    assert all(lo.score(x) < 0.01 for x in X)


def test_gate_training_deterministic():
    X, y = _separable(np.random.default_rng(7))
    a, b = train_stage2(X, y, seed=3, epochs=200), train_stage2(X, y, seed=3, epochs=200)
    assert np.array_equal(a.weights, b.weights) and a.bias == b.bias


def test_gate_training_errors():
    with pytest.raises(ValueError):
        train_stage2(np.zeros((3, 7)), [1, 0])
    with pytest.raises(ValueError):
        train_stage2([], [])


def test_gate_score_accepts_features_and_arrays():
    g = GateModel(np.arange(7.0), -1.0)
    f = GateFeatures(*np.linspace(0, 1, 7))
    assert g.score(f) == g.score(f.as_array())
    assert 0.0 <= g.score(f) <= 1.0


def test_gate_arrays_round_trip():
    X, y = _separable(np.random.default_rng(8))
    g = train_stage2(X, y, epochs=50)
    g.tau = 0.35
    h = GateModel.from_arrays(g.to_arrays())
    assert all(g.score(x) == h.score(x) for x in X) and h.tau == 0.35


# -- threshold -----------------------------------------------------------------------------

class FixedGate(GateModel):
    def __init__(self, scores):
        super().__init__(np.zeros(7), 0.0)
        self._scores = scores

    def score(self, features):
        return self._scores[int(features.coverage)]


def _examples(rng, n, length=6):
    out = []
    for i in range(n):
        pb, pf = dist(rng, length), dist(rng, length)
        zr = rng.normal(size=(length, 20))
        zr[rng.random(length) < 0.2] = 0.0
        out.append(GateExample(pb, pf, zr, GateFeatures(i, 0, 0, 0, 0, 0, 0), rng.integers(0, 20, length)))
    return out


def _gated_recovery(gate_scores, examples, tau):
    vals = []
    for e, s in zip(examples, gate_scores):
        p = e.p_base if s < tau else np.where(np.all(e.z_ref == 0, axis=1)[:, None], e.p_base, e.p_fused)
        vals.append(np.mean([argmax_first(p[i]) == e.target[i] for i in range(len(e.target))]))
    return np.mean(vals)


def test_tau_tie_takes_smallest():
    rng = np.random.default_rng(9)
    p = dist(rng, 5)
    ex = [GateExample(p, p.copy(), rng.normal(size=(5, 20)), GateFeatures(0, 0, 0, 0, 0, 0, 0),
                      rng.integers(0, 20, 5))]
    assert tune_tau(FixedGate([0.5]), ex) == 0.05


@given(st.integers(0, 10_000))
def test_tau_matches_exhaustive_grid(seed):
    rng = np.random.default_rng(seed)
    ex = _examples(rng, 6)
    scores = rng.uniform(size=6)
    gate = FixedGate(scores)
    vals = [_gated_recovery(scores, ex, t) for t in TAU_GRID]
    best = max(vals)
    expected = next(t for t, v in zip(TAU_GRID, vals) if v == best)
    assert tune_tau(gate, ex) == expected


@given(st.integers(0, 10_000))
def test_tuned_tau_never_below_base_on_validation(seed):
    rng = np.random.default_rng(seed)
    ex = _examples(rng, 5)
    scores = rng.uniform(0.0, 0.94, size=5)
    tau = tune_tau(FixedGate(scores), ex)
    # 0.95 sends every protein with score < 0.95 to base, so the optimum dominates it
    assert _gated_recovery(scores, ex, tau) >= _gated_recovery(scores, ex, 0.95)


def test_tau_empty_validation_set():
    with pytest.raises(ValueError):
        tune_tau(FixedGate([0.5]), [])


# -- gated inference -----------------------------------------------------------------------

def test_low_score_returns_base():
    rng = np.random.default_rng(10)
    pb, pf = dist(rng, 6), dist(rng, 6)
    gate = FixedGate([0.1])
    gate.tau = 0.5
    out = gated_infer(pb, pf, rng.normal(size=(6, 20)), gate, GateFeatures(0, 0, 0, 0, 0, 0, 0))
    assert np.array_equal(out, pb)


def test_score_equal_tau_uses_fused_with_position_fallback():
    rng = np.random.default_rng(11)
    pb, pf = dist(rng, 6), dist(rng, 6)
    zr = rng.normal(size=(6, 20))
    zr[2] = 0.0
    gate = FixedGate([0.5])
    gate.tau = 0.5
    out = gated_infer(pb, pf, zr, gate, GateFeatures(0, 0, 0, 0, 0, 0, 0))
    assert np.array_equal(out[2], pb[2])
    keep = [0, 1, 3, 4, 5]
    assert np.array_equal(out[keep], pf[keep])
    assert np.allclose(out.sum(1), 1.0, atol=1e-12)


def test_gated_infer_shape_mismatch():
    rng = np.random.default_rng(12)
    with pytest.raises(ValueError):
        gated_infer(dist(rng, 3), dist(rng, 4), np.zeros((3, 20)), FixedGate([0.9]),
                    GateFeatures(0, 0, 0, 0, 0, 0, 0))


def test_no_warnings_on_two_class_fit():
    X, y = _separable(np.random.default_rng(13))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        train_stage2(X, y, epochs=20)


def test_fusion_always_worse_tunes_to_base_behaviour():
    rng = np.random.default_rng(14)
    examples = []
    for i in range(8):
        y = rng.integers(0, 20, 7)
        pb = softmax_rows(rng.normal(size=(7, 20)))
        pf = np.full((7, 20), 0.01 / 19)
        pf[np.arange(7), (y + 1) % 20] = 0.99  # confidently wrong everywhere
        a = StackedAlignment(np.vstack([anchor_row(np.log(pb)), rng.integers(0, 20, (2, 7))]),
                             np.ones((3, 7), bool), np.array([0.9, 0.8]), reliability_bias([0.9, 0.8], 0.1))
        examples.append(GateExample(pb, pf, rng.normal(size=(7, 20)), extract_features(pb, pf, a), y))
    labels = [label(e.p_base, e.p_fused, e.target) for e in examples]
    assert labels == [0] * 8
    with pytest.warns(UserWarning):
        gate = train_stage2([e.features for e in examples], labels)
    gate.tau = tune_tau(gate, examples)
    for e in examples:
        assert np.array_equal(gated_infer(e.p_base, e.p_fused, e.z_ref, gate, e.features), e.p_base)
