import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_backbone, random_rotation
from oracles import best_local_score, enumerate_local_score, horn_superpose, score_pairs, state_oracle, tm_oracle
from refold.data import Backbone
from refold.matcher import (AlignScores, StructureDatabase, discretize, kabsch, local_align, search, tm_d0,
                            tm_score, tm_score_from_distances, virtual_angles)

states = st.lists(st.integers(0, 15), min_size=1, max_size=12)


# -- discretize ------------------------------------------------------------------------------

def test_straight_chain_theta_bin_is_3():
    ca = np.array([[3.8 * i, 0.0, 0.0] for i in range(8)])
    coords = np.stack([ca - [1.0, 0.5, 0], ca, ca + [1.0, 0.5, 0]], axis=1)
    b = Backbone("line", coords)
    assert np.allclose(virtual_angles(b.ca)[1:-1], np.pi)
    s = discretize(b).states
    assert all(v // 4 == 3 for v in s[2:-2])
    assert s[:2].tolist() == [0, 0] and s[-2:].tolist() == [0, 0]


def test_discretize_rotation_invariant(rng):
    b = random_backbone(rng, 30)
    moved = b.transformed(random_rotation(rng), rng.normal(size=3) * 10)
    assert np.array_equal(discretize(b).states, discretize(moved).states)


@pytest.mark.parametrize("seed", range(10))
def test_discretize_matches_trig_oracle(seed):
    b = random_backbone(np.random.default_rng(seed), 10)
    assert discretize(b).states.tolist() == state_oracle(b.ca.tolist())


def test_discretize_short_chain_all_reserved():
    b = random_backbone(np.random.default_rng(0), 4)
    assert discretize(b).states.tolist() == [0, 0, 0, 0]
    assert len(discretize(b)) == len(b)


# -- local alignment -----------------------------------------------------------------------

def test_identical_strings_full_diagonal():
    a = [1, 5, 7, 2, 9]
    pairs, score = local_align(a, a)
    assert pairs == [(i, i) for i in range(5)] and score == 10


def test_disjoint_alphabets_empty():
    assert local_align([0, 1, 2], [5, 6, 7]) == ([], 0)


def test_gap_convention():
    # a single 1-residue gap in a long match: open cost -3
    a = [1, 2, 3, 4, 5, 6, 7, 8]
    b = [1, 2, 3, 4, 9, 5, 6, 7, 8]
    pairs, score = local_align(a, b)
    assert score == 16 - 3
    assert pairs == [(0, 0), (1, 1), (2, 2), (3, 3), (4, 5), (5, 6), (6, 7), (7, 8)]


def test_local_align_vs_dp_oracle_200_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        a = rng.integers(0, 4, rng.integers(1, 13)).tolist()
        b = rng.integers(0, 4, rng.integers(1, 13)).tolist()
        pairs, score = local_align(a, b)
        assert score == best_local_score(a, b)
        if pairs:
            assert score_pairs(a, b, pairs) == score
        else:
            assert score == 0


@given(st.lists(st.integers(0, 3), min_size=1, max_size=5), st.lists(st.integers(0, 3), min_size=1, max_size=5))
def test_local_align_vs_exhaustive_enumeration(a, b):
    assert local_align(a, b)[1] == enumerate_local_score(a, b)


@given(states, states)
def test_local_align_pairs_strictly_increasing(a, b):
    pairs, score = local_align(a, b)
    assert score >= 0
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        assert i1 > i0 and j1 > j0
    assert all(0 <= i < len(a) and 0 <= j < len(b) for i, j in pairs)


def test_custom_scores():
    s = AlignScores(match=1, mismatch=-5, gap_open=-1, gap_extend=-1)
    a, b = [1, 2, 3], [1, 9, 2, 3]
    assert local_align(a, b, s)[1] == best_local_score(a, b, 1, -5, -1, -1)


def test_local_align_requires_non_empty():
    with pytest.raises(ValueError):
        local_align([], [1])


# -- kabsch ----------------------------------------------------------------------------------

def test_kabsch_identity(rng):
    p = rng.normal(size=(6, 3))
    sup = kabsch(p, p)
    assert sup.rmsd < 1e-12
    assert np.allclose(sup.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(sup.translation, 0.0, atol=1e-12)


def test_kabsch_exact_rigid_transform(rng):
    p = rng.normal(size=(8, 3)) * 5
    rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    q = p @ rz.T + np.array([1.0, 2.0, 3.0])
    sup = kabsch(p, q)
    assert sup.rmsd < 1e-9
    assert np.allclose(sup.rotation, rz.T, atol=1e-8)
    assert np.allclose(sup.apply(q), p, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_kabsch_noisy_vs_quaternion_oracle(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(6, 3)) * 4
    q = p @ random_rotation(rng).T + rng.normal(size=3) + rng.normal(0, 0.1, size=(6, 3))
    sup = kabsch(p, q)
    R, t, rmsd = horn_superpose(p, q)
    assert abs(sup.rmsd - rmsd) < 1e-8
    assert np.allclose(sup.rotation, R, atol=1e-8)


@given(st.integers(0, 10_000))
def test_kabsch_rotation_is_proper(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    r = kabsch(p, q).rotation
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-8)
    assert abs(np.linalg.det(r) - 1.0) < 1e-8


def test_kabsch_reflection_corrected(rng):
    p = rng.normal(size=(7, 3))
    q = p * np.array([1.0, 1.0, -1.0])  # mirror image
    sup = kabsch(p, q)
    assert np.linalg.det(sup.rotation) > 0 and sup.rmsd > 1e-3


def test_kabsch_errors():
    with pytest.raises(ValueError):
        kabsch(np.zeros((3, 3)), np.zeros((4, 3)))
    line = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    with pytest.raises(ValueError, match="degenerate"):
        kabsch(line, line)


# -- tm-score -----------------------------------------------------------------------------------

@pytest.mark.parametrize("length", [16, 20, 45, 80])
def test_tm_self_identity(length):
    b = random_backbone(np.random.default_rng(length), length)
    assert tm_score(b, b, [(i, i) for i in range(length)]) == 1.0


def test_tm_half_at_d0():
    assert tm_score_from_distances(np.full(20, tm_d0(20)), 20) == pytest.approx(0.5, abs=1e-15)


def test_d0_values():
    assert tm_d0(100) == pytest.approx(1.24 * 85 ** (1 / 3) - 1.8)
    assert tm_d0(20) == 0.5  # formula gives 0.32, floored
    assert tm_d0(10) == 0.5


@pytest.mark.parametrize("seed", range(8))
def test_tm_vs_formula_oracle(seed):
    rng = np.random.default_rng(seed)
    q = random_backbone(rng, int(rng.integers(18, 40)), "q")
    t = random_backbone(rng, int(rng.integers(18, 40)), "t")
    n = min(len(q), len(t))
    qi = np.sort(rng.choice(len(q), n // 2, replace=False))
    ti = np.sort(rng.choice(len(t), n // 2, replace=False))
    pairs = list(zip(qi.tolist(), ti.tolist()))
    assert abs(tm_score(q, t, pairs) - tm_oracle(q.ca, t.ca, pairs)) < 1e-10


def test_tm_fewer_than_three_pairs_warns():
    b = random_backbone(np.random.default_rng(0), 20)
    with pytest.warns(UserWarning):
        assert tm_score(b, b, [(0, 0), (1, 1)]) == 0.0


@given(st.lists(st.floats(0, 20), min_size=1, max_size=30), st.floats(0, 20))
def test_tm_monotone_in_added_pairs(distances, extra):
    lq = 40
    assert tm_score_from_distances(distances + [extra], lq) > tm_score_from_distances(distances, lq)


# -- search --------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_db():
    from refold.toybase import synth_family
    ds = synth_family(20, 40, 0.1, seed=3)
    return ds.backbones


def test_exact_copy_ranked_first(small_db):
    q = small_db[0]
    copy = Backbone("copy", q.coords)
    hits = search(q, small_db[1:] + [copy], k=5)
    assert hits[0].target_id == "copy" and hits[0].tm_score == 1.0


def test_k_larger_than_db_and_empty_db(small_db):
    q = small_db[0]
    hits = search(q, small_db[:4], k=100)
    assert len(hits) <= 3  # query id excluded
    assert search(q, [], k=5) == []
    assert search(q, small_db, k=0) == []


def test_search_vs_exhaustive_ranking(small_db):
    q = small_db[0]
    oracle = []
    for i, t in enumerate(small_db):
        if t.id == q.id:
            continue
        pairs, _ = local_align(discretize(q).states, discretize(t).states)
        if len(pairs) < 3:
            continue
        oracle.append((-tm_oracle(q.ca, t.ca, pairs), i, t.id))
    oracle.sort()
    hits = search(q, small_db, k=len(small_db))
    assert [h.target_id for h in hits] == [name for _, _, name in oracle]
    tms = [h.tm_score for h in hits]
    assert tms == sorted(tms, reverse=True)


def test_search_threads_identical(small_db):
    q = small_db[2]
    a = search(q, small_db, 10, threads=1)
    b = search(q, small_db, 10, threads=4)
    assert [(h.target_id, h.tm_score, h.pairs) for h in a] == [(h.target_id, h.tm_score, h.pairs) for h in b]


@pytest.mark.parametrize("seed", range(3))
def test_search_rigid_motion_invariant(small_db, seed):
    rng = np.random.default_rng(seed)
    q = small_db[seed]
    moved = q.transformed(random_rotation(rng), rng.normal(size=3) * 20)
    db = StructureDatabase(small_db)
    a, b = search(q, db, 8), search(moved, db, 8)
    assert [h.target_id for h in a] == [h.target_id for h in b]
    assert [h.pairs for h in a] == [h.pairs for h in b]
    assert np.allclose([h.tm_score for h in a], [h.tm_score for h in b], atol=1e-6)
