"""Desk-scale structural search.

Backbones are reduced to a 16-letter geometric alphabet (binned CA virtual bond
angle and dihedral), aligned with affine-gap Smith-Waterman, superposed once with
Kabsch on the aligned CA pairs and scored with TM-score.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .data import Backbone, NeighborHit

NUM_STATES = 16
UNDEFINED_STATE = 0


@dataclass(frozen=True)
class AlignScores:
    match: int = 2
    mismatch: int = -1
    gap_open: int = -3  # score of the first gapped column
    gap_extend: int = -1  # score of each further gapped column


@dataclass(frozen=True, eq=False)
class StateString:
    id: str
    states: np.ndarray

    def __len__(self):
        return len(self.states)


@dataclass(frozen=True, eq=False)
class Superposition:
    """Maps the moving set onto the reference: ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    rmsd: float

    def apply(self, x):
        return np.asarray(x) @ self.rotation.T + self.translation


# -- geometry --------------------------------------------------------------------

def virtual_angles(ca: np.ndarray) -> np.ndarray:
    """theta[i] = angle(CA[i-1], CA[i], CA[i+1]) for i in 1..L-2; NaN elsewhere."""
    ca = np.asarray(ca, dtype=np.float64)
    out = np.full(len(ca), np.nan)
    if len(ca) < 3:
        return out
    u = ca[:-2] - ca[1:-1]
    v = ca[2:] - ca[1:-1]
    cos = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
    out[1:-1] = np.arccos(np.clip(cos, -1.0, 1.0))
    return out


def virtual_dihedrals(ca: np.ndarray) -> np.ndarray:
    """tau[i] = dihedral(CA[i-1], CA[i], CA[i+1], CA[i+2]) in [-pi, pi] for i in 1..L-3."""
    ca = np.asarray(ca, dtype=np.float64)
    out = np.full(len(ca), np.nan)
    if len(ca) < 4:
        return out
    b0 = ca[1:-2] - ca[:-3]
    b1 = ca[2:-1] - ca[1:-2]
    b2 = ca[3:] - ca[2:-1]
    n1 = np.cross(b0, b1)
    n2 = np.cross(b1, b2)
    x = np.einsum("ij,ij->i", n1, n2)
    y = np.linalg.norm(b1, axis=1) * np.einsum("ij,ij->i", b0, n2)
    out[1:-2] = np.arctan2(y, x)
    return out


def discretize(b: Backbone) -> StateString:
    """State 4*bin(theta) + bin(tau) for residues 2..L-3; the two residues at each end
    get the reserved state 0."""
    n = len(b)
    if n < 1:
        raise ValueError("cannot discretize an empty backbone")
    states = np.full(n, UNDEFINED_STATE, dtype=np.int64)
    if n >= 5:
        theta = virtual_angles(b.ca)[2:n - 2]
        tau = virtual_dihedrals(b.ca)[2:n - 2]
        bt = np.minimum((theta / (np.pi / 4)).astype(np.int64), 3)
        bd = np.minimum(((tau + np.pi) / (np.pi / 2)).astype(np.int64), 3)
        states[2:n - 2] = 4 * bt + bd
    return StateString(b.id, states)


# -- alignment -------------------------------------------------------------------

_NEG = -(1 << 40)


@numba.njit(cache=True, nogil=True)
def _sw_fill(a, b, match, mismatch, gap_open, gap_extend):
    n, m = a.shape[0], b.shape[0]
    H = np.zeros((n + 1, m + 1), dtype=np.int64)
    E = np.full((n + 1, m + 1), _NEG, dtype=np.int64)  # gap in a (consumes b)
    F = np.full((n + 1, m + 1), _NEG, dtype=np.int64)  # gap in b (consumes a)
    best, bi, bj = 0, 0, 0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            e = max(H[i, j - 1] + gap_open, E[i, j - 1] + gap_extend)
            f = max(H[i - 1, j] + gap_open, F[i - 1, j] + gap_extend)
            s = match if a[i - 1] == b[j - 1] else mismatch
            h = max(0, H[i - 1, j - 1] + s, e, f)
            E[i, j] = e
            F[i, j] = f
            H[i, j] = h
            if h > best:
                best, bi, bj = h, i, j
    return H, E, F, best, bi, bj


@numba.njit(cache=True, nogil=True)
def _sw_traceback(a, b, H, E, F, bi, bj, match, mismatch, gap_open, gap_extend):
    qs = np.empty(min(bi, bj), dtype=np.int64)
    ts = np.empty(min(bi, bj), dtype=np.int64)
    k = 0
    i, j = bi, bj
    state = 0  # 0: H, 1: E, 2: F
    while i > 0 and j > 0:
        if state == 0:
            if H[i, j] == 0:
                break
            s = match if a[i - 1] == b[j - 1] else mismatch
            if H[i, j] == H[i - 1, j - 1] + s:
                qs[k] = i - 1
                ts[k] = j - 1
                k += 1
                i -= 1
                j -= 1
            elif H[i, j] == E[i, j]:
                state = 1
            else:
                state = 2
        elif state == 1:
            if E[i, j] == H[i, j - 1] + gap_open:
                state = 0
            j -= 1
        else:
            if F[i, j] == H[i - 1, j] + gap_open:
                state = 0
            i -= 1
    return qs[:k][::-1].copy(), ts[:k][::-1].copy()


def local_align(a, b, scores: AlignScores = AlignScores()) -> tuple[list[tuple[int, int]], int]:
    """Best local alignment of two state strings: (aligned index pairs, score).

    Among equal-scoring end cells the first in row-major order is used.
    """
    sa = np.ascontiguousarray(getattr(a, "states", a), dtype=np.int64)
    sb = np.ascontiguousarray(getattr(b, "states", b), dtype=np.int64)
    if sa.size == 0 or sb.size == 0:
        raise ValueError("local_align needs two non-empty strings")
    H, E, F, best, bi, bj = _sw_fill(sa, sb, scores.match, scores.mismatch,
                                     scores.gap_open, scores.gap_extend)
    if best <= 0:
        return [], 0
    qs, ts = _sw_traceback(sa, sb, H, E, F, bi, bj, scores.match, scores.mismatch,
                           scores.gap_open, scores.gap_extend)
    return list(zip(qs.tolist(), ts.tolist())), int(best)


# -- superposition and scoring -------------------------------------------------------

def _superpose(p: np.ndarray, q: np.ndarray) -> Superposition:
    pc = p.mean(axis=0)
    qc = q.mean(axis=0)
    cov = (q - qc).T @ (p - pc)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = pc - rot @ qc
    diff = p - (q @ rot.T + trans)
    rmsd = float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
    return Superposition(rot, trans, rmsd)


def kabsch(p, q) -> Superposition:
    """Least-squares rigid superposition of ``q`` onto ``p`` (reflections excluded)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"kabsch needs two equal-length point lists, got {p.shape} and {q.shape}")
    if len(p) < 3:
        raise ValueError("kabsch needs at least 3 points")
    for pts, name in ((p, "p"), (q, "q")):
        sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
        if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
            raise ValueError(f"degenerate (collinear) point set {name}")
    return _superpose(p, q)


def tm_d0(query_len: int) -> float:
    return max(1.24 * np.cbrt(query_len - 15) - 1.8, 0.5)


def tm_score_from_distances(distances, query_len: int) -> float:
    d = np.asarray(distances, dtype=np.float64) / tm_d0(query_len)
    return float(np.sum(1.0 / (1.0 + d * d)) / query_len)


def tm_score(query: Backbone, target: Backbone, pairs) -> float:
    """TM-score after one Kabsch superposition of the paired CA atoms, normalised by the
    query length."""
    pairs = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    if len(pairs) < 3:
        warnings.warn("fewer than 3 aligned pairs; TM-score set to 0", stacklevel=2)
        return 0.0
    if pairs[:, 0].max() >= len(query) or pairs[:, 1].max() >= len(target) or pairs.min() < 0:
        raise ValueError("pair index out of range")
    p = query.ca[pairs[:, 0]]
    q = target.ca[pairs[:, 1]]
    sup = _superpose(p, q)
    dist = np.linalg.norm(p - sup.apply(q), axis=1)
    return tm_score_from_distances(dist, len(query))


# -- search ----------------------------------------------------------------------

class StructureDatabase:
    """Backbones plus their cached state strings."""

    def __init__(self, backbones, scores: AlignScores = AlignScores()):
        self.backbones = list(backbones)
        self.scores = scores
        self.states = [discretize(b) for b in self.backbones]
        self.by_id = {b.id: b for b in self.backbones}

    def __len__(self):
        return len(self.backbones)


def _score_entry(query: Backbone, qstates, target: Backbone, tstates, scores):
    pairs, _ = local_align(qstates, tstates, scores)
    if len(pairs) < 3:
        return None
    tm = tm_score(query, target, pairs)
    if tm <= 0.0:
        return None
    return NeighborHit(target.id, min(tm, 1.0), tuple(pairs), query.id)


def search(query: Backbone, db, k: int, threads: int = 1, scores: AlignScores | None = None) -> list[NeighborHit]:
    """Top-``k`` hits by TM-score (descending, database order on ties).

    ``db`` is a :class:`StructureDatabase` or a list of backbones. Entries sharing the
    query id are skipped, as are entries with fewer than 3 aligned pairs.
    """
    if not isinstance(db, StructureDatabase):
        db = StructureDatabase(db, scores or AlignScores())
    scores = scores or db.scores
    if k <= 0 or len(db) == 0:
        return []
    qstates = discretize(query)
    jobs = [(b, s) for b, s in zip(db.backbones, db.states) if b.id != query.id]

    def run(job):
        return _score_entry(query, qstates, job[0], job[1], scores)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    order = sorted((i for i, h in enumerate(results) if h is not None), key=lambda i: -results[i].tm_score)
    return [results[i] for i in order[:k]]
