"""Stacked neighbor alignment: anchor row, aligned neighbor rows and reliability bias."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import GAP_INDEX, VOCAB, NeighborHit, argmax_rows, check_logits


@dataclass(frozen=True, eq=False)
class StackedAlignment:
    """``tokens`` is (K+1, L) int, row 0 the anchor; ``beta`` has K+1 entries."""

    tokens: np.ndarray
    valid: np.ndarray
    tm_scores: np.ndarray
    beta: np.ndarray
    target_ids: tuple = ()

    @property
    def num_neighbors(self) -> int:
        return self.tokens.shape[0] - 1

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    def with_beta0(self, beta0: float) -> "StackedAlignment":
        return StackedAlignment(self.tokens, self.valid, self.tm_scores,
                                reliability_bias(self.tm_scores, beta0), self.target_ids)

    def truncated(self, k: int) -> "StackedAlignment":
        """The same alignment restricted to its first ``k`` neighbors."""
        k = min(k, self.num_neighbors)
        tm = self.tm_scores[:k]
        return StackedAlignment(self.tokens[:k + 1], self.valid[:k + 1], tm,
                                reliability_bias(tm, float(self.beta[0])), self.target_ids[:k])


def anchor_row(z_base) -> np.ndarray:
    """Greedy decode of the base logits; ties go to the lowest residue index."""
    return argmax_rows(check_logits(z_base))


def reliability_bias(tm_scores, beta0: float) -> np.ndarray:
    s = np.asarray(tm_scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        return np.array([float(beta0)])
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite TM-score")
    e = np.exp(s - s.max())
    return np.concatenate([[float(beta0)], e / e.sum()])


def build(z_base, hits: list[NeighborHit], target_seqs: dict, k: int, beta0: float) -> StackedAlignment:
    """Stack the anchor and up to ``k`` hits (already sorted by descending TM-score).

    ``target_seqs`` maps target id to a :class:`~refold.data.Sequence` or a residue string.
    Query positions a hit does not cover hold GAP; with fewer hits than ``k`` the
    matrix simply has fewer rows.
    """
    z_base = check_logits(z_base)
    length = z_base.shape[0]
    used = list(hits)[:max(k, 0)]
    tokens = np.full((len(used) + 1, length), GAP_INDEX, dtype=np.int64)
    tokens[0] = anchor_row(z_base)
    for r, hit in enumerate(used, start=1):
        seq = target_seqs.get(hit.target_id)
        if seq is None:
            raise KeyError(f"no sequence for hit target {hit.target_id!r}")
        residues = getattr(seq, "residues", seq)
        hit.check_bounds(length, len(residues))
        seen = set()
        for q, t in hit.pairs:
            if q in seen:
                raise ValueError(f"hit {hit.target_id!r} maps query position {q} twice")
            seen.add(q)
            tokens[r, q] = VOCAB.index(residues[t])
    tm = np.array([h.tm_score for h in used], dtype=np.float64)
    return StackedAlignment(tokens, tokens != GAP_INDEX, tm, reliability_bias(tm, beta0),
                            tuple(h.target_id for h in used))


def format_stack(a: StackedAlignment, name: str = "") -> str:
    """Plain-text dump for inspection: one token row per line, then mask and beta."""
    lines = [f"# stack {name} K={a.num_neighbors} L={a.length}"]
    labels = ["anchor", *a.target_ids]
    tms = [float("nan"), *a.tm_scores.tolist()]
    for r in range(a.tokens.shape[0]):
        row = "".join(VOCAB[t] for t in a.tokens[r])
        lines.append(f"{r}\t{labels[r]}\ttm={tms[r]!r}\tbeta={float(a.beta[r])!r}\t{row}")
    lines.append("# valid")
    lines.extend("".join("1" if v else "0" for v in row) for row in a.valid)
    return "\n".join(lines) + "\n"
