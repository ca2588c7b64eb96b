"""Residue vocabulary and the immutable domain records shared by every stage."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

# Alphabetical one-letter order; the logit axis, checkpoints and logits files all use it.
AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
GAP = "-"
GAP_INDEX = 20
VOCAB = AMINO_ACIDS + GAP
NUM_AA = 20
NUM_TOKENS = 21

_INDEX = {aa: i for i, aa in enumerate(VOCAB)}


class ParseError(ValueError):
    """Raised by every reader on malformed input; carries a line/position when known."""

    def __init__(self, message: str, line: int | None = None, position: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if position is not None:
            where.append(f"position {position}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.position = position


def encode(token: str) -> int:
    try:
        return _INDEX[token]
    except KeyError:
        raise ValueError(f"unknown residue token {token!r}") from None


def decode(index: int) -> str:
    if not 0 <= index < NUM_TOKENS:
        raise ValueError(f"token index {index} out of range")
    return VOCAB[index]


def encode_sequence(residues: str) -> np.ndarray:
    return np.array([encode(c) for c in residues], dtype=np.int64)


def decode_sequence(indices) -> str:
    return "".join(VOCAB[int(i)] for i in indices)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Sequence:
    id: str
    residues: str

    def __post_init__(self):
        if not self.residues:
            raise ValueError(f"sequence {self.id!r} is empty")
        for pos, c in enumerate(self.residues, start=1):
            if c not in AMINO_ACIDS:
                raise ParseError(f"sequence {self.id!r}: non-canonical residue {c!r}", position=pos)

    def __len__(self):
        return len(self.residues)

    @property
    def indices(self) -> np.ndarray:
        return encode_sequence(self.residues)


@dataclass(frozen=True, eq=False)
class Backbone:
    """N/CA/C coordinates, shape (L, 3, 3), atoms in that order along axis 1."""

    id: str
    coords: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[1:] != (3, 3) or coords.shape[0] < 1:
            raise ValueError(f"backbone {self.id!r}: expected (L, 3, 3) coordinates, got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError(f"backbone {self.id!r}: non-finite coordinate")
        object.__setattr__(self, "coords", _frozen(coords))
        if len(coords) > 1:
            gaps = np.linalg.norm(np.diff(coords[:, 1], axis=0), axis=1)
            bad = np.flatnonzero(gaps >= 6.0)
            if bad.size:
                warnings.warn(
                    f"backbone {self.id!r}: CA-CA distance >= 6.0 A after residue(s) {bad.tolist()}",
                    stacklevel=2,
                )

    def __len__(self):
        return self.coords.shape[0]

    @property
    def ca(self) -> np.ndarray:
        return self.coords[:, 1]

    def transformed(self, rotation, translation, id: str | None = None) -> "Backbone":
        rotation = np.asarray(rotation, dtype=np.float64)
        new = self.coords @ rotation.T + np.asarray(translation, dtype=np.float64)
        return Backbone(self.id if id is None else id, new)


@dataclass(frozen=True)
class NeighborHit:
    """A retrieved structure: global TM-score plus 0-based (query, target) residue pairs."""

    target_id: str
    tm_score: float
    pairs: tuple = field(default_factory=tuple)
    query_id: str = ""

    def __post_init__(self):
        tm = float(self.tm_score)
        if not np.isfinite(tm) or not 0.0 < tm <= 1.0:
            raise ValueError(f"hit {self.target_id!r}: tm_score {tm} outside (0, 1]")
        object.__setattr__(self, "tm_score", tm)
        pairs = tuple((int(q), int(t)) for q, t in self.pairs)
        for (q0, t0), (q1, t1) in zip(pairs, pairs[1:]):
            if q1 <= q0 or t1 <= t0:
                raise ValueError(
                    f"hit {self.target_id!r}: pairs not strictly increasing at {q0}:{t0} -> {q1}:{t1}"
                )
        if pairs and (pairs[0][0] < 0 or pairs[0][1] < 0):
            raise ValueError(f"hit {self.target_id!r}: negative pair index")
        object.__setattr__(self, "pairs", pairs)

    def check_bounds(self, query_len: int, target_len: int):
        if self.pairs and (self.pairs[-1][0] >= query_len or self.pairs[-1][1] >= target_len):
            raise ValueError(
                f"hit {self.target_id!r}: pair {self.pairs[-1]} out of range for lengths "
                f"{query_len}/{target_len}"
            )


def check_logits(z: np.ndarray, length: int | None = None) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != NUM_AA:
        raise ValueError(f"expected an L x {NUM_AA} logit matrix, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logit matrix contains non-finite values")
    if length is not None and z.shape[0] != length:
        raise ValueError(f"logit matrix has {z.shape[0]} rows, expected {length}")
    return z


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def argmax_rows(m: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest residue index
    return np.argmax(np.asarray(m), axis=-1)
