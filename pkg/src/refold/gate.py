"""Dynamic utility gate: decides per protein whether the fused distribution is used.

A logistic model on seven inference-time statistics predicts whether fusion lowers
the cross-entropy. Below the tuned threshold the whole protein falls back to the base
distribution. Above it, positions without any aligned neighbor still fall back.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import astuple, dataclass, fields

import numpy as np

from . import autodiff as ad
from .data import argmax_rows
from .stacker import StackedAlignment

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
TAU_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass(frozen=True)
class GateFeatures:
    coverage: float
    mean_tm: float
    max_tm: float
    k_valid: float
    mean_kl: float
    mean_base_entropy: float
    flip_rate: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)


FEATURE_NAMES = tuple(f.name for f in fields(GateFeatures))


def _entropy(p: np.ndarray) -> np.ndarray:
    return -np.sum(p * np.log(np.maximum(p, PROB_FLOOR)), axis=-1)


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q), natural log, both sides floored at 1e-12."""
    pf = np.maximum(p, PROB_FLOOR)
    qf = np.maximum(q, PROB_FLOOR)
    return np.sum(p * (np.log(pf) - np.log(qf)), axis=-1)


def extract_features(p_base, p_fused, alignment: StackedAlignment) -> GateFeatures:
    p_base = np.asarray(p_base, dtype=np.float64)
    p_fused = np.asarray(p_fused, dtype=np.float64)
    if p_base.shape != p_fused.shape or p_base.shape[0] != alignment.length:
        raise ValueError("p_base, p_fused and the alignment must share the same length")
    neighbor_valid = alignment.valid[1:]
    tm = alignment.tm_scores
    return GateFeatures(
        coverage=float(neighbor_valid.any(axis=0).mean()) if len(neighbor_valid) else 0.0,
        mean_tm=float(tm.mean()) if tm.size else 0.0,
        max_tm=float(tm.max()) if tm.size else 0.0,
        k_valid=float(neighbor_valid.any(axis=1).sum()),
        mean_kl=float(kl_rows(p_fused, p_base).mean()),
        mean_base_entropy=float(_entropy(p_base).mean()),
        flip_rate=float(np.mean(argmax_rows(p_fused) != argmax_rows(p_base))),
    )


def total_cross_entropy(p, y) -> float:
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(getattr(y, "indices", y), dtype=np.int64)
    if p.shape[0] != y.shape[0]:
        raise ValueError("distribution and sequence lengths differ")
    return float(-np.sum(np.log(np.maximum(p[np.arange(len(y)), y], PROB_FLOOR))))


def label(p_base, p_fused, y) -> int:
    """1 iff fused cross-entropy is strictly lower than base cross-entropy."""
    return int(total_cross_entropy(p_fused, y) < total_cross_entropy(p_base, y))


@dataclass
class GateModel:
    weights: np.ndarray
    bias: float
    tau: float = 0.5
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def score(self, features) -> float:
        phi = features.as_array() if isinstance(features, GateFeatures) else np.asarray(features, dtype=np.float64)
        mean = np.zeros_like(phi) if self.mean is None else self.mean
        std = np.ones_like(phi) if self.std is None else self.std
        z = float(np.dot(self.weights, (phi - mean) / std) + self.bias)
        return float(0.5 * (1.0 + np.tanh(0.5 * z)))

    def to_arrays(self) -> dict:
        n = len(self.weights)
        return {
            "gate.weights": np.asarray(self.weights, dtype=np.float64),
            "gate.bias": np.array(self.bias),
            "gate.tau": np.array(self.tau),
            "gate.mean": np.zeros(n) if self.mean is None else self.mean,
            "gate.std": np.ones(n) if self.std is None else self.std,
        }

    @classmethod
    def from_arrays(cls, arrays: dict) -> "GateModel":
        return cls(np.asarray(arrays["gate.weights"]), float(arrays["gate.bias"]), float(arrays["gate.tau"]),
                   np.asarray(arrays["gate.mean"]), np.asarray(arrays["gate.std"]))


def train_stage2(features, labels, seed: int = 0, epochs: int = 2000, lr: float = 0.05,
                 l2: float = 1e-4) -> GateModel:
    """Logistic regression on standardised features, fitted by Adam on BCE.

    With a single label class the gate becomes a constant (high for all-1, low for
    all-0) and a warning is issued; the threshold then decides all-or-nothing.
    """
    X = np.array([f.as_array() if isinstance(f, GateFeatures) else np.asarray(f, float) for f in features])
    y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("need one label per feature vector")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    width = X.shape[1]
    if len(np.unique(y)) < 2:
        warnings.warn("gate training labels hold a single class; using a constant gate", stacklevel=2)
        return GateModel(np.zeros(width), 10.0 if y[0] == 1 else -10.0, 0.5, mean, std)
    Xs = (X - mean) / std
    rng = np.random.default_rng(seed)
    w = ad.parameter(rng.uniform(-0.01, 0.01, width), "w")
    b = ad.parameter(0.0, "b")
    opt = ad.Adam([w, b], lr=lr, warmup_steps=20)
    for _ in range(epochs):
        opt.zero_grad()
        logits = ad.add(ad.matmul(Xs, ad.reshape(w, (width, 1))), b)
        loss = ad.binary_cross_entropy_with_logits(ad.reshape(logits, (len(y),)), y)
        if l2:
            loss = ad.add(loss, ad.mul(ad.sum(ad.mul(w, w)), l2))
        loss.backward()
        opt.step()
    return GateModel(w.data.copy(), float(b.data), 0.5, mean, std)


def gated_infer(p_base, p_fused, z_ref, gate: GateModel, features) -> np.ndarray:
    """Base rows when the gate score is below tau, otherwise fused rows except where
    the reference logits are exactly zero."""
    p_base = np.asarray(p_base, dtype=np.float64)
    p_fused = np.asarray(p_fused, dtype=np.float64)
    z_ref = np.asarray(z_ref, dtype=np.float64)
    if not (p_base.shape == p_fused.shape == z_ref.shape):
        raise ValueError("p_base, p_fused and z_ref must share one shape")
    if gate.score(features) < gate.tau:
        return p_base.copy()
    no_prior = np.all(z_ref == 0.0, axis=1)
    return np.where(no_prior[:, None], p_base, p_fused)


@dataclass(eq=False)
class GateExample:
    """Everything tau tuning needs for one validation protein."""

    p_base: np.ndarray
    p_fused: np.ndarray
    z_ref: np.ndarray
    features: GateFeatures
    target: np.ndarray


def _recovery(p, y) -> float:
    return float(np.mean(argmax_rows(p) == y))


def tune_tau(gate: GateModel, examples, grid=TAU_GRID) -> float:
    """Grid value maximising mean per-protein recovery of the gated output (smallest on ties)."""
    examples = list(examples)
    if not examples:
        raise ValueError("tau tuning needs a non-empty validation set")
    scores = [gate.score(e.features) for e in examples]
    base_rec = [_recovery(e.p_base, e.target) for e in examples]
    no_prior = [np.all(e.z_ref == 0.0, axis=1) for e in examples]
    fused_rec = [_recovery(np.where(m[:, None], e.p_base, e.p_fused), e.target)
                 for e, m in zip(examples, no_prior)]
    best_tau, best = None, -np.inf
    for tau in grid:
        rec = np.mean([b if s < tau else f for s, b, f in zip(scores, base_rec, fused_rec)])
        if rec > best:
            best_tau, best = tau, rec
    log.debug("tau=%s validation recovery %.4f", best_tau, best)
    return float(best_tau)
