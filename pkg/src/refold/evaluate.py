"""Metrics, entropy-stratified analysis, site transitions, K sweeps, ablations and latency."""

from __future__ import annotations

import csv
import io
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import fusion as fz
from .data import argmax_rows, softmax_rows
from .gate import PROB_FLOOR, GateModel
from .pipeline import Experiment, fit_gate, prepare_record, refine

LOW_ENTROPY = 1.5
HIGH_ENTROPY = 2.3
REGIMES = ("low", "mid", "high")
TRANSITIONS = ("Neg", "Pos", "Neg->Pos", "Pos->Neg")


def _targets(y) -> np.ndarray:
    return np.asarray(getattr(y, "indices", y), dtype=np.int64)


def _predictions(p) -> np.ndarray:
    p = np.asarray(p)
    return argmax_rows(p) if p.ndim == 2 else p.astype(np.int64)


def recovery(p, y) -> float:
    """Fraction of positions whose argmax (lowest index on ties) equals the native residue."""
    y = _targets(y)
    pred = _predictions(p)
    if pred.shape != y.shape:
        raise ValueError("prediction and sequence lengths differ")
    return float(np.mean(pred == y))


def perplexity(p, y) -> float:
    y = _targets(y)
    p = np.asarray(p, dtype=np.float64)
    if p.shape[0] != y.shape[0]:
        raise ValueError("prediction and sequence lengths differ")
    nll = -np.log(np.maximum(p[np.arange(len(y)), y], PROB_FLOOR))
    return float(np.exp(nll.mean()))


def token_entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -np.sum(p * np.log(np.maximum(p, PROB_FLOOR)), axis=-1)


def regime_of(entropy) -> np.ndarray:
    """0 = low (H < 1.5), 1 = mid (1.5 <= H < 2.3), 2 = high (H >= 2.3); nats."""
    h = np.asarray(entropy)
    return np.where(h < LOW_ENTROPY, 0, np.where(h < HIGH_ENTROPY, 1, 2))


@dataclass
class RegimeStats:
    tokens: int
    base_recovery: float
    refined_recovery: float

    @property
    def delta(self) -> float:
        return self.refined_recovery - self.base_recovery


def entropy_stratify(p_base, predictions, y) -> dict[str, RegimeStats]:
    """Per-regime token recoveries; arguments may be single proteins or lists of them."""
    if isinstance(p_base, (list, tuple)):
        p_base = np.concatenate(p_base)
        predictions = np.concatenate([_predictions(p) for p in predictions])
        y = np.concatenate([_targets(t) for t in y])
    p_base = np.asarray(p_base, dtype=np.float64)
    y = _targets(y)
    refined = _predictions(predictions)
    base_ok = argmax_rows(p_base) == y
    ref_ok = refined == y
    regime = regime_of(token_entropy(p_base))
    out = {}
    for i, name in enumerate(REGIMES):
        sel = regime == i
        n = int(sel.sum())
        out[name] = RegimeStats(n, float(base_ok[sel].mean()) if n else float("nan"),
                                float(ref_ok[sel].mean()) if n else float("nan"))
    return out


def transition_map(base_pred, refined_pred, y) -> tuple[list[str], dict[str, int]]:
    """Label each site Neg (wrong->wrong), Pos (right->right), Neg->Pos or Pos->Neg."""
    y = _targets(y)
    b = _predictions(base_pred) == y
    r = _predictions(refined_pred) == y
    if b.shape != r.shape:
        raise ValueError("base and refined predictions differ in length")
    labels = []
    for bb, rb in zip(b, r):
        if bb and rb:
            labels.append("Pos")
        elif bb:
            labels.append("Pos->Neg")
        elif rb:
            labels.append("Neg->Pos")
        else:
            labels.append("Neg")
    counts = {t: labels.count(t) for t in TRANSITIONS}
    return labels, counts


_GRID_CHAR = {"Neg": ".", "Pos": "#", "Neg->Pos": "+", "Pos->Neg": "x"}


def format_transition_grid(maps: dict, width: int = 50) -> str:
    """One line per protein over its first ``width`` sites: . Neg, # Pos, + Neg->Pos, x Pos->Neg."""
    name_w = max((len(k) for k in maps), default=0)
    lines = [f"{'':{name_w}}  legend: . Neg  # Pos  + Neg->Pos  x Pos->Neg"]
    for name, labels in maps.items():
        lines.append(f"{name:{name_w}}  " + "".join(_GRID_CHAR[t] for t in labels[:width]))
    return "\n".join(lines) + "\n"


# -- reports ------------------------------------------------------------------------

@dataclass
class EvalReport:
    per_protein: dict  # id -> (base recovery, refined recovery)
    recovery: float
    base_recovery: float
    perplexity: float
    base_perplexity: float
    regimes: dict
    transitions: dict
    config: dict = field(default_factory=dict)

    def summary(self) -> str:
        lines = [
            f"proteins            {len(self.per_protein)}",
            f"base recovery       {self.base_recovery:.4f}",
            f"refined recovery    {self.recovery:.4f}  (delta {self.recovery - self.base_recovery:+.4f})",
            f"base perplexity     {self.base_perplexity:.4f}",
            f"refined perplexity  {self.perplexity:.4f}",
            "regime  tokens  base    refined  delta",
        ]
        for name, s in self.regimes.items():
            lines.append(f"{name:<7} {s.tokens:>6}  {s.base_recovery:.4f}  {s.refined_recovery:.4f}   {s.delta:+.4f}")
        lines.append("transitions " + "  ".join(f"{k}={v}" for k, v in self.transitions.items()))
        lines.extend(f"config {k}={v}" for k, v in self.config.items())
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["protein", "base_recovery", "refined_recovery"])
        for pid, (b, r) in self.per_protein.items():
            w.writerow([pid, repr(b), repr(r)])
        return buf.getvalue()


def _pooled_perplexity(ps, ys) -> float:
    nll = np.concatenate([-np.log(np.maximum(p[np.arange(len(y)), y], PROB_FLOOR)) for p, y in zip(ps, ys)])
    return float(np.exp(nll.mean()))


def evaluate_records(records, params: fz.FusionParams | None, gate: GateModel | None, k: int,
                     config: dict | None = None, use_gate: bool = True) -> tuple[EvalReport, dict]:
    """Run the (gated) pipeline on prepared records. ``params=None`` evaluates the base alone.

    Recovery is the mean of per-protein recoveries; perplexity pools all tokens.
    Returns the report and the per-protein transition labels.
    """
    p_bases, p_outs, ys, per, maps = [], [], [], {}, {}
    for r in records:
        p_base = softmax_rows(r.z_base)
        if params is None or k == 0:
            p_out = p_base
        else:
            p_out = refine(r.z_base, r.at_k(k), params, gate if use_gate else None).p_out
        p_bases.append(p_base)
        p_outs.append(p_out)
        ys.append(r.target)
        per[r.id] = (recovery(p_base, r.target), recovery(p_out, r.target))
        maps[r.id], _ = transition_map(p_base, p_out, r.target)
    totals = {t: 0 for t in TRANSITIONS}
    for labels in maps.values():
        for t in labels:
            totals[t] += 1
    report = EvalReport(
        per_protein=per,
        recovery=float(np.mean([v[1] for v in per.values()])),
        base_recovery=float(np.mean([v[0] for v in per.values()])),
        perplexity=_pooled_perplexity(p_outs, ys),
        base_perplexity=_pooled_perplexity(p_bases, ys),
        regimes=entropy_stratify(p_bases, p_outs, ys),
        transitions=totals,
        config=dict(config or {}),
    )
    return report, maps


def sweep_k(records, params: fz.FusionParams, gate: GateModel | None, k_values, val_records=None,
            seed: int = 0) -> list[tuple[int, float, float]]:
    """(K, recovery, perplexity) for the gated pipeline at each neighbor count.

    With ``val_records`` the gate is refitted at every K, since its inputs (TM
    statistics, neighbor count) shift with K; otherwise ``gate`` is used throughout.
    """
    k_values = list(k_values)
    if not k_values:
        raise ValueError("sweep_k needs at least one K")
    rows = []
    for k in k_values:
        g = gate
        if val_records is not None and k > 0:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                g = fit_gate(val_records, params, k, seed=seed)
        report, _ = evaluate_records(records, params, g, k)
        rows.append((int(k), report.recovery, report.perplexity))
    return rows


def format_sweep_csv(rows) -> str:
    lines = ["K,recovery,perplexity"]
    lines.extend(f"{k},{rec!r},{ppl!r}" for k, rec, ppl in rows)
    return "\n".join(lines) + "\n"


# -- ablations ------------------------------------------------------------------------

ABLATIONS = ("full", "no-gate", "no-tm-bias", "row-only", "priors-only", "base-only")


def ablate(exp: Experiment, configs=ABLATIONS, split: str = "test") -> list[dict]:
    """Train/evaluate each configuration on the experiment; one result row per config.

    ``exp`` must already carry the trained full model (``train_experiment``); the
    mechanism ablations retrain fusion with the matching flag and refit the gate.
    """
    from .pipeline import train_experiment  # local: avoids a cycle at import time

    records = exp.subset(split)
    k = exp.config.k
    rows = []
    for name in configs:
        if name == "base-only":
            report, _ = evaluate_records(records, None, None, k)
        elif name in ("full", "no-gate"):
            report, _ = evaluate_records(records, exp.fusion, exp.gate, k, use_gate=name == "full")
        else:
            flag = {"no-tm-bias": "no_tm_bias", "row-only": "row_only", "priors-only": "priors_only"}[name]
            variant = Experiment(exp.config, exp.dataset, exp.base, exp.records, exp.splits)
            fcfg = replace(exp.config.fusion, **{flag: True})
            train_experiment(variant, fusion_config=fcfg, with_gate=name != "priors-only")
            report, _ = evaluate_records(records, variant.fusion, variant.gate, k,
                                         use_gate=name != "priors-only")
        rows.append({"config": name, "recovery": report.recovery, "perplexity": report.perplexity})
    return rows


def format_ablation_csv(rows) -> str:
    lines = ["config,recovery,perplexity"]
    lines.extend(f"{r['config']},{r['recovery']!r},{r['perplexity']!r}" for r in rows)
    return "\n".join(lines) + "\n"


# -- latency ----------------------------------------------------------------------------

PHASES = ("base", "match", "stack", "fuse", "gate")


@dataclass
class BenchReport:
    proteins: int
    batch: int
    threads: int
    per_protein_total: np.ndarray  # wall-clock seconds per timed protein
    phase_totals: dict  # seconds summed over timed proteins

    @property
    def phase_sum(self) -> float:
        return float(sum(self.phase_totals.values()))

    def stats(self) -> dict:
        t = self.per_protein_total
        return {"mean": float(t.mean()), "median": float(np.median(t)), "p95": float(np.percentile(t, 95))}

    def summary(self) -> str:
        s = self.stats()
        lines = [f"proteins {self.proteins}  batch {self.batch}  threads {self.threads}",
                 f"per-protein latency  mean {s['mean'] * 1e3:.3f} ms  median {s['median'] * 1e3:.3f} ms"
                 f"  p95 {s['p95'] * 1e3:.3f} ms"]
        for ph in PHASES:
            lines.append(f"  {ph:<6} {self.phase_totals[ph] / self.proteins * 1e3:.3f} ms/protein")
        return "\n".join(lines) + "\n"


def bench(backbones, base, db, pool, params: fz.FusionParams, gate: GateModel | None, k: int = 10,
          batch: int = 16, warmup_batches: int = 3, threads: int = 1) -> BenchReport:
    """Per-protein wall-clock of the full pipeline, split by phase.

    ``warmup_batches`` batches (cycling through the data) run first and are not timed.
    """
    backbones = list(backbones)
    if not backbones:
        raise ValueError("bench needs a non-empty dataset")
    for i in range(warmup_batches * batch):
        _run_one(backbones[i % len(backbones)], base, db, pool, params, gate, k, threads, {})
    totals = {ph: 0.0 for ph in PHASES}
    per = []
    for start in range(0, len(backbones), batch):
        for b in backbones[start:start + batch]:
            phases: dict = {}
            t0 = time.perf_counter()
            _run_one(b, base, db, pool, params, gate, k, threads, phases)
            per.append(time.perf_counter() - t0)
            for ph in PHASES:
                totals[ph] += phases.get(ph, 0.0)
    return BenchReport(len(backbones), batch, threads, np.array(per), totals)


def _run_one(b, base, db, pool, params, gate, k, threads, phases):
    t0 = time.perf_counter()
    z = base.logits(b)
    phases["base"] = time.perf_counter() - t0
    rec = prepare_record(b, z, db, pool, k, params.beta0, threads=threads, timings=phases)
    return refine(rec.z_base, rec.alignment, params, gate, timings=phases)
