"""End-to-end glue: retrieval -> stacking -> fusion -> gate, and the synthetic experiment."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import fusion as fz
from .data import softmax_rows
from .gate import GateExample, GateFeatures, GateModel, extract_features, gated_infer, label, train_stage2, tune_tau
from .matcher import StructureDatabase, search
from .stacker import StackedAlignment, anchor_row, build
from .toybase import ToyBase, featurize_backbone, synth_family

log = logging.getLogger(__name__)


@dataclass(eq=False)
class ProteinRecord:
    """A query with base logits and its retrieved neighbors, stacked up to ``k_max``."""

    id: str
    z_base: np.ndarray
    alignment: StackedAlignment
    target: np.ndarray | None = None
    hits: list = field(default_factory=list)
    base_features: np.ndarray | None = None

    def at_k(self, k: int) -> StackedAlignment:
        return self.alignment.truncated(k)

    def sample(self, k: int) -> fz.FusionSample:
        return fz.FusionSample(self.id, self.at_k(k), self.z_base, self.target, self.base_features)


@dataclass(eq=False)
class Refinement:
    p_base: np.ndarray
    p_fused: np.ndarray
    z_ref: np.ndarray
    features: GateFeatures
    gate_score: float | None
    p_out: np.ndarray
    attention: np.ndarray | None = None


def prepare_record(backbone, z_base, db, pool: dict, k_max: int, beta0: float = 0.1, target=None,
                   threads: int = 1, with_features: bool = False, timings: dict | None = None) -> ProteinRecord:
    t0 = time.perf_counter()
    hits = search(backbone, db, k_max, threads=threads)
    t1 = time.perf_counter()
    alignment = build(z_base, hits, pool, k_max, beta0)
    t2 = time.perf_counter()
    if timings is not None:
        timings["match"] = timings.get("match", 0.0) + t1 - t0
        timings["stack"] = timings.get("stack", 0.0) + t2 - t1
    feats = featurize_backbone(backbone) if with_features else None
    return ProteinRecord(backbone.id, np.asarray(z_base, dtype=np.float64), alignment,
                         None if target is None else np.asarray(getattr(target, "indices", target)),
                         hits, feats)


def refine(z_base, alignment: StackedAlignment, params: fz.FusionParams, gate: GateModel | None = None,
           timings: dict | None = None) -> Refinement:
    """Fuse one protein; with ``gate=None`` the fused distribution is used unconditionally
    (still falling back at positions without neighbors)."""
    t0 = time.perf_counter()
    out = fz.forward(alignment, z_base, params)
    p_base = softmax_rows(z_base)
    t1 = time.perf_counter()
    feats = extract_features(p_base, out.p_fused, alignment)
    if gate is None:
        no_prior = np.all(out.z_ref == 0.0, axis=1)
        p_out = out.p_fused if params.config.priors_only else np.where(no_prior[:, None], p_base, out.p_fused)
        score = None
    else:
        score = gate.score(feats)
        p_out = gated_infer(p_base, out.p_fused, out.z_ref, gate, feats)
    t2 = time.perf_counter()
    if timings is not None:
        timings["fuse"] = timings.get("fuse", 0.0) + t1 - t0
        timings["gate"] = timings.get("gate", 0.0) + t2 - t1
    return Refinement(p_base, out.p_fused, out.z_ref, feats, score, p_out, out.attention)


def gate_examples(records, params: fz.FusionParams, k: int) -> list[GateExample]:
    out = []
    for r in records:
        a = r.at_k(k)
        res = refine(r.z_base, a, params)
        out.append(GateExample(res.p_base, res.p_fused, res.z_ref, res.features, r.target))
    return out


def fit_gate(records, params: fz.FusionParams, k: int, seed: int = 0) -> GateModel:
    """Stage two: labels and features on held-out records, logistic fit, then tau tuning."""
    examples = gate_examples(records, params, k)
    labels = [label(e.p_base, e.p_fused, e.target) for e in examples]
    gate = train_stage2([e.features for e in examples], labels, seed=seed)
    gate.tau = tune_tau(gate, examples)
    return gate


def split_by_family(families, fractions=(0.5, 0.25, 0.25), seed: int = 0) -> list[np.ndarray]:
    """Stratified split of member indices into len(fractions) parts."""
    families = np.asarray(families)
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    bounds = np.cumsum(fractions) / np.sum(fractions)
    for fam in np.unique(families):
        members = rng.permutation(np.flatnonzero(families == fam))
        cuts = np.round(bounds * len(members)).astype(int)
        start = 0
        for p, stop in zip(parts, cuts):
            p.extend(members[start:stop].tolist())
            start = stop
    return [np.sort(np.array(p, dtype=np.int64)) for p in parts]


# -- the synthetic experiment ------------------------------------------------------------

@dataclass
class ExperimentConfig:
    n: int = 64
    length: int = 60
    mutation: float = 0.15
    seed: int = 7
    k: int = 10
    k_max: int = 20
    pool_mutation: float | None = None
    base_epochs: int = 60
    base_pretrain_n: int = 64
    threads: int = 1
    fusion: fz.FusionConfig = field(default_factory=fz.FusionConfig)
    train: fz.TrainConfig = field(default_factory=lambda: fz.TrainConfig(epochs=40, lr=2e-3, warmup_steps=40,
                                                                          k_min=1))


@dataclass(eq=False)
class Experiment:
    config: ExperimentConfig
    dataset: object
    base: ToyBase
    records: list
    splits: dict
    fusion: fz.FusionParams | None = None
    gate: GateModel | None = None
    loss_trace: list = field(default_factory=list)

    def subset(self, name: str) -> list:
        return [self.records[i] for i in self.splits[name]]


def pretrain_base(config: ExperimentConfig) -> ToyBase:
    """The base model is fitted on a separate draw (its own prototypes), standing in for a
    pre-trained predictor that has never seen the evaluation families."""
    pre = synth_family(config.base_pretrain_n, config.length, config.mutation, config.seed + 1000,
                       prefix="pre")
    base = ToyBase.init(seed=config.seed)
    base.train(zip(pre.backbones, pre.sequences), epochs=config.base_epochs, seed=config.seed)
    return base


def prepare_experiment(config: ExperimentConfig, base: ToyBase | None = None, dataset=None) -> Experiment:
    ds = dataset if dataset is not None else synth_family(
        config.n, config.length, config.mutation, config.seed, pool_mutation_rate=config.pool_mutation)
    base = base if base is not None else pretrain_base(config)
    db = StructureDatabase(ds.backbones)
    beta0 = config.fusion.beta0_init
    records = [prepare_record(b, base.logits(b), db, ds.pool, config.k_max, beta0, s,
                              threads=config.threads, with_features=True)
               for b, s in zip(ds.backbones, ds.sequences)]
    train, val, test = split_by_family(ds.families, seed=config.seed)
    return Experiment(config, ds, base, records, {"train": train, "val": val, "test": test})


def train_experiment(exp: Experiment, fusion_config: fz.FusionConfig | None = None,
                     train_config: fz.TrainConfig | None = None, with_gate: bool = True) -> Experiment:
    """Stage one on the train split, then (optionally) the gate on the validation split.

    In joint mode the base model is copied, trained together with fusion, and every
    record's base logits and anchor row are recomputed from the updated copy.
    """
    cfg = exp.config
    fusion_config = fusion_config or cfg.fusion
    train_config = train_config or cfg.train
    params = fz.FusionParams.init(fusion_config, seed=cfg.seed)
    # With random-K training the samples carry every stacked neighbor and are cut per epoch.
    train_k = cfg.k_max if train_config.k_min is not None else cfg.k
    samples = [r.sample(train_k) for r in exp.subset("train")]
    base = None
    if train_config.mode == "joint":
        base = copy.deepcopy(exp.base)
    params, trace = fz.train_stage1(samples, params, train_config, base=base)
    if base is not None:
        exp.base = base
        exp.records = [with_base_logits(r, base.forward_tensor(r.base_features).data) for r in exp.records]
    gate = fit_gate(exp.subset("val"), params, cfg.k, seed=cfg.seed) if with_gate else None
    exp.fusion, exp.gate, exp.loss_trace = params, gate, trace
    return exp


def with_base_logits(record: ProteinRecord, z_base) -> ProteinRecord:
    """A copy of ``record`` with new base logits and the anchor row re-decoded from them."""
    a = record.alignment
    tokens = a.tokens.copy()
    tokens[0] = anchor_row(z_base)
    alignment = StackedAlignment(tokens, a.valid, a.tm_scores, a.beta, a.target_ids)
    return ProteinRecord(record.id, np.asarray(z_base, dtype=np.float64), alignment, record.target,
                         record.hits, record.base_features)


def restack(records, pool: dict, k_max: int, beta0: float = 0.1) -> list[ProteinRecord]:
    """Rebuild alignments from the stored hits against a different neighbor-sequence pool."""
    return [ProteinRecord(r.id, r.z_base, build(r.z_base, r.hits, pool, k_max, beta0), r.target,
                          r.hits, r.base_features) for r in records]
