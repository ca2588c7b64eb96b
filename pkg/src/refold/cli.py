"""``refold`` command-line interface.

A data directory (as written by ``refold synth``) holds::

    backbones/<id>.bb     one backbone per structure (also the search database)
    sequences.fasta       native sequences (training / evaluation targets)
    pool.fasta            neighbor sequences used to fill stacked alignments
    manifest.tsv          id, family, split (train / val / test)
    logits/<id>.txt       optional externally computed base logits

Every output is a pure function of the inputs, ``--seed`` and ``--config``; with
``--threads 1`` reruns produce byte-identical files. ``bench`` reports timings and is
the only verb whose output varies between runs.
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import sys
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import fusion as fz
from .data import Sequence, argmax_rows, decode_sequence
from .evaluate import (ABLATIONS, ablate, bench, evaluate_records, format_ablation_csv, format_sweep_csv,
                       format_transition_grid, sweep_k)
from .formats import (format_hits, read_backbone, read_checkpoint, read_fasta, read_hits,
                      read_logits, write_backbone, write_checkpoint, write_fasta, write_logits)
from .gate import GateModel
from .matcher import StructureDatabase, search
from .pipeline import Experiment, ExperimentConfig, fit_gate, prepare_record, refine, split_by_family, train_experiment
from .stacker import build, format_stack
from .toybase import ToyBase, synth_family

log = logging.getLogger("refold")

# -- configuration ------------------------------------------------------------------------

# Keys accepted by --config that are not FusionConfig / TrainConfig fields.
GENERAL_DEFAULTS = {"k": 10, "k_max": 20, "base_epochs": 60}
TRAIN_DEFAULTS = {"epochs": 40, "lr": 2e-3, "warmup_steps": 40, "k_min": 1}


def _cast(raw: str, like):
    if raw.lower() == "none":
        return None
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def parse_config(text: str) -> dict:
    """``key=value`` lines; ``#`` starts a comment. Keys are validated, values typed."""
    known = {f.name: f.default for f in fields(fz.FusionConfig)}
    known.update({f.name: f.default for f in fields(fz.TrainConfig)})
    known.update(TRAIN_DEFAULTS)
    known.update(GENERAL_DEFAULTS)
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ValueError(f"config line {lineno}: expected key=value")
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            out[key] = _cast(value, known[key])
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {key}: {exc}") from None
    return out


@dataclass
class Settings:
    seed: int
    threads: int
    values: dict

    def general(self, key):
        return self.values.get(key, GENERAL_DEFAULTS[key])

    def fusion_config(self, **overrides) -> fz.FusionConfig:
        names = {f.name for f in fields(fz.FusionConfig)}
        kw = {k: v for k, v in self.values.items() if k in names}
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return fz.FusionConfig(**kw)

    def train_config(self, **overrides) -> fz.TrainConfig:
        names = {f.name for f in fields(fz.TrainConfig)}
        kw = dict(TRAIN_DEFAULTS, seed=self.seed)
        kw.update({k: v for k, v in self.values.items() if k in names})
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return fz.TrainConfig(**kw)


# -- data directories -----------------------------------------------------------------------

@dataclass
class DataDir:
    root: Path
    backbones: list
    natives: dict
    pool: dict
    manifest: dict  # id -> (family, split)
    logits: dict

    def ids(self, split: str | None = None) -> list:
        names = [b.id for b in self.backbones]
        if split is None or split == "all":
            return names
        if not self.manifest:
            log.info("no manifest in %s; using every structure for split %r", self.root, split)
            return names
        chosen = [n for n in names if self.manifest.get(n, ("", ""))[1] == split]
        if not chosen:
            raise SystemExit(f"error: split {split!r} is empty in {self.root}")
        return chosen

    def backbone(self, name: str):
        return self._by_id[name]

    def __post_init__(self):
        self._by_id = {b.id: b for b in self.backbones}


def _backbone_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    sub = path / "backbones"
    folder = sub if sub.is_dir() else path
    files = sorted(folder.glob("*.bb")) + sorted(folder.glob("*.pdb"))
    if not files:
        raise SystemExit(f"error: no backbone files (*.bb, *.pdb) under {path}")
    return files


def read_backbones(path) -> list:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = [read_backbone(f) for f in _backbone_files(Path(path))]
    for w in caught:
        log.info("%s", w.message)
    if caught:
        log.warning("%d backbone warning(s) while reading %s (use -v for details)", len(caught), path)
    return out


def load_data_dir(path) -> DataDir:
    root = Path(path)
    if not root.is_dir():
        raise SystemExit(f"error: {root} is not a directory")
    backbones = read_backbones(root)
    manifest = {}
    mpath = root / "manifest.tsv"
    if mpath.exists():
        with mpath.open(newline="") as fh:
            for row in csv.DictReader(fh, delimiter="\t"):
                manifest[row["id"]] = (row.get("family", ""), row.get("split", ""))
        order = {name: i for i, name in enumerate(manifest)}
        backbones.sort(key=lambda b: order.get(b.id, len(order)))
    natives = {s.id: s for s in read_fasta(root / "sequences.fasta")} if (root / "sequences.fasta").exists() else {}
    pool_path = root / "pool.fasta"
    pool = {s.id: s for s in read_fasta(pool_path)} if pool_path.exists() else dict(natives)
    logits = {}
    if (root / "logits").is_dir():
        logits = {f.stem: read_logits(f) for f in sorted((root / "logits").glob("*.txt"))}
    return DataDir(root, backbones, natives, pool, manifest, logits)


class FileBase:
    """Base predictor backed by precomputed logit files."""

    def __init__(self, logits: dict):
        self.table = logits

    def logits(self, b) -> np.ndarray:
        try:
            z = self.table[b.id]
        except KeyError:
            raise SystemExit(f"error: no base logits for {b.id!r}") from None
        if len(z) != len(b):
            raise SystemExit(f"error: logits for {b.id!r} have {len(z)} rows, backbone has {len(b)} residues")
        return z


# -- checkpoints ---------------------------------------------------------------------------

def save_fusion(path, params: fz.FusionParams, base, extra: dict):
    arrays = params.to_arrays()
    meta = params.meta()
    if isinstance(base, ToyBase):
        arrays.update(base.to_arrays())
        meta["base"] = "toy"
    else:
        meta["base"] = "file"
    meta.update(extra)
    write_checkpoint(path, arrays, meta)


def load_fusion(path, data: DataDir | None = None):
    arrays, meta = read_checkpoint(path)
    params = fz.FusionParams.from_arrays(arrays, meta)
    if meta.get("base") == "toy":
        base = ToyBase.from_arrays(arrays)
    else:
        base = FileBase(data.logits if data is not None else {})
    return params, base, meta


def load_gate(path) -> tuple[GateModel, dict]:
    arrays, meta = read_checkpoint(path)
    return GateModel.from_arrays(arrays), meta


def _records(data: DataDir, names, base, k_max: int, beta0: float, threads: int, features: bool = False):
    db = StructureDatabase(data.backbones)
    out = []
    for name in names:
        b = data.backbone(name)
        target = data.natives.get(name)
        if target is None:
            raise SystemExit(f"error: no native sequence for {name!r} in {data.root}")
        out.append(prepare_record(b, base.logits(b), db, data.pool, k_max, beta0, target,
                                  threads=threads, with_features=features))
    return out


def _resolve_base(args, settings: Settings, data: DataDir, train_ids):
    if args.base:
        arrays, _ = read_checkpoint(args.base)
        return ToyBase.from_arrays(arrays)
    if data.logits:
        return FileBase(data.logits)
    log.info("training the toy base on %d structures", len(train_ids))
    base = ToyBase.init(seed=settings.seed)
    base.train([(data.backbone(n), data.natives[n]) for n in train_ids],
               epochs=settings.general("base_epochs"), seed=settings.seed)
    return base


# -- verbs ---------------------------------------------------------------------------------

def cmd_synth(args, settings: Settings):
    ds = synth_family(args.n, args.len, args.mut, settings.seed, prototypes=args.prototypes,
                      pool_mutation_rate=args.pool_mut)
    out = Path(args.out)
    (out / "backbones").mkdir(parents=True, exist_ok=True)
    for b in ds.backbones:
        write_backbone(b, out / "backbones" / f"{b.id}.bb")
    write_fasta(ds.sequences, out / "sequences.fasta")
    write_fasta([ds.pool[i] for i in ds.ids], out / "pool.fasta")
    split_names = ("train", "val", "test")
    split_of = {}
    for name, idx in zip(split_names, split_by_family(ds.families, seed=settings.seed)):
        split_of.update({int(i): name for i in idx})
    lines = ["id\tfamily\tsplit"]
    lines.extend(f"{name}\t{int(f)}\t{split_of[i]}" for i, (name, f) in enumerate(zip(ds.ids, ds.families)))
    (out / "manifest.tsv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(ds)} structures to {out}")


def cmd_match(args, settings: Settings):
    queries = read_backbones(args.query)
    db = StructureDatabase(read_backbones(args.db))
    text = "".join(format_hits(search(q, db, args.k, threads=settings.threads), q.id) for q in queries)
    Path(args.out).write_text(text)
    print(f"wrote hits for {len(queries)} queries to {args.out}")


def cmd_stack(args, settings: Settings):
    z = read_logits(args.logits)
    grouped = read_hits(args.hits)
    if args.query_id is not None:
        qid = args.query_id
    elif len(grouped) <= 1:
        qid = next(iter(grouped), Path(args.logits).stem)
    else:
        raise SystemExit("error: hits file holds several queries; pass --query-id")
    hits = grouped.get(qid, [])
    seqs = {s.id: s for s in read_fasta(args.seqs)}
    for h in hits:
        if h.target_id in seqs:
            h.check_bounds(len(z), len(seqs[h.target_id]))
    alignment = build(z, hits, seqs, args.k, args.beta0)
    Path(args.out).write_text(format_stack(alignment, qid))
    print(f"stacked {alignment.num_neighbors} neighbors for {qid}")


def cmd_train_fusion(args, settings: Settings):
    data = load_data_dir(args.data)
    train_ids = data.ids("train")
    base = _resolve_base(args, settings, data, train_ids)
    tcfg = settings.train_config(mode=args.mode, epochs=args.epochs)
    if tcfg.mode == "joint" and not isinstance(base, ToyBase):
        raise SystemExit("error: joint mode needs the toy base; file-based logits force frozen mode")
    fcfg = settings.fusion_config(no_tm_bias=args.no_tm_bias or None, row_only=args.row_only or None,
                                  priors_only=args.priors_only or None, query_mode=args.query_mode)
    k = settings.general("k")
    train_k = settings.general("k_max") if tcfg.k_min is not None else k
    records = _records(data, train_ids, base, train_k, fcfg.beta0_init, settings.threads,
                       features=tcfg.mode == "joint")
    params = fz.FusionParams.init(fcfg, seed=settings.seed)
    trainable_base = copy.deepcopy(base) if tcfg.mode == "joint" else None
    params, trace = fz.train_stage1([r.sample(train_k) for r in records], params, tcfg, base=trainable_base)
    if trainable_base is not None:
        base = trainable_base
    save_fusion(args.ckpt, params, base, {"train.mode": tcfg.mode, "train.seed": settings.seed,
                                          "train.epochs": tcfg.epochs, "k": k,
                                          "train.final_loss": repr(trace[-1]) if trace else "nan"})
    print(f"trained fusion on {len(records)} structures; final loss {trace[-1]:.4f}" if trace else
          "trained fusion for 0 epochs")


def _k_from(meta: dict, settings: Settings) -> int:
    return int(settings.values.get("k", meta.get("k", GENERAL_DEFAULTS["k"])))


def cmd_train_gate(args, settings: Settings):
    data = load_data_dir(args.val)
    params, base, meta = load_fusion(args.fusion, data)
    k = _k_from(meta, settings)
    records = _records(data, data.ids("val"), base, k, params.beta0, settings.threads)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        gate = fit_gate(records, params, k, seed=settings.seed)
    for w in caught:
        log.warning("%s", w.message)
    write_checkpoint(args.out, gate.to_arrays(), {"k": k, "gate.records": len(records)})
    print(f"gate fitted on {len(records)} structures; tau={gate.tau}")


def cmd_infer(args, settings: Settings):
    db_dir = Path(args.db)
    db_data = load_data_dir(db_dir) if db_dir.is_dir() else None
    queries = read_backbones(args.query)
    params, base, meta = load_fusion(args.fusion, db_data)
    if args.logits:
        lp = Path(args.logits)
        table = ({f.stem: read_logits(f) for f in sorted(lp.glob("*.txt"))} if lp.is_dir()
                 else {queries[0].id: read_logits(lp)})
        base = FileBase(table)
    gate = load_gate(args.gate)[0] if args.gate else None
    k = _k_from(meta, settings)
    db = StructureDatabase(db_data.backbones if db_data else read_backbones(db_dir))
    pool = db_data.pool if db_data else {}
    out = Path(args.out)
    prob_dir = out.with_name(out.name + ".probs")
    prob_dir.mkdir(parents=True, exist_ok=True)
    designs = []
    for q in queries:
        rec = prepare_record(q, base.logits(q), db, pool, k, params.beta0, threads=settings.threads)
        res = refine(rec.z_base, rec.alignment, params, gate)
        designs.append(Sequence(q.id, decode_sequence(argmax_rows(res.p_out))))
        write_logits(res.p_out, prob_dir / f"{q.id}.txt")
    write_fasta(designs, out)
    print(f"designed {len(designs)} sequences -> {out} (probabilities in {prob_dir})")


def _eval_setup(args, settings: Settings, k_max: int | None = None):
    data = load_data_dir(args.data)
    params, base, meta = load_fusion(args.fusion, data)
    gate = load_gate(args.gate)[0] if getattr(args, "gate", None) else None
    k = _k_from(meta, settings)
    records = _records(data, data.ids(args.split), base, k_max or k, params.beta0, settings.threads)
    return data, base, params, gate, k, records


def cmd_eval(args, settings: Settings):
    _, _, params, gate, k, records = _eval_setup(args, settings)
    use_gate = gate is not None
    report, maps = evaluate_records(records, params, gate, k, use_gate=use_gate,
                                    config={"k": k, "split": args.split, "gate": "on" if use_gate else "off",
                                            **{f"fusion.{f.name}": getattr(params.config, f.name)
                                               for f in fields(params.config)}})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".csv").write_text(report.to_csv())
    out.with_suffix(".txt").write_text(report.summary())
    sampled = dict(list(maps.items())[:args.grid_proteins])
    out.with_suffix(".grid.txt").write_text(format_transition_grid(sampled))
    sys.stdout.write(report.summary())


def cmd_sweep_k(args, settings: Settings):
    k_values = [int(v) for v in args.k_values.split(",") if v.strip()]
    if not k_values:
        raise SystemExit("error: --k-values is empty")
    k_max = max(max(k_values), 1)
    data, base, params, gate, _, records = _eval_setup(args, settings, k_max=k_max)
    val = None
    if gate is None:
        # no fixed gate given: refit one on the validation split at every K
        val = _records(data, data.ids("val"), base, k_max, params.beta0, settings.threads)
    text = format_sweep_csv(sweep_k(records, params, gate, k_values, val_records=val, seed=settings.seed))
    Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_ablate(args, settings: Settings):
    data = load_data_dir(args.data)
    splits = {name: data.ids(name) for name in ("train", "val", args.split)}
    base = _resolve_base(args, settings, data, splits["train"])
    k = settings.general("k")
    k_max = settings.general("k_max")
    cfg = ExperimentConfig(seed=settings.seed, k=k, k_max=k_max, threads=settings.threads,
                           fusion=settings.fusion_config(), train=settings.train_config(epochs=args.epochs))
    names = list(dict.fromkeys(splits["train"] + splits["val"] + splits[args.split]))
    records = _records(data, names, base, k_max, cfg.fusion.beta0_init, settings.threads, features=True)
    index = {n: i for i, n in enumerate(names)}
    exp = Experiment(cfg, None, base, records, {s: [index[n] for n in ids] for s, ids in splits.items()})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        train_experiment(exp)
        configs = [c for c in args.configs.split(",") if c] if args.configs else list(ABLATIONS)
        unknown = set(configs) - set(ABLATIONS)
        if unknown:
            raise SystemExit(f"error: unknown ablation(s) {sorted(unknown)}; choose from {ABLATIONS}")
        rows = ablate(exp, configs, split=args.split)
    text = format_ablation_csv(rows)
    Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_bench(args, settings: Settings):
    data = load_data_dir(args.data)
    params, base, meta = load_fusion(args.fusion, data)
    gate = load_gate(args.gate)[0] if args.gate else None
    k = _k_from(meta, settings)
    db = StructureDatabase(data.backbones)
    report = bench(data.backbones, base, db, data.pool, params, gate, k, batch=args.batch,
                   warmup_batches=args.warmup, threads=settings.threads)
    text = report.summary()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


# -- argument parsing -----------------------------------------------------------------------

def _common(parser: argparse.ArgumentParser, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    parser.add_argument("--threads", type=int, default=d(1), help="worker threads (default 1)")
    parser.add_argument("--config", default=d(None), metavar="FILE", help="key=value configuration file")
    parser.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refold", description="Retrieval-augmented refinement of "
                                     "inverse-folding predictions.")
    _common(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _common(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    def verb(name, func, help):
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=func)
        return p

    p = verb("synth", cmd_synth, "generate a synthetic family dataset")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--len", type=int, default=60)
    p.add_argument("--mut", type=float, default=0.15)
    p.add_argument("--pool-mut", type=float, default=None, help="re-mutate neighbor sequences at this rate")
    p.add_argument("--prototypes", type=int, default=4)
    p.add_argument("--out", required=True)

    p = verb("match", cmd_match, "structural search of queries against a backbone database")
    p.add_argument("--query", required=True, help="backbone file or directory")
    p.add_argument("--db", required=True, help="directory of backbones")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True)

    p = verb("stack", cmd_stack, "build the stacked neighbor alignment for one query")
    p.add_argument("--logits", required=True)
    p.add_argument("--hits", required=True)
    p.add_argument("--seqs", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--beta0", type=float, default=0.1)
    p.add_argument("--query-id", default=None)
    p.add_argument("--out", required=True)

    p = verb("train-fusion", cmd_train_fusion, "stage one: train the fusion module")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("frozen", "joint"), default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--base", default=None, help="checkpoint holding a trained toy base")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--no-tm-bias", action="store_true")
    p.add_argument("--row-only", action="store_true")
    p.add_argument("--priors-only", action="store_true")
    p.add_argument("--query-mode", choices=("anchor", "mean"), default=None)

    p = verb("train-gate", cmd_train_gate, "stage two: fit the utility gate on held-out data")
    p.add_argument("--fusion", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)

    p = verb("infer", cmd_infer, "design sequences for query backbones")
    p.add_argument("--fusion", required=True)
    p.add_argument("--gate", default=None)
    p.add_argument("--query", required=True, help="backbone file or directory")
    p.add_argument("--db", required=True, help="data directory (or directory of backbones)")
    p.add_argument("--logits", default=None, help="base logits file or directory (overrides the checkpoint base)")
    p.add_argument("--out", required=True, help="output FASTA; probabilities go to <out>.probs/")

    def eval_args(p):
        p.add_argument("--fusion", required=True)
        p.add_argument("--gate", default=None)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="test")

    p = verb("eval", cmd_eval, "recovery, perplexity, entropy regimes and transitions")
    eval_args(p)
    p.add_argument("--grid-proteins", type=int, default=8)
    p.add_argument("--out", required=True, help="output prefix (.csv, .txt, .grid.txt)")

    p = verb("sweep-k", cmd_sweep_k, "recovery as a function of the neighbor count")
    eval_args(p)
    p.add_argument("--k-values", default="1,2,5,10,20")
    p.add_argument("--out", required=True)

    p = verb("ablate", cmd_ablate, "train and evaluate every ablation configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--base", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--configs", default=None, help=f"comma list from {','.join(ABLATIONS)}")
    p.add_argument("--out", required=True)

    p = verb("bench", cmd_bench, "per-protein latency by phase")
    p.add_argument("--fusion", required=True)
    p.add_argument("--gate", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--warmup", type=int, default=3, help="untimed warm-up batches")
    p.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        raise SystemExit("error: --threads must be >= 1")
    values = parse_config(Path(args.config).read_text()) if args.config else {}
    settings = Settings(args.seed, args.threads, values)
    with threadpool_limits(limits=args.threads):
        args.func(args, settings)
    return 0


if __name__ == "__main__":
    sys.exit(main())
