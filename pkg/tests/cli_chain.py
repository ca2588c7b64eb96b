"""Runs every deterministic CLI verb on a small synthetic set; shared by the CLI and acceptance tests."""

from pathlib import Path

from refold.cli import main
from refold.formats import read_backbone, write_logits
from refold.toybase import ToyBase

CONFIG = """\
# small model so the chain runs in seconds
d = 16
heads = 2
d_ff = 32
epochs = 3
warmup_steps = 4
lr = 0.005
k = 3
k_max = 6
base_epochs = 5
"""


def run(*argv):
    assert main([str(a) for a in argv]) == 0


def run_chain(root: Path, seed: int = 5) -> dict:
    """Returns {relative path: bytes} for every file the verbs wrote."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "small.cfg"
    cfg.write_text(CONFIG)
    g = ["--seed", seed, "--threads", 1, "--config", cfg]
    data = root / "data"
    run("synth", "--n", 16, "--len", 24, "--mut", 0.15, "--out", data, *g)
    query = sorted((data / "backbones").glob("*.bb"))[0]
    run("match", "--query", query, "--db", data, "--k", 4, "--out", root / "hits.tsv", *g)
    write_logits(ToyBase.init(seed=1).logits(read_backbone(query)), root / "query_logits.txt")
    run("stack", "--logits", root / "query_logits.txt", "--hits", root / "hits.tsv",
        "--seqs", data / "pool.fasta", "--k", 4, "--out", root / "stack.txt", *g)
    run("train-fusion", "--data", data, "--ckpt", root / "fusion.ckpt", *g)
    run("train-gate", "--fusion", root / "fusion.ckpt", "--val", data, "--out", root / "gate.ckpt", *g)
    run("infer", "--fusion", root / "fusion.ckpt", "--gate", root / "gate.ckpt", "--query", query,
        "--db", data, "--out", root / "design.fasta", *g)
    run("eval", "--fusion", root / "fusion.ckpt", "--gate", root / "gate.ckpt", "--data", data,
        "--out", root / "eval" / "report", *g)
    run("sweep-k", "--fusion", root / "fusion.ckpt", "--data", data, "--k-values", "0,1,3,6",
        "--out", root / "sweep.csv", *g)
    run("ablate", "--data", data, "--epochs", 1, "--configs", "full,no-gate,no-tm-bias,base-only",
        "--out", root / "ablate.csv", *g)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
