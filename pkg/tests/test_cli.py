import subprocess
import sys

import pytest

from cli_chain import CONFIG, run, run_chain
from refold.cli import Settings, build_parser, main, parse_config
from refold.formats import read_checkpoint, read_fasta, read_logits


def test_parse_config_types_and_comments():
    cfg = parse_config(CONFIG + "no_tm_bias = true\nk_min = none\nquery_mode = mean  # trailing\n")
    assert cfg["d"] == 16 and isinstance(cfg["lr"], float) and cfg["no_tm_bias"] is True
    assert cfg["k_min"] is None and cfg["query_mode"] == "mean"
    s = Settings(3, 1, cfg)
    assert s.fusion_config().d == 16 and s.train_config().seed == 3 and s.general("k") == 3


@pytest.mark.parametrize("text", ["bogus = 1", "d", "no_tm_bias = maybe", "epochs = x"])
def test_parse_config_errors(text):
    with pytest.raises(ValueError):
        parse_config(text)


def test_global_flags_before_or_after_verb():
    p = build_parser()
    a = p.parse_args(["--seed", "4", "synth", "--out", "x"])
    b = p.parse_args(["synth", "--out", "x", "--seed", "4"])
    assert a.seed == b.seed == 4 and a.threads == b.threads == 1


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("chain")
    return root, run_chain(root)


def test_chain_outputs(chain):
    root, files = chain
    for name in ("hits.tsv", "stack.txt", "fusion.ckpt", "gate.ckpt", "design.fasta", "eval/report.csv",
                 "eval/report.txt", "eval/report.grid.txt", "sweep.csv", "ablate.csv", "data/manifest.tsv"):
        assert name in files, name
    designs = read_fasta(root / "design.fasta")
    assert len(designs) == 1
    probs = read_logits(next((root / "design.fasta.probs").glob("*.txt")))
    assert probs.shape == (len(designs[0]), 20)
    assert abs(probs.sum(axis=1) - 1).max() < 1e-9
    _, meta = read_checkpoint(root / "fusion.ckpt")
    assert meta["base"] == "toy" and meta["train.mode"] == "frozen"
    sweep = files["sweep.csv"].decode().splitlines()
    assert sweep[0] == "K,recovery,perplexity" and len(sweep) == 5
    assert [r.split(",")[0] for r in files["ablate.csv"].decode().splitlines()[1:]] == \
        ["full", "no-gate", "no-tm-bias", "base-only"]


def test_rerun_is_bit_identical(chain, tmp_path):
    _, first = chain
    second = run_chain(tmp_path)
    assert first.keys() == second.keys()
    assert [k for k in first if first[k] != second[k]] == []


def test_bench_and_joint(chain, tmp_path):
    root, _ = chain
    g = ["--config", root / "small.cfg"]
    run("bench", "--fusion", root / "fusion.ckpt", "--data", root / "data", "--batch", 4, "--warmup", 1,
        "--out", tmp_path / "bench.txt", *g)
    assert "per-protein latency" in (tmp_path / "bench.txt").read_text()
    run("train-fusion", "--data", root / "data", "--mode", "joint", "--epochs", 1,
        "--ckpt", tmp_path / "joint.ckpt", *g)
    assert read_checkpoint(tmp_path / "joint.ckpt")[1]["train.mode"] == "joint"


def test_joint_with_file_logits_rejected(chain, tmp_path):
    root, _ = chain
    data = root / "data"
    logits = tmp_path / "data"
    (logits / "logits").mkdir(parents=True)
    for name in ("backbones", "sequences.fasta", "pool.fasta", "manifest.tsv"):
        (logits / name).symlink_to(data / name)
    for bb in (data / "backbones").glob("*.bb"):
        (logits / "logits" / f"{bb.stem}.txt").write_text((root / "query_logits.txt").read_text())
    with pytest.raises(SystemExit, match="joint"):
        main(["train-fusion", "--data", str(logits), "--mode", "joint", "--ckpt", str(tmp_path / "x.ckpt"),
              "--config", str(root / "small.cfg")])


def test_user_errors(tmp_path):
    with pytest.raises(SystemExit):
        main(["train-fusion", "--data", str(tmp_path / "missing"), "--ckpt", str(tmp_path / "c")])
    with pytest.raises(SystemExit):
        main(["--threads", "0", "synth", "--out", str(tmp_path / "s")])


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "refold", "--help"], capture_output=True, text=True, check=True)
    for verb in ("synth", "match", "stack", "train-fusion", "train-gate", "infer", "eval", "sweep-k",
                 "ablate", "bench"):
        assert verb in out.stdout
