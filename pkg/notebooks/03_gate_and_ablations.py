# %% [markdown]
# # Gate behaviour and ablations
#
# Swap the neighbor pool for fully re-mutated sequences. Fusion then only adds noise,
# and the gate should send every protein back to the base distribution.

# %%
import warnings

from refold.evaluate import ablate, evaluate_records, format_ablation_csv
from refold.pipeline import (ExperimentConfig, fit_gate, gate_examples, prepare_experiment, restack,
                             train_experiment)
from refold.toybase import synth_family

cfg = ExperimentConfig(seed=7)
exp = train_experiment(prepare_experiment(cfg))

noisy = synth_family(cfg.n, cfg.length, cfg.mutation, cfg.seed, pool_mutation_rate=1.0)
records = restack(exp.records, noisy.pool, cfg.k_max, exp.fusion.beta0)
val = [records[i] for i in exp.splits["val"]]
test = [records[i] for i in exp.splits["test"]]
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    gate = fit_gate(val, exp.fusion, cfg.k, seed=cfg.seed)

gated, _ = evaluate_records(test, exp.fusion, gate, cfg.k)
ungated, _ = evaluate_records(test, exp.fusion, gate, cfg.k, use_gate=False)
print(f"base {gated.base_recovery:.4f}  gated {gated.recovery:.4f}  ungated {ungated.recovery:.4f}")
scores = [gate.score(e.features) for e in gate_examples(test, exp.fusion, cfg.k)]
print(f"tau {gate.tau}; proteins sent to base: {sum(s < gate.tau for s in scores)} of {len(scores)}")

# %% [markdown]
# Ablations on the clean pool. Each mechanism variant is retrained from scratch.

# %%
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    rows = ablate(exp)
print(format_ablation_csv(rows))
