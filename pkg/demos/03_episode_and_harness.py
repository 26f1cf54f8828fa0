# %% [markdown]
# # Full episodes and a tiny comparison
#
# Run naive fixed parameters against random parameters on a few small
# worlds, then write the usual CSVs and plots. Swap in a trained
# checkpoint with ``PolicySpec.parse("learned_metadata", path)``.

# %%
import sys
import tempfile
from pathlib import Path

from rlpomcp.agent import TrainConfig
from rlpomcp.harness import ExperimentMatrix, PolicySpec, emit_outputs, run_experiment

env_spec = TrainConfig(steps_per_worker=15, dims=(8, 8, 4), samples_per_edge=3)
matrix = ExperimentMatrix(
    worlds=("synthetic",),
    objectives=("ei", "entropy"),
    policies=(PolicySpec.parse("naive"), PolicySpec.parse("random")),
    n_seeds=4,
)
result = run_experiment(matrix, env_spec, master_seed=1)

# %%
for a in result.aggregates:
    print(f"{a['objective']:8s} {a['policy']:7s} mean {a['mean']:.3f}  std {a['std']:.3f}")
for t in result.sign_tests:
    print(f"{t['objective']}: {t['policy']} vs {t['baseline']}  {t['wins']}-{t['losses']}  p={t['p_value']:.3f}")

# %%
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="rlpomcp-demo-"))
report = emit_outputs(result.logs, result, out)
print(f"wrote {len(report.files)} files under {out}")
