# %% [markdown]
# # A GP over a synthetic field, and what the three objectives reward
#
# Build a small blob field, drop a handful of noiseless measurements into a
# GP, and look at how entropy, EI and PI score the same candidate points.

# %%
import numpy as np

from rlpomcp import GpModel, KernelHyper, Objective, ObjectiveKind, make_synthetic_field
from rlpomcp.objective import ImprovementState, score_many
from rlpomcp.world import value_at

field = make_synthetic_field(seed=3, dims=(12, 12, 4))
print("field shape", field.dims, "value range", field.values.min().round(3), field.values.max().round(3))

# %%
rng = np.random.default_rng(0)
hyper = KernelHyper.for_extent(field.longest_axis)
X = np.array([field.random_point(rng) for _ in range(15)])
y = np.array([value_at(field, x) for x in X])
model = GpModel.for_bounds(hyper, field.lo, field.hi).condition(list(zip(X, y)))
print("lengthscale", round(hyper.lengthscale, 3), "samples", len(model))

# %%
# Query a line through the box and compare the posterior with ground truth.
line = np.linspace(field.lo, field.hi, 9)
mean, var = model.predict_many(line)
truth = [value_at(field, x) for x in line]
for x, m, v, t in zip(line, mean, var, truth):
    print(f"x={np.round(x, 1)}  mean={m:+.3f}  sd={np.sqrt(v):.3f}  truth={t:+.3f}")

# %%
# Same points, three objectives. EI and PI chase values above the incumbent;
# entropy only cares about the spread.
state = ImprovementState().update(model.predict_many(X)[0])
for tag in Objective:
    s = score_many(ObjectiveKind(tag), mean, var, state.best_mean)
    print(f"{tag.value:8s}", np.round(s, 3))
