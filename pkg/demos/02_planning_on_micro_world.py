# %% [markdown]
# # POMCP on a 3x3 world
#
# One bright cell sits east of the robot; every other node has already been
# measured at zero. The planner should head east, and how far it commits
# depends on the t-test threshold.

# %%
import numpy as np

from rlpomcp import GpModel, KernelHyper, SolverParams, WorldField, plan
from rlpomcp.objective import ImprovementState, Objective, ObjectiveKind
from rlpomcp.pomcp import IppSimulator, PosteriorTable, SenseLattice
from rlpomcp.world import RobotPose

vals = np.zeros((3, 3, 1))
vals[2, 1, 0] = 1.0
world = WorldField(vals)
lattice = SenseLattice(world)
seen = [(np.array([x, y, 0.0]), vals[x, y, 0]) for x in range(3) for y in range(3) if (x, y) != (1, 1)]
model = GpModel.for_bounds(KernelHyper(lengthscale=0.8), world.lo, world.hi).condition(seen)
sim = IppSimulator(PosteriorTable(model, lattice), ObjectiveKind(Objective.EXPECTED_IMPROVEMENT))
root = sim.root_belief(RobotPose((1, 1, 0)), ImprovementState(0.0))

# %%
res = plan(sim, root, SolverParams(300, 0.9, 0.05, 5), np.random.default_rng(0))
for action, (mean, visits) in res.root_values.items():
    print(f"{action.name:8s} mean return {mean:.3f}  visits {visits}")
print("chain:", [a.name for a in res.actions], " generator calls:", res.generator_calls)

# %%
# Here every neighbour is well understood, so the chain stops after one step.
# On a fresh synthetic world the tree is more decisive deep down, and a
# looser t-test threshold lets more of its preferred path through.
from rlpomcp.agent import TrainConfig

env = TrainConfig(dims=(8, 8, 3), samples_per_edge=3).make_env(world_seed=4, env_seed=5, objective="ei")
big = IppSimulator(env.table, env.kind)
start = big.root_belief(env.pose, env.state)
for t in (0.001, 0.05, 0.4):
    chains = [len(plan(big, start, SolverParams(300, 0.9, t, 8), np.random.default_rng(s)).actions) for s in range(20)]
    print(f"ttest {t:<6} mean chain length {np.mean(chains):.2f}")
