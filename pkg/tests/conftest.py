import numpy as np
import pytest

from rlpomcp.gp import GpModel, KernelHyper
from rlpomcp.objective import ImprovementState, Objective, ObjectiveKind
from rlpomcp.pomcp import IppSimulator, PosteriorTable, SenseLattice
from rlpomcp.world import RobotPose, WorldField


def build_micro_world():
    """3x3 planar world, robot in the centre, a single bright node to its right.

    All other nodes are observed at zero, so the RIGHT edge is the only one
    with expected improvement over the incumbent of 0.
    """
    vals = np.zeros((3, 3, 1))
    vals[2, 1, 0] = 1.0
    fld = WorldField(vals)
    lat = SenseLattice(fld)
    hyp = KernelHyper(lengthscale=0.8)
    seeds = [(np.array([x, y, 0.0]), float(vals[x, y, 0]))
             for x in range(3) for y in range(3) if (x, y) != (1, 1)]
    model = GpModel.for_bounds(hyp, fld.lo, fld.hi).condition(seeds)
    sim = IppSimulator(PosteriorTable(model, lat), ObjectiveKind(Objective.EXPECTED_IMPROVEMENT))
    return sim, sim.root_belief(RobotPose((1, 1, 0)), ImprovementState(0.0))


@pytest.fixture
def micro_world():
    return build_micro_world()


def run_bandit(seed, n_updates=200, batch_size=64):
    """One-step bandit: reward -|decoded rollouts - 200| / 300; returns the decoded deterministic rollouts."""
    from rlpomcp.agent import ActorCritic, Batch, PpoTrainer, Transition, decode_params, gae_advantages

    rng = np.random.default_rng(seed)
    ac = ActorCritic(7, np.random.default_rng(seed + 1000))
    trainer = PpoTrainer(ac)
    feats = np.ones(7)
    for _ in range(n_updates):
        trs = []
        for _ in range(batch_size):
            a, u, logp, v = ac.act(feats, rng)
            r = -abs(decode_params(a).num_rollouts - 200) / 300
            trs.append(Transition(feats, a, u, logp, r, v, True))
        adv, ret = gae_advantages(trs)
        trainer.update(Batch.from_transitions(trs, adv, ret), rng)
    return decode_params(ac.mean_action(feats)).num_rollouts
