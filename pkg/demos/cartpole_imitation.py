"""Recover cartpole dynamics and the goal weight from noisy optimal demonstrations."""

import argparse

import numpy as np

from ocil.estimator import EstimatorState, NoiseModel, ResidualSpec
from ocil.models import make_environment
from ocil.modes import (ImitationMode, cumulative_loss, generate_expert_demos, make_episodes, run_offline_phase,
                        run_online_phase)
from ocil.ocp import WeightedGoalCost


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sigma", type=float, default=0.1)
    ap.add_argument("--demos", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    env = make_environment("cartpole", dt=0.1)
    cost = WeightedGoalCost(env.goal, 1, "scalar")
    theta_star = np.r_[env.theta_star, 1.0]
    demos = generate_expert_demos(env.dynamics, cost, theta_star, args.demos, rng, (10, 20))
    mode = ImitationMode(env.dynamics, cost, make_episodes(demos, ResidualSpec(4, 1), args.sigma, rng), theta_star)
    noise = NoiseModel(args.sigma)
    cache: dict = {}
    state = EstimatorState.initial(theta_star * rng.uniform(0.7, 1.3, 4), 10.0)
    l0 = cumulative_loss(mode, state.theta, cache=dict(cache))
    state, _ = run_online_phase(mode, state, noise, cache=cache)
    l1 = cumulative_loss(mode, state.theta, cache=dict(cache))
    state, _ = run_offline_phase(mode, state, args.epochs, noise, cache=cache)
    l2 = cumulative_loss(mode, state.theta, cache=dict(cache))
    np.set_printoptions(precision=4, suppress=True)
    print(f"theta*        {theta_star}")
    print(f"theta final   {state.theta}")
    print(f"loss initial {l0:.3e}  after online {l1:.3e}  after offline {l2:.3e}")


if __name__ == "__main__":
    main()
