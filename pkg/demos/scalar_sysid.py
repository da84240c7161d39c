"""Identify theta in x+ = theta x + u online, then refine with offline replays.

Inputs are one-signed so dx_t/dtheta stays away from zero; near-zero sensitivity with R at its
sigma^2 floor gives the largest EKF gain and can throw the estimate far off.
"""

import argparse

import numpy as np

from ocil.estimator import EstimatorState, NoiseModel, ResidualSpec
from ocil.models import AffineParamDynamics
from ocil.modes import SysIdMode, cumulative_loss, make_episodes, run_offline_phase, run_online_phase
from ocil.ocp import rollout_open_loop


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--theta", type=float, default=0.9)
    ap.add_argument("--sigma", type=float, default=0.01)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    dyn = AffineParamDynamics([[0.0]], [[1.0]], A_theta=[[[1.0]]])
    trajs = [rollout_open_loop(dyn, [1.0], rng.uniform(0, 1, (10, 1)), [args.theta]) for _ in range(3)]
    mode = SysIdMode(dyn, make_episodes(trajs, ResidualSpec(1, 1), args.sigma, rng, True), np.array([args.theta]))
    noise = NoiseModel(args.sigma)
    state = EstimatorState.initial([0.5], 10.0)
    print(f"start   theta {state.theta[0]:.6f}  loss {cumulative_loss(mode, state.theta):.3e}")
    state, _ = run_online_phase(mode, state, noise)
    print(f"online  theta {state.theta[0]:.6f}  loss {cumulative_loss(mode, state.theta):.3e}")
    state, _ = run_offline_phase(mode, state, args.epochs, noise)
    print(f"offline theta {state.theta[0]:.6f}  loss {cumulative_loss(mode, state.theta):.3e}")


if __name__ == "__main__":
    main()
