"""Train DDQN+MLP and GRPO+MLP on the drift-plus-sine market and compare with the oracle policy."""

import argparse
import time

import numpy as np

from newsrl.sanity import run_sanity, sanity_dataset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--algos", nargs="+", default=["ddqn", "grpo"], choices=["ddqn", "grpo"])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--episodes", type=int, default=200)
    args = ap.parse_args()
    ds = sanity_dataset()
    for algo in args.algos:
        ratios = []
        for seed in range(args.seeds):
            t0 = time.perf_counter()
            r = run_sanity(algo, seed, ds, args.episodes)
            ratios.append(r.ratio)
            print(f"{algo} seed {seed}: {r.agent_return:.2f} of {r.oracle_return:.2f} USDT "
                  f"({100 * r.ratio:.1f}%) in {time.perf_counter() - t0:.1f}s")
        print(f"{algo} mean: {100 * np.mean(ratios):.1f}% of oracle")


if __name__ == "__main__":
    main()
