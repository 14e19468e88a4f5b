"""Block densities of the lattice process approach the coarse-kernel equations as gamma shrinks.

Runs the contact model (k=1, lambda*=2) from a bump profile on lattices of
64, 256 and 1024 sites, averages the block densities over replicas and
compares them with the deterministic block system solved by rk4.

    python demos/01_hydrodynamic_limit.py [--replicas 200] [--threads 4]
"""
import argparse
import os

import numpy as np

from kac_contact.config import load_config
from kac_contact.studies import run_gamma_ladder, simulate_blocks, xi_system

CONFIG = os.path.join(os.path.dirname(__file__), "..", "configs", "gamma_ladder.json")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--replicas", type=int, default=200)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    cfg = load_config(CONFIG).with_overrides(replicas=args.replicas)

    print(f"contact model k={cfg.k}, lambda*={cfg.lambda_star}, blocks of side {cfg.xi}, T={cfg.T}")
    rep = run_gamma_ladder(cfg, threads=args.threads)
    print(f"{'gamma':>10} {'per block':>9} {'sup error':>10} {'max se':>8}")
    for r in rep.rows:
        print(f"{r['gamma']:10.6f} {r['N']:9d} {r['sup_error']:10.4f} {r['max_se']:8.4f}")
    print(rep.verdict["line"])

    # the finest rung, block by block, at the final time
    n1 = cfg.ladder_values()[-1]
    times = np.array([0.0, cfg.T])
    v, _, lat, part = simulate_blocks(cfg, n1, rung=len(cfg.ladder_values()) - 1, threads=args.threads, times=times)
    phi = xi_system(cfg, cfg.n3, times)
    print(f"\nlevel-{cfg.k} density per block at t={cfg.T}, gamma=2^-{n1}")
    print(f"{'block':>5} {'lattice mean':>13} {'equations':>10}")
    for C in range(part.block_count):
        print(f"{C:5d} {v[:, -1, cfg.k, C].mean():13.4f} {phi[-1][C, cfg.k]:10.4f}")


if __name__ == "__main__":
    main()
