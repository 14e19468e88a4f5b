"""Model variants: extra recovery, excitatory/inhibitory populations and the general finite-state model.

Each variant is run on the lattice and its block densities are compared
with the matching deterministic equations. The excitatory/inhibitory
system has no lattice counterpart here, so only its equations are shown.

    python demos/04_extensions.py
"""
import os

import numpy as np

from kac_contact.config import load_config
from kac_contact.kernels import smooth_bump_kernel
from kac_contact.macro import MacroGrid, grid_kernel, integrate_rhs, rhs_excitatory_inhibitory
from kac_contact.studies import single_run

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


def main():
    for name in ("recovery", "general"):
        cfg = load_config(os.path.join(CONFIGS, f"{name}.json"))
        rep = single_run(cfg)
        print(f"{name}: {cfg.replicas} replicas on {2 ** cfg.n1} sites")
        for r in rep.rows[:: max(1, len(rep.rows) // 4)]:
            print(f"  t={r['t']:.3f}  sup error {r['sup_error']:.4f}  (se {r['se_at_sup']:.4f})")
        print(f"  {rep.verdict['line']}")

    grid = MacroGrid(1, 1.0, 64)
    K = grid_kernel(smooth_bump_kernel(0.25, 1), grid)
    x = grid.positions()[:, 0]
    top = 0.1 + 0.5 * np.exp(-50 * (x - 0.5) ** 2)
    rho = np.stack([(1 - top) / 2, (1 - top) / 2, top], axis=1)
    n = grid.nodes
    print("\nexcitatory/inhibitory populations, k=2: mean level-k density")
    for lam2 in (0.0, 2.0, 6.0):
        def f(y, lam2=lam2):
            return np.concatenate(rhs_excitatory_inhibitory(y[:n], y[n:], K, K, 3.0, lam2))

        traj = integrate_rhs(f, np.concatenate([rho, rho]), 4.0, 0.01, times=[1.0, 2.0, 4.0])
        cells = ", ".join(f"t={t:.0f}: {r[:n, 2].mean():.3f}/{r[n:, 2].mean():.3f}"
                          for t, r in zip(traj.times[1:], traj.rho[1:]))
        print(f"  inhibition {lam2}: {cells}")


if __name__ == "__main__":
    main()
