"""The deterministic equations: fixed points, coarse kernels and the explicit block scheme.

1. Homogeneous stationary densities for a few (k, lambda*).
2. A bump of level-k mass relaxing towards the active fixed point.
3. The coarse-kernel system approaching the full-kernel solution as the
   blocks shrink.
4. The explicit block scheme converging at first order in delta.

    python demos/03_limit_equations.py
"""
import numpy as np

from kac_contact.config import make_profile, validate_config
from kac_contact.kernels import coarse_grain_A_xi, smooth_bump_kernel
from kac_contact.macro import MacroGrid, euler_scheme, grid_kernel, homogeneous_fixed_point, integrate
from kac_contact.studies import run_xi_ladder


def main():
    print("homogeneous fixed points")
    for k, lam in [(1, 2.0), (2, 4.0), (3, 5.0), (2, 1.5)]:
        fp = homogeneous_fixed_point(k, lam)
        print(f"  k={k} lambda*={lam}: {np.round(fp.rho, 4).tolist()} ({fp.note})")

    k, lam = 2, 4.0
    J = smooth_bump_kernel(0.25, 1)
    grid = MacroGrid(1, 1.0, 64)
    rho0 = make_profile({"profile": "bump", "base": 0.05, "amplitude": 0.6}, k, 1.0)(grid.positions())
    traj = integrate(rho0, grid_kernel(J, grid), lam, 8.0, 0.01, times=[0.5, 1.0, 2.0, 4.0, 8.0])
    target = homogeneous_fixed_point(k, lam).rho
    print(f"\nrelaxation from a bump, k={k} lambda*={lam}")
    for t, rho in zip(traj.times, traj.rho):
        print(f"  t={t:4.1f}  level-k range [{rho[:, k].min():.3f}, {rho[:, k].max():.3f}]  "
              f"distance to fixed point {np.abs(rho - target).max():.2e}")

    cfg = validate_config({"study": "xi_ladder", "ladder": [1, 2, 3, 4, 5]})
    rep = run_xi_ladder(cfg)
    print("\ncoarse-kernel vs full-kernel solution at T=1")
    for r in rep.rows:
        print(f"  xi={r['xi']:.4f}  sup gap {r['sup_error']:.4f}")

    A = coarse_grain_A_xi(J, 2)
    u0 = np.array([[0.6, 0.2, 0.2], [0.3, 0.3, 0.4], [0.2, 0.2, 0.6], [0.5, 0.3, 0.2]])
    ref = integrate(u0, A, 2.0, 1.0, 1e-4).rho[-1]
    print("\nexplicit block scheme, error at T=1")
    for n in range(4, 9):
        e = euler_scheme(u0, A, 2.0, 2 ** n, 2.0 ** -n)
        print(f"  delta=2^-{n}  error {np.abs(e.final.u - ref).max():.2e}  floor held {e.lower_bound_holds}")


if __name__ == "__main__":
    main()
