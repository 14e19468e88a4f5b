"""Deterministic limit equations on a periodic grid.

Densities are arrays ``rho[node, level]``. Spatial interaction enters only
through ``K(r) = lambda_star * int J(r', r) rho(r', k) dr'``, computed as a
periodic convolution; on a block grid the same code runs the coarse-kernel
system (``A_xi``) and the explicit scheme with ``A_gamma``.
"""
import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError, ValidationError
from .kernels import PeriodicConvolution
from .lattice import wrap

CONSERVATION_TOL = 1e-9
RANGE_SLACK = 1e-9


@dataclass(frozen=True)
class MacroGrid:
    """Cell-centred grid of ``n**d`` nodes on the torus ``[0, L)^d``; axis 0 fastest."""

    d: int
    L: float
    n: int

    def __post_init__(self):
        if self.n < 1 or self.d not in (1, 2, 3):
            raise ConfigurationError(f"bad grid (d={self.d}, n={self.n})")

    @property
    def h(self):
        return self.L / self.n

    @property
    def nodes(self):
        return self.n ** self.d

    def positions(self):
        c = np.stack(np.unravel_index(np.arange(self.nodes), (self.n,) * self.d, order="F"), axis=-1)
        return (c + 0.5) * self.h


def default_grid(d, L, R, xi=None):
    """Dyadic grid with spacing at most ``min(xi, R/8)``."""
    target = R / 8 if xi is None else min(xi, R / 8)
    n = 2 ** max(0, math.ceil(math.log2(L / target - 1e-12)))
    return MacroGrid(d, L, n)


def block_grid(d, L, n3):
    """One node per block of side ``L 2^-n3``."""
    return MacroGrid(d, L, 2 ** n3)


def grid_kernel(J, grid):
    """Periodic rectangle-rule discretization of ``J`` on ``grid``, renormalised to mass one."""
    if J.d != grid.d:
        raise ConfigurationError(f"kernel dimension {J.d} != grid dimension {grid.d}")
    if J.R > grid.L / 2:
        raise ConfigurationError(f"kernel range R={J.R} exceeds L/2={grid.L / 2}")
    if grid.h > J.R:
        raise ConfigurationError(f"grid spacing {grid.h} is coarser than the kernel range {J.R}")
    n, d = grid.n, grid.d
    c = np.stack(np.unravel_index(np.arange(grid.nodes), (n,) * d, order="F"), axis=-1)
    w = J(wrap(c, n) * grid.h)
    w = w / math.fsum(w)
    return PeriodicConvolution(w.reshape((n,) * d, order="F"))


@dataclass
class MacroDensity:
    """Level densities ``rho[node, i]`` on ``grid``."""

    rho: np.ndarray
    grid: MacroGrid

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        if self.rho.ndim != 2 or self.rho.shape[0] != self.grid.nodes:
            raise ValidationError(f"rho must have shape (nodes={self.grid.nodes}, levels)", "rho")
        if np.any(np.abs(self.rho.sum(axis=1) - 1.0) > CONSERVATION_TOL):
            raise ValidationError("densities must sum to one at every node", "rho")
        if self.rho.min() < -RANGE_SLACK or self.rho.max() > 1 + RANGE_SLACK:
            raise ValidationError("densities must lie in [0, 1]", "rho")

    @property
    def k(self):
        return self.rho.shape[1] - 1


def _arr(rho):
    return rho.rho if isinstance(rho, MacroDensity) else np.asarray(rho, dtype=float)


def _check(kernel, nodes):
    if kernel.nodes != nodes:
        raise ConfigurationError(f"kernel acts on {kernel.nodes} nodes, density has {nodes}")


def infection_field(rho_k, kernel, lambda_star):
    """``lambda_star * sum_r' J(r', r) rho_k(r')`` on the grid."""
    _check(kernel, rho_k.shape[0])
    return lambda_star * kernel.convolve(rho_k)


def _chain(rho, K):
    k = rho.shape[1] - 1
    out = np.empty_like(rho)
    out[:, 0] = rho[:, k] - rho[:, 0] * K
    for i in range(1, k):
        out[:, i] = (rho[:, i - 1] - rho[:, i]) * K
    out[:, k] = -rho[:, k] + rho[:, k - 1] * K
    return out


def rhs_contact(rho, kernel, lambda_star):
    """Right-hand side of the contact limit equations.

    Level ``0 < i < k`` moves up at rate ``K``, level ``k`` resets to ``0``
    at rate one. ``kernel`` is any periodic convolution on the density's
    nodes (grid ``J``, ``A_xi`` or ``A_gamma`` on blocks).
    """
    rho = _arr(rho)
    return _chain(rho, infection_field(rho[:, -1], kernel, lambda_star))


def _recovery_rates(lambdas, k):
    lam = np.zeros(k + 1)
    if isinstance(lambdas, dict):
        for i, v in lambdas.items():
            if not 1 <= int(i) <= k - 1:
                raise ValidationError(f"extra recovery only applies to levels 1..{k - 1}, got {i}", "lambdas")
            lam[int(i)] = v
    else:
        vals = np.asarray(lambdas, dtype=float).ravel()
        if vals.size != k - 1:
            raise ValidationError(f"need {k - 1} recovery rates for levels 1..{k - 1}", "lambdas")
        lam[1:k] = vals
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValidationError("recovery rates must be finite and nonnegative", "lambdas")
    return lam


def rhs_with_recovery(rho, kernel, lambda_star, lambdas):
    """Contact equations plus resets ``i -> 0`` at rate ``lambdas[i]`` for ``0 < i < k``."""
    rho = _arr(rho)
    k = rho.shape[1] - 1
    lam = _recovery_rates(lambdas, k)
    out = rhs_contact(rho, kernel, lambda_star)
    if np.any(lam):
        leak = rho[:, 1:k] * lam[1:k]
        out[:, 1:k] -= leak
        out[:, 0] += leak.sum(axis=1)
    return out


def rhs_excitatory_inhibitory(rho1, rho2, J1, J2, lambda1, lambda2):
    """Two coupled populations driven by excitatory ``rho1(., k)`` and inhibitory ``rho2(., k)``.

    Excitation moves every level below ``k`` up by one; inhibition moves
    levels ``1..k-1`` down by one; level ``k`` resets to ``0`` at rate one.
    """
    rho1, rho2 = _arr(rho1), _arr(rho2)
    if rho1.shape != rho2.shape:
        raise ConfigurationError("excitatory and inhibitory densities live on different grids")
    _check(J1, rho1.shape[0])
    _check(J2, rho2.shape[0])
    k = rho1.shape[1] - 1
    E = lambda1 * J1.convolve(rho1[:, k])
    I = lambda2 * J2.convolve(rho2[:, k])
    outs = []
    for rho in (rho1, rho2):
        out = _chain(rho, E)
        for i in range(1, k):
            down = rho[:, i] * I
            out[:, i] -= down
            out[:, i - 1] += down
        outs.append(out)
    return outs[0], outs[1]


# ---------------------------------------------------------------------------
# general finite-state model


@dataclass
class ModelSpec:
    """Rates of the general finite-state model.

    ``g[(i, j)]`` is an intrinsic rate (a constant or a callable of positions
    ``(n, d)``); ``couplings[(i, j, l)] = (lam, J)`` adds
    ``lam * int J(y, x) v_trigger(y) dy`` to the ``i -> j`` rate. The
    triggering state defaults to ``l``; ``trigger_mode="top"`` uses the last
    state for every coupling, and ``triggers`` overrides single entries.
    """

    n_states: int
    g: dict = field(default_factory=dict)
    couplings: dict = field(default_factory=dict)
    trigger_mode: str = "index"
    triggers: dict = field(default_factory=dict)
    labels: tuple = None

    def trigger(self, i, j, l):
        if (i, j, l) in self.triggers:
            return self.triggers[(i, j, l)]
        if self.trigger_mode == "top":
            return self.n_states - 1
        return l

    def validate(self):
        S = self.n_states
        if S < 2:
            raise ValidationError("a model needs at least two states", "n_states")
        if self.trigger_mode not in ("index", "top"):
            raise ValidationError(f"unknown trigger_mode {self.trigger_mode!r}", "trigger_mode")
        for (i, j), g in self.g.items():
            if not (0 <= i < S and 0 <= j < S) or i == j:
                raise ValidationError(f"bad intrinsic transition {i}->{j}", f"g[{i},{j}]")
            if not callable(g) and (not np.all(np.isfinite(g)) or np.any(np.asarray(g) < 0)):
                raise ValidationError(f"intrinsic rate g[{i},{j}] must be finite and nonnegative", f"g[{i},{j}]")
        for (i, j, l), (lam, J) in self.couplings.items():
            if not (0 <= i < S and 0 <= j < S and 0 <= l < S) or i == j:
                raise ValidationError(f"bad coupling ({i},{j},{l})", f"lambda[{i},{j},{l}]")
            if not (np.isfinite(lam) and lam >= 0):
                raise ValidationError(f"coupling lambda[{i},{j},{l}] must be finite and nonnegative",
                                      f"lambda[{i},{j},{l}]")
            t = self.trigger(i, j, l)
            if not 0 <= t < S:
                raise ValidationError(f"trigger level {t} outside 0..{S - 1}", "trigger_level")
        return self


def specialize_general_to_contact(k, lambda_star, J):
    """The contact process as a general model: resets ``k -> 0``, climbs triggered by level ``k``."""
    if k < 1:
        raise ValidationError("k must be >= 1", "k")
    couplings = {(i, i + 1, k): (float(lambda_star), J) for i in range(k)}
    return ModelSpec(k + 1, g={(k, 0): 1.0}, couplings=couplings)


def specialize_recovery(k, lambda_star, lambdas, J):
    """Contact model with extra resets ``i -> 0`` at rate ``lambdas[i]``."""
    spec = specialize_general_to_contact(k, lambda_star, J)
    lam = _recovery_rates(lambdas, k)
    for i in range(1, k):
        if lam[i] > 0:
            spec.g[(i, 0)] = float(lam[i])
    return spec


def _field(g, grid):
    return np.broadcast_to(np.asarray(g(grid.positions()) if callable(g) else g, dtype=float), (grid.nodes,))


def rhs_general(spec, v, grid=None, cache=None):
    """Master-equation right-hand side of the general model on ``grid``.

    ``v`` is a :class:`MacroDensity` (or an array with ``grid`` given);
    ``cache`` may be a dict reused across calls to keep the gridded kernels.
    """
    spec.validate()
    if isinstance(v, MacroDensity):
        grid = v.grid
    v = _arr(v)
    if grid is None:
        raise ConfigurationError("rhs_general needs the grid of the densities")
    if v.shape != (grid.nodes, spec.n_states):
        raise ValidationError(f"density shape {v.shape} does not match ({grid.nodes}, {spec.n_states})", "v")
    cache = {} if cache is None else cache
    out = np.zeros_like(v)
    for (i, j), g in spec.g.items():
        flux = _field(g, grid) * v[:, i]
        out[:, j] += flux
        out[:, i] -= flux
    conv = {}
    for (i, j, l), (lam, J) in spec.couplings.items():
        if lam == 0:
            continue
        t = spec.trigger(i, j, l)
        key = (id(J), grid)
        if key not in cache:
            cache[key] = grid_kernel(J, grid)
        if (key, t) not in conv:
            conv[(key, t)] = cache[key].convolve(v[:, t])
        flux = lam * conv[(key, t)] * v[:, i]
        out[:, j] += flux
        out[:, i] -= flux
    return out


# ---------------------------------------------------------------------------
# time integration


@dataclass
class MacroTrajectory:
    times: np.ndarray
    rho: np.ndarray  # (times, nodes, levels)
    dt: float
    method: str
    grid: MacroGrid = None

    def at(self, j):
        return MacroDensity(self.rho[j], self.grid) if self.grid is not None else self.rho[j]


def _step(f, y, h, method):
    if method == "euler":
        return y + h * f(y)
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


class _Excursion(Exception):
    def __init__(self, t):
        self.t = t


def _march(f, y0, times, dt, method):
    y = np.array(y0, dtype=float)
    out = [y.copy()]
    for ta, tb in zip(times[:-1], times[1:]):
        span = tb - ta
        n = max(1, math.ceil(span / dt - 1e-9)) if span > 0 else 0
        h = span / n if n else 0.0
        for s in range(n):
            y = _step(f, y, h, method)
            t = ta + (s + 1) * h
            if not np.all(np.isfinite(y)):
                raise NumericalError("non-finite density", time=t)
            if y.min() < -RANGE_SLACK or y.max() > 1 + RANGE_SLACK:
                raise _Excursion(t)
        out.append(y.copy())
    return np.stack(out)


def integrate_rhs(f, y0, T, dt, method="rk4", times=None, grid=None, conserve=True):
    """Fixed-step integration of ``dy/dt = f(y)`` with output at ``times``.

    Steps are shortened so that every output time is hit exactly. If a
    density leaves ``[0, 1]`` the run is repeated once at ``dt/2``.
    """
    if dt <= 0 or T < 0:
        raise ValueError("need dt > 0 and T >= 0")
    if method not in ("euler", "rk4"):
        raise ValueError(f"unknown method {method!r}")
    times = np.array([0.0, T] if times is None else times, dtype=float)
    if times[0] != 0.0:
        times = np.concatenate([[0.0], times])
    if np.any(np.diff(times) < 0) or times[-1] > T + 1e-12:
        raise ValueError("output times must be sorted and lie in [0, T]")
    for attempt, step in enumerate((dt, dt / 2)):
        try:
            rho = _march(f, y0, times, step, method)
            break
        except _Excursion as exc:
            if attempt == 1:
                raise NumericalError("density left [0, 1] even at dt/2", time=exc.t,
                                     diagnostics={"dt": step}) from None
    if conserve:
        drift = float(np.abs(rho.sum(axis=-1) - 1.0).max())
        if drift > CONSERVATION_TOL:
            raise NumericalError(f"mass drift {drift:.3g}", diagnostics={"drift": drift})
    return MacroTrajectory(times, rho, step, method, grid)


def integrate(rho0, kernel, lambda_star, T, dt, method="rk4", times=None):
    """Solve the contact limit equations from ``rho0`` (MacroDensity or array)."""
    grid = rho0.grid if isinstance(rho0, MacroDensity) else None
    y0 = _arr(rho0)
    _check(kernel, y0.shape[0])
    return integrate_rhs(lambda y: rhs_contact(y, kernel, lambda_star), y0, T, dt, method, times, grid)


# ---------------------------------------------------------------------------
# explicit scheme on blocks


@dataclass
class EulerState:
    """Block-constant densities ``u[C, i]`` after ``n`` steps of mesh ``delta``."""

    u: np.ndarray
    delta: float
    n: int = 0


@dataclass
class EulerTrajectory:
    u: np.ndarray  # (steps + 1, blocks, levels)
    delta: float
    lower_bound: np.ndarray  # guaranteed floor after each step
    min_u: np.ndarray
    max_u: np.ndarray
    bounds_checked: bool

    @property
    def final(self):
        return EulerState(self.u[-1], self.delta, len(self.u) - 1)

    @property
    def lower_bound_holds(self):
        return bool(np.all(self.min_u >= self.lower_bound))

    @property
    def upper_bound_holds(self):
        k = self.u.shape[-1] - 1
        return bool(np.all(self.max_u <= 1 - k * self.lower_bound))


def positivity_rate(lambda_star):
    """Per-step contraction rate ``c`` in the floor ``(1 - c delta)^n eps``."""
    return max(1.0, lambda_star - 1.0)


def euler_scheme(v0, kernel, lambda_star, n_steps, delta=None, epsilon=None):
    """Iterate ``u <- u + delta F(u)`` on blocks, tracking the positivity band.

    ``v0`` is an :class:`EulerState`, a block density field or a
    ``(blocks, levels)`` array (then ``delta`` is required). ``epsilon`` defaults to the smallest initial
    density. If ``delta`` times the largest total jump rate reaches one the
    band is not guaranteed: a warning is issued and the check is disabled.
    """
    if isinstance(v0, EulerState):
        u, delta = np.array(v0.u, dtype=float), v0.delta if delta is None else delta
    elif isinstance(getattr(v0, "v", None), np.ndarray):
        u = np.array(v0.v.T, dtype=float)
    else:
        u = np.array(v0, dtype=float)
    if delta is None or delta <= 0:
        raise ValueError("a positive mesh delta is required")
    _check(kernel, u.shape[0])
    eps = float(u.min()) if epsilon is None else float(epsilon)
    c = positivity_rate(lambda_star)
    out = [u.copy()]
    checked = True
    for _ in range(n_steps):
        K = infection_field(u[:, -1], kernel, lambda_star)
        if checked and delta * max(1.0, float(K.max()), c) >= 1.0:
            warnings.warn("mesh too coarse for the positivity band; bounds not asserted", RuntimeWarning)
            checked = False
        u = u + delta * _chain(u, K)
        out.append(u.copy())
    traj = np.stack(out)
    n = np.arange(n_steps + 1)
    lower = (1.0 - c * delta) ** n * eps
    return EulerTrajectory(traj, delta, lower, traj.min(axis=(1, 2)), traj.max(axis=(1, 2)), checked)


# ---------------------------------------------------------------------------
# fixed points and export


@dataclass
class FixedPoint:
    rho: np.ndarray
    nontrivial: bool
    note: str


def homogeneous_fixed_point(k, lambda_star):
    """Spatially constant stationary densities.

    For ``lambda_star > k`` every level below ``k`` holds ``1/lambda_star``
    and level ``k`` the rest. Otherwise only the absorbing profile (all mass
    at level 0) is returned, flagged as trivial.
    """
    if k < 1:
        raise ValidationError("k must be >= 1", "k")
    if lambda_star > k:
        inv = 0.0 if math.isinf(lambda_star) else 1.0 / lambda_star
        rho = np.full(k + 1, inv)
        rho[k] = 1.0 - k * inv
        return FixedPoint(rho, True, "active branch")
    rho = np.zeros(k + 1)
    rho[0] = 1.0
    return FixedPoint(rho, False, f"lambda_star <= k={k}: only the absorbing profile (no level-k mass)")


def format_fixed_point(fp, k, lambda_star):
    lines = [f"k = {k}", f"lambda_star = {lambda_star!r}", f"nontrivial = {str(fp.nontrivial).lower()}",
             f"note = {fp.note}"]
    lines += [f"rho[{i}] = {float(v)!r}" for i, v in enumerate(fp.rho)]
    return "\n".join(lines) + "\n"


def write_trajectory_csv(traj, path):
    """Long format: columns t, r (flat node index), level, density."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "r", "level", "density"])
        for t, rho in zip(traj.times, traj.rho):
            for r in range(rho.shape[0]):
                for i in range(rho.shape[1]):
                    w.writerow([repr(float(t)), r, i, repr(float(rho[r, i]))])


def block_average_profile(rho0, d, L, n3, order=16):
    """Exact-in-the-limit block means ``|C|^-1 int_C rho0(r) dr`` by tensor Gauss-Legendre."""
    xi = L * 2.0 ** (-n3)
    nb = 2 ** n3
    x, w = np.polynomial.legendre.leggauss(order)
    x = (x + 1) / 2 * xi
    w = w / 2
    local = np.stack(np.meshgrid(*([x] * d), indexing="ij"), axis=-1).reshape(-1, d)
    wl = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=1)
    corners = np.stack(np.unravel_index(np.arange(nb ** d), (nb,) * d, order="F"), axis=-1) * xi
    vals = np.asarray(rho0((corners[:, None, :] + local[None, :, :]).reshape(-1, d)), dtype=float)
    vals = vals.reshape(nb ** d, len(wl), -1)
    return np.einsum("bqi,q->bi", vals, wl)

