"""Exact continuous-time simulation of the contact dynamics on the torus.

The state is an integer field ``U`` over sites with values in ``{0, ..., k}``.
Sites at the threshold ``k`` reset to ``0`` at rate one and push a target
drawn from the kernel row one level up at rate ``lambda_star``.
"""
import os
from dataclasses import dataclass, field

import numpy as np

from . import _engine
from .errors import ConfigurationError, ValidationError
from .kernels import BlockKernel, MicroKernel, build_J_gamma
from .lattice import BasicPartition, TorusLattice

RHO_FLOOR = 1e-6


@dataclass(frozen=True)
class RngStream:
    """Seeded random stream; ``stream_id`` selects an independent replica.

    ``substream`` separates experiments sharing a seed (e.g. ladder rungs).
    """

    seed: int
    stream_id: int = 0
    substream: int = 0

    def generator(self):
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id), int(self.substream)))
        return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng):
    """Accept an :class:`RngStream`, a ``Generator`` or an integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    raise TypeError(f"cannot build a random generator from {type(rng).__name__}")


@dataclass
class PotentialField:
    """Configuration ``U`` at time ``t``; levels run from 0 to ``k``."""

    U: np.ndarray
    k: int
    t: float
    lattice: TorusLattice

    def __post_init__(self):
        self.U = np.ascontiguousarray(self.U, dtype=np.int64)
        if self.U.shape != (self.lattice.site_count,):
            raise ValidationError(
                f"field has shape {self.U.shape}, lattice has {self.lattice.site_count} sites", "U"
            )
        if self.k < 1:
            raise ValidationError(f"threshold k must be >= 1, got {self.k}", "k")
        if self.U.size and (self.U.min() < 0 or self.U.max() > self.k):
            raise ValidationError(f"levels must lie in 0..{self.k}", "U")

    def counts(self):
        """Number of sites at each level."""
        return np.bincount(self.U, minlength=self.k + 1)

    def copy(self):
        return PotentialField(self.U.copy(), self.k, self.t, self.lattice)


@dataclass
class Trajectory:
    """Snapshots ``levels[j]`` of the field at ``times[j]``."""

    times: np.ndarray
    levels: np.ndarray
    k: int
    lattice: TorusLattice
    events: int = 0

    def __len__(self):
        return len(self.times)

    def __getitem__(self, j):
        return PotentialField(self.levels[j].copy(), self.k, float(self.times[j]), self.lattice)

    @property
    def final(self):
        return self[-1]


@dataclass
class BlockDensityField:
    """Level fractions ``v[i, C]`` per block of ``partition`` at time ``t``."""

    v: np.ndarray
    partition: BasicPartition
    t: float = 0.0
    counts: np.ndarray = field(default=None, repr=False)


def _rho_on_sites(lattice, rho0, k):
    if callable(rho0):
        rho = np.asarray(rho0(lattice.positions()), dtype=float)
    else:
        rho = np.asarray(rho0, dtype=float)
        if rho.ndim == 1:
            rho = np.broadcast_to(rho, (lattice.site_count, rho.size))
    if rho.shape != (lattice.site_count, k + 1):
        raise ValidationError(f"rho0 must give {k + 1} level probabilities per site, got shape {rho.shape}", "rho0")
    return rho


def init_state(lattice, rho0, k, rng):
    """Independent sites with ``P[U(x) = i] = rho0(gamma x, i)``.

    ``rho0`` is either a callable mapping positions ``(sites, d)`` to an array
    ``(sites, k+1)``, a per-site array of that shape, or one row shared by
    every site.
    """
    rho = _rho_on_sites(lattice, rho0, k)
    if not np.all(np.isfinite(rho)):
        raise ValidationError("rho0 has non-finite entries", "rho0")
    if np.any(np.abs(rho.sum(axis=1) - 1.0) > 1e-9):
        raise ValidationError("rho0 rows must sum to one within 1e-9", "rho0")
    if rho.min() < RHO_FLOOR:
        raise ValidationError(f"rho0 entries must be >= {RHO_FLOOR} (strictly positive densities)", "rho0")
    gen = as_generator(rng)
    cdf = np.cumsum(rho, axis=1)
    u = gen.random(lattice.site_count)
    U = (u[:, None] >= cdf[:, :-1]).sum(axis=1)
    return PotentialField(U, k, 0.0, lattice)


def _snapshot_times(state, t_end, times):
    if t_end < state.t:
        raise ValueError(f"t_end={t_end} is before the current time {state.t}")
    if times is None:
        times = [t_end]
    times = np.asarray(times, dtype=float).ravel()
    if times.size and (np.any(np.diff(times) < 0) or times[0] < state.t or times[-1] > t_end):
        raise ValueError("snapshot times must be sorted and lie in [state.t, t_end]")
    if times.size == 0 or times[-1] != t_end:
        times = np.append(times, t_end)
    return times


def _kernel_sampler(kernel, lattice):
    if not isinstance(kernel, (MicroKernel, BlockKernel)):
        raise TypeError("kernel must be a J_gamma or A_gamma kernel")
    if kernel.lattice != lattice:
        raise ConfigurationError("kernel and state live on different lattices")
    return kernel.sampler


def run_ctmc(state, kernel, lambda_star, t_end, rng, times=None):
    """Simulate the contact dynamics from ``state`` up to ``t_end``.

    ``kernel`` is ``J_gamma`` or ``A_gamma``. Returns a :class:`Trajectory`
    whose snapshot times are ``times`` with ``t_end`` appended if missing;
    ``state`` itself is left untouched.
    """
    if lambda_star < 0:
        raise ValidationError(f"lambda_star must be nonnegative, got {lambda_star}", "lambda_star")
    lat = state.lattice
    times = _snapshot_times(state, t_end, times)
    s = _kernel_sampler(kernel, lat)
    U = state.U.copy()
    snaps = np.empty((times.size, U.size), dtype=np.int64)
    events = _engine.contact_run(
        U, state.k, float(lambda_star), float(state.t), times, lat.side, lat.d,
        s.offsets, s.q, s.alias, s.block_side, s.blocks_per_side, as_generator(rng), snaps,
    )
    return Trajectory(times, snaps, state.k, lat, int(events))


def _variant_tables(spec, lattice):
    """Flatten a model spec into the channel arrays of the compiled loop."""
    S = spec.n_states
    positions = lattice.positions()
    kernels, kernel_ids = [], {}
    gfields = []
    chans = []  # (carrier, kind, rate, from, to, aux)
    for (i, j), g in spec.g.items():
        vals = np.broadcast_to(np.asarray(g(positions) if callable(g) else g, dtype=float), (lattice.site_count,))
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValidationError(f"intrinsic rate g[{i},{j}] must be finite and nonnegative", f"g[{i},{j}]")
        gmax = float(vals.max())
        if gmax == 0.0:
            continue
        gfields.append(vals / gmax)
        chans.append((i, 1, gmax, i, j, len(gfields) - 1))
    for (i, j, l), (lam, J) in spec.couplings.items():
        if lam < 0 or not np.isfinite(lam):
            raise ValidationError(f"coupling lambda[{i},{j},{l}] must be finite and nonnegative", f"lambda[{i},{j},{l}]")
        if lam == 0:
            continue
        if id(J) not in kernel_ids:
            kernel_ids[id(J)] = len(kernels)
            kernels.append(build_J_gamma(lattice, J).sampler)
        chans.append((spec.trigger(i, j, l), 0, float(lam), i, j, kernel_ids[id(J)]))
    chans.sort(key=lambda c: c[0])
    start = np.searchsorted([c[0] for c in chans], np.arange(S + 1)).astype(np.int64)
    cols = list(zip(*chans)) if chans else [()] * 6
    d = lattice.d
    tables = dict(
        ch_start=start,
        ch_kind=np.array(cols[1], dtype=np.int64),
        ch_rate=np.array(cols[2], dtype=float),
        ch_from=np.array(cols[3], dtype=np.int64),
        ch_to=np.array(cols[4], dtype=np.int64),
        ch_aux=np.array(cols[5], dtype=np.int64),
        koff=np.concatenate([s.offsets for s in kernels]) if kernels else np.zeros((0, d), np.int64),
        kq=np.concatenate([s.q for s in kernels]) if kernels else np.zeros(0),
        kalias=np.concatenate([s.alias for s in kernels]) if kernels else np.zeros(0, np.int64),
        kstart=np.cumsum([0] + [len(s.q) for s in kernels]).astype(np.int64),
        kb=np.array([s.block_side for s in kernels] or [1], dtype=np.int64),
        knb=np.array([s.blocks_per_side for s in kernels] or [1], dtype=np.int64),
        gacc=np.array(gfields) if gfields else np.zeros((1, lattice.site_count)),
    )
    return tables


def run_ctmc_variant(state, spec, t_end, rng, times=None):
    """Simulate the general finite-state model described by ``spec``.

    A site ``x`` jumps ``i -> j`` at rate
    ``g[i,j](gamma x) + sum_l lambda[i,j,l] sum_y J_gamma(y, x) 1[U(y) = trigger]``.
    Interaction clocks are carried by the triggering sites, intrinsic
    clocks by the jumping site (thinned against the maximum of ``g``).
    """
    spec.validate()
    lat = state.lattice
    if state.U.size and state.U.max() >= spec.n_states:
        raise ValidationError("state has levels outside the spec's state set", "U")
    times = _snapshot_times(state, t_end, times)
    tab = _variant_tables(spec, lat)
    U = state.U.copy()
    snaps = np.empty((times.size, U.size), dtype=np.int64)
    events = _engine.general_run(
        U, spec.n_states, float(state.t), times, lat.side, lat.d,
        tab["ch_start"], tab["ch_kind"], tab["ch_rate"], tab["ch_from"], tab["ch_to"], tab["ch_aux"],
        tab["koff"], tab["kq"], tab["kalias"], tab["kstart"], tab["kb"], tab["knb"], tab["gacc"],
        as_generator(rng), snaps,
    )
    return Trajectory(times, snaps, max(state.k, spec.n_states - 1), lat, int(events))


def block_counts(levels, partition, k):
    """Per-block level counts for one field ``(sites,)`` or a stack ``(..., sites)``.

    Returns an integer array of shape ``(..., k+1, blocks)``.
    """
    levels = np.asarray(levels, dtype=np.int64)
    nblk = partition.block_count
    lead = levels.shape[:-1]
    flat = levels.reshape(-1, levels.shape[-1])
    key = (k + 1) * partition.site_block + flat
    key = key + (np.arange(flat.shape[0]) * nblk * (k + 1))[:, None]
    c = np.bincount(key.ravel(), minlength=flat.shape[0] * nblk * (k + 1))
    c = c.reshape(flat.shape[0], nblk, k + 1).transpose(0, 2, 1)
    return c.reshape(lead + (k + 1, nblk))


def block_density(state, partition):
    """Fractions ``v[i, C] = |{x in C : U(x) = i}| / N``."""
    if partition.lattice != state.lattice:
        raise ConfigurationError("partition does not belong to the state's lattice")
    c = block_counts(state.U, partition, state.k)
    return BlockDensityField(c / partition.N, partition, state.t, c)


def write_snapshot(state, path):
    """Plain-text dump: a ``t=... k=... sites=...`` header and ``index level`` lines."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"t={state.t!r} k={state.k} sites={state.U.size}\n")
        for x, u in enumerate(state.U.tolist()):
            fh.write(f"{x} {u}\n")


def read_snapshot(path, lattice):
    with open(path) as fh:
        header = dict(item.split("=", 1) for item in fh.readline().split())
        body = np.loadtxt(fh, dtype=np.int64, ndmin=2)
    n = int(header["sites"])
    if n != lattice.site_count:
        raise ValidationError(f"snapshot has {n} sites, lattice has {lattice.site_count}", "sites")
    U = np.zeros(n, dtype=np.int64)
    U[body[:, 0]] = body[:, 1]
    return PotentialField(U, int(header["k"]), float(header["t"]), lattice)
