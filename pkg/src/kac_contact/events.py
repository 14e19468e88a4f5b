"""Windowed clock construction of the dynamics with the block kernel.

On a window ``[t0, t0 + delta)`` every ordered pair ``x != y`` carries a
Poisson clock of rate ``lambda_star * A_gamma(x, y)`` (drawn as arrows) and
every site a Poisson clock of rate one (drawn as marks). Arrows and marks
that share sites form clusters; the replay of a window in time order gives
the next state together with counts of the rings that actually changed it.
"""
import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from . import _engine
from .kernels import BlockKernel, _flat
from .micro import PotentialField, as_generator

log = logging.getLogger(__name__)

SIZE_CLAMP = 64


@dataclass
class EventGraph:
    """Arrows ``src[m] -> dst[m]`` at ``atime[m]`` and marks at ``msite`` / ``mtime``."""

    t_start: float
    delta: float
    src: np.ndarray
    dst: np.ndarray
    atime: np.ndarray
    msite: np.ndarray
    mtime: np.ndarray
    kernel: BlockKernel = field(repr=False)

    @property
    def n_arrows(self):
        return len(self.src)

    @property
    def n_marks(self):
        return len(self.msite)

    @property
    def is_empty(self):
        return self.n_arrows == 0 and self.n_marks == 0

    def arrow_multiplicity(self):
        """Distinct ordered pairs and how many arrows each carries."""
        pairs, counts = np.unique(np.stack([self.src, self.dst], axis=1), axis=0, return_counts=True)
        return pairs, counts

    def mark_multiplicity(self):
        return np.unique(self.msite, return_counts=True)


@dataclass
class Cluster:
    """A maximal connected set of arrows and marks; ``size`` counts multiplicity."""

    arrows: np.ndarray
    marks: np.ndarray
    sites: np.ndarray

    @property
    def size(self):
        return len(self.arrows) + len(self.marks)


@dataclass
class EffectiveCounters:
    """Effective infections ``M_CDi[C, D, i]`` (``x`` in C, ``y`` in D at level i) and resets ``M_D[D]``."""

    M_CDi: np.ndarray
    M_D: np.ndarray
    singletons_checked: int = 0


def _block_offsets(partition):
    nb, d = partition.blocks_per_side, partition.lattice.d
    return np.stack(np.unravel_index(np.arange(nb ** d), (nb,) * d, order="F"), axis=-1).astype(np.int64)


def sample_window(lattice, A_gamma, lambda_star, delta, rng, t_start=0.0):
    """Draw the arrows and marks of one window.

    Per ordered block pair the arrow count is Poisson with mean
    ``lambda_star * delta * A_gamma * (number of site pairs x != y)``;
    endpoints are then placed uniformly, so only interacting block pairs
    cost anything.
    """
    p = A_gamma.partition
    if p.lattice != lattice:
        raise ValueError("A_gamma is defined on a different lattice")
    if lambda_star * delta * float(A_gamma.values.max()) >= 1.0:
        warnings.warn("lambda_star * delta * max A_gamma >= 1; windows will be crowded", RuntimeWarning)
    src, dst, atime, msite, mtime = _engine.window_sample(
        float(lambda_star), float(delta), float(t_start), p.block_count, p.N, p.block_side,
        p.blocks_per_side, lattice.side, lattice.d, _block_offsets(p),
        np.ascontiguousarray(_flat(A_gamma.mass)), as_generator(rng),
    )
    return EventGraph(float(t_start), float(delta), src, dst, atime, msite, mtime, A_gamma)


def _labels(n_sites, src, dst, msite):
    """Cluster label of every arrow and mark, plus the size of every label."""
    if len(src):
        g = sparse.coo_matrix((np.ones(len(src), np.int8), (src, dst)), shape=(n_sites, n_sites))
        _, comp = connected_components(g, directed=False)
    else:
        comp = np.arange(n_sites)
    la, lm = comp[src], comp[msite]
    size = np.bincount(np.concatenate([la, lm]), minlength=n_sites)
    return la, lm, size


def decompose_clusters(graph):
    """Split the events of a window into clusters (connectivity ignores times)."""
    n = graph.kernel.lattice.site_count
    la, lm, size = _labels(n, graph.src, graph.dst, graph.msite)
    out = []
    for lab in np.flatnonzero(size):
        arrows = np.flatnonzero(la == lab)
        marks = np.flatnonzero(lm == lab)
        sites = np.unique(np.concatenate([graph.src[arrows], graph.dst[arrows], graph.msite[marks]]))
        out.append(Cluster(arrows, marks, sites))
    return out


def _check_singletons(graph, before, after, k):
    """Every isolated arrow or mark acts as if it were alone; returns how many were checked."""
    n = before.size
    la, lm, size = _labels(n, graph.src, graph.dst, graph.msite)
    checked = 0
    for m in np.flatnonzero(size[la] == 1):
        x, y = graph.src[m], graph.dst[m]
        if before[x] == k and before[y] < k:
            ok = after[x] == k and after[y] == before[y] + 1
        else:
            ok = after[x] == before[x] and after[y] == before[y]
        if not ok:
            raise AssertionError(f"isolated arrow {x}->{y} acted inconsistently")
        checked += 1
    for m in np.flatnonzero(size[lm] == 1):
        x = graph.msite[m]
        expect = 0 if before[x] == k else before[x]
        if after[x] != expect:
            raise AssertionError(f"isolated mark at {x} acted inconsistently")
        checked += 1
    return checked


def apply_window(state, graph, debug=False):
    """Replay the window's rings in time order.

    An arrow ``x -> y`` is effective when ``U(x) = k`` and ``U(y) < k`` at
    its ring time, a mark at ``x`` when ``U(x) = k``. Returns the state at
    the end of the window and the effective-ring counters. With ``debug``
    every isolated arrow and mark is checked against its one-event effect.
    """
    if not math.isclose(graph.t_start, state.t, rel_tol=1e-12, abs_tol=1e-12):
        raise ValueError(f"window starts at {graph.t_start}, state is at t={state.t}")
    p = graph.kernel.partition
    nb, k = p.block_count, state.k
    U = state.U.copy()
    M = np.zeros((nb, nb, k), np.int64)
    MD = np.zeros(nb, np.int64)
    _engine.window_replay(U, k, graph.src, graph.dst, graph.atime, graph.msite, graph.mtime,
                          np.ascontiguousarray(p.site_block), M, MD)
    counters = EffectiveCounters(M, MD)
    if debug:
        counters.singletons_checked = _check_singletons(graph, state.U, U, k)
    return PotentialField(U, k, graph.t_start + graph.delta, state.lattice), counters


def run_windows(state, A_gamma, lambda_star, delta, n_windows, rng):
    """Compose ``n_windows`` consecutive windows; returns the final state and all snapshots."""
    lat, p = state.lattice, A_gamma.partition
    U = state.U.copy()
    snaps = np.empty((n_windows, U.size), np.int64)
    _engine.windows_run(
        U, state.k, float(lambda_star), float(delta), float(state.t), int(n_windows), p.block_count, p.N,
        p.block_side, p.blocks_per_side, lat.side, lat.d, _block_offsets(p),
        np.ascontiguousarray(_flat(A_gamma.mass)), np.ascontiguousarray(p.site_block), as_generator(rng), snaps,
    )
    return PotentialField(U, state.k, state.t + n_windows * delta, lat), snaps


def expected_increments(counters, k):
    """``N * (v_after - v_before)`` predicted by the counters, shape ``(k+1, blocks)``."""
    into = counters.M_CDi.sum(axis=0)  # (D, i)
    out = np.zeros((k + 1, counters.M_D.size), np.int64)
    out[0] = counters.M_D - into[:, 0]
    for i in range(1, k):
        out[i] = into[:, i - 1] - into[:, i]
    out[k] = into[:, k - 1] - counters.M_D
    return out


def increment_identity_check(v_before, v_after, counters):
    """Largest ``|dv - N^-1 (counter combination)|`` over levels and blocks.

    ``v_before`` and ``v_after`` are block density fields (or raw count
    arrays ``(k+1, blocks)``); with counts the comparison is in integers and
    an exact zero is expected.
    """
    def counts(v):
        return v.counts if getattr(v, "counts", None) is not None else np.asarray(v)

    cb, ca = counts(v_before), counts(v_after)
    k = cb.shape[0] - 1
    pred = expected_increments(counters, k)
    N = v_before.partition.N if hasattr(v_before, "partition") else 1
    return float(np.abs((ca - cb) - pred).max()) / N


@dataclass
class ClusterStats:
    """Summary of a batch of windows at one mesh ``delta``."""

    delta: float
    windows: int
    cluster_sizes: np.ndarray  # cluster_sizes[s] = number of clusters of size s
    arrow_sizes: np.ndarray  # arrow_sizes[s] = number of arrows sitting in clusters of size s
    arrows: int
    marks: int
    empty_fraction: float
    a: float = 0.0
    weighted_sum: float = float("nan")
    weighted_se: float = float("nan")
    truncated_mass: float = 0.0

    def tail_fraction(self, j):
        """Fraction of arrows in clusters of size ``>= j``."""
        if self.arrows == 0:
            return float("nan")
        return float(self.arrow_sizes[j:].sum()) / self.arrows

    @property
    def ci(self):
        h = 1.96 * self.weighted_se
        return self.weighted_sum - h, self.weighted_sum + h


def _histogram(values, n):
    return np.bincount(values, minlength=n + 1)[: n + 1] if len(values) else np.zeros(n + 1, np.int64)


def cluster_statistics(graphs, a=0.0, block_offset=None, max_size=SIZE_CLAMP):
    """Cluster-size histograms and the weighted pair sum over a batch of windows.

    For each window the weighted sum is
    ``N^-1 sum_{x in C, y in D} delta^(-a |cluster of (x, y)|)`` over pairs
    carrying at least one arrow, with ``D = C + block_offset``, averaged over
    the blocks ``C``. Weights are clamped at cluster size ``max_size``.
    """
    graphs = list(graphs)
    if not graphs:
        raise ValueError("cluster_statistics needs at least one window")
    A = graphs[0].kernel
    p = A.partition
    n, N = p.lattice.site_count, p.N
    delta = graphs[0].delta
    off = np.zeros(p.lattice.d, np.int64) if block_offset is None else np.asarray(block_offset, np.int64)
    csizes, asizes = [], []
    per_window = np.zeros(len(graphs))
    truncated = 0
    pairs_seen = 0
    n_arrows = n_marks = empty = 0
    for w, g in enumerate(graphs):
        la, lm, size = _labels(n, g.src, g.dst, g.msite)
        csizes.append(size[size > 0])
        asizes.append(size[la])
        n_arrows += len(g.src)
        n_marks += len(g.msite)
        empty += g.is_empty
        if len(g.src) == 0:
            continue
        bs, bd = p.site_block[g.src], p.site_block[g.dst]
        want = p.block_index(p.block_coords(bs) + off)
        sel = bd == want
        if not sel.any():
            continue
        key, first = np.unique(g.src[sel] * n + g.dst[sel], return_index=True)
        s = size[la[sel][first]]
        over = s >= max_size
        truncated += int(over.sum())
        pairs_seen += len(s)
        per_window[w] = np.sum(float(delta) ** (-a * np.minimum(s, max_size))) / N / p.block_count
    if truncated:
        log.warning("clamped %d cluster weights at size %d", truncated, max_size)
    cs = np.concatenate(csizes)
    az = np.concatenate(asizes)
    top = int(max(cs.max(initial=1), 1))
    W = len(graphs)
    return ClusterStats(
        delta=delta,
        windows=W,
        cluster_sizes=_histogram(cs, top),
        arrow_sizes=_histogram(az, top),
        arrows=n_arrows,
        marks=n_marks,
        empty_fraction=empty / W,
        a=a,
        weighted_sum=float(per_window.mean()),
        weighted_se=float(per_window.std(ddof=1) / math.sqrt(W)) if W > 1 else float("nan"),
        truncated_mass=truncated / pairs_seen if pairs_seen else 0.0,
    )


@dataclass
class BoundProbe:
    """Weighted cluster sums ``S`` along a mesh ladder."""

    deltas: np.ndarray
    S: np.ndarray
    S_se: np.ndarray
    ratio: np.ndarray
    ratio_se: np.ndarray
    a: float
    epsilon: float
    stats: list

    @property
    def non_increasing(self):
        """Ratios do not grow as ``delta`` shrinks (deltas in decreasing order)."""
        order = np.argsort(-self.deltas)
        return bool(np.all(np.diff(self.ratio[order]) <= 0))

    @property
    def bounded_by(self):
        return float(self.ratio.max())


def branching_bound_probe(lattice, A_gamma, lambda_star, delta, a, epsilon, batch, rng, block_offset=None):
    """Monte Carlo estimate of the rooted weighted cluster sum ``S`` at each mesh.

    ``S`` is the pair-averaged ``sum_j delta^(-a j) P[(x, y) lies in a
    cluster of size j]``; ``ratio = S N / delta^(1 - a - 2 epsilon)``.
    ``batch`` is a window count or a callable ``delta -> count``.
    """
    if not 0 <= a < 1 or epsilon <= 0 or 1 - a - 2 * epsilon <= 0:
        raise ValueError("need 0 <= a < 1, epsilon > 0 and 1 - a - 2 epsilon > 0")
    gen = as_generator(rng)
    deltas = np.atleast_1d(np.asarray(delta, dtype=float))
    N = A_gamma.partition.N
    stats = []
    for dl in deltas:
        m = int(batch(dl)) if callable(batch) else int(batch)
        graphs = (sample_window(lattice, A_gamma, lambda_star, dl, gen) for _ in range(m))
        stats.append(cluster_statistics(graphs, a=a, block_offset=block_offset))
    ws = np.array([s.weighted_sum for s in stats])
    se = np.array([s.weighted_se for s in stats])
    scale = deltas ** (1 - a - 2 * epsilon)
    return BoundProbe(deltas, ws / N, se / N, ws / scale, se / scale, a, epsilon, stats)


def write_cluster_csv(stats, path):
    """One row per (delta, size): columns delta, size, count, weighted_sum, ci_low, ci_high."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "size", "count", "weighted_sum", "ci_low", "ci_high"])
        for s in stats:
            lo, hi = s.ci
            for size in np.flatnonzero(s.cluster_sizes):
                w.writerow([repr(s.delta), int(size), int(s.cluster_sizes[size]),
                            repr(s.weighted_sum), repr(lo), repr(hi)])

