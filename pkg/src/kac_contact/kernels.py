"""Interaction kernels.

Four objects live here:

* :class:`Kernel` -- the macroscopic probability kernel ``J(r, r') = J(r' - r)``
  (translation invariant, radial, finite range ``R``);
* :class:`MicroKernel` -- ``J_gamma(x, y) = a_gamma gamma^d J(gamma x, gamma y)``
  on the lattice, zero on the diagonal, rows summing to one;
* :class:`BlockKernel` -- ``A_gamma``, the average of ``J_gamma`` over pairs of
  blocks of the basic partition;
* :class:`XiKernel` -- ``A_xi``, the average of ``J`` over pairs of
  macroscopic blocks of side ``xi``.

Everything is stored as a table over offsets, which is all translation
invariance requires.
"""
import math
from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np
from scipy import integrate

from .errors import ConfigurationError, NumericalError
from .lattice import BasicPartition, wrap

KINDS = ("uniform", "smooth_bump", "tabulated")


def _unit_ball_volume(d):
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def _sphere_area(d):
    return d * _unit_ball_volume(d)


class Kernel:
    """Radial probability kernel ``J(|r' - r|)`` of finite range ``R`` on ``R^d``.

    Use :func:`uniform_kernel`, :func:`smooth_bump_kernel` or
    :func:`tabulated_kernel` rather than calling this directly.
    """

    def __init__(self, kind, R, d, profile, norm, breakpoints=()):
        if R <= 0:
            raise ConfigurationError(f"kernel range must be positive, got R={R}")
        self.kind = kind
        self.R = float(R)
        self.d = int(d)
        self._profile = profile
        self._norm = float(norm)
        # radii at which the profile is discontinuous or kinked
        self.breakpoints = tuple(float(b) for b in breakpoints)

    def radial(self, r):
        r = np.asarray(r, dtype=float)
        return self._norm * self._profile(r)

    def __call__(self, disp):
        """Evaluate at displacement(s) ``disp`` of shape ``(..., d)``."""
        disp = np.asarray(disp, dtype=float)
        if self.d == 1 and disp.shape[-1:] != (1,):
            disp = disp[..., None]
        return self.radial(np.sqrt((disp ** 2).sum(axis=-1)))

    @cached_property
    def sup(self):
        rs = np.linspace(0.0, self.R, 4097)
        return float(self.radial(rs).max())

    def __repr__(self):
        return f"Kernel(kind={self.kind!r}, R={self.R}, d={self.d})"


def _radial_mass(profile, R, d, points=()):
    f = lambda r: profile(np.asarray(r)) * r ** (d - 1)
    pts = sorted(p for p in points if 0 < p < R)
    val, err = integrate.quad(f, 0.0, R, points=pts or None, limit=200, epsabs=1e-14, epsrel=1e-13)
    return _sphere_area(d) * val


def uniform_kernel(R, d=1):
    """``J = 1/|B_R|`` on the Euclidean ball of radius ``R``."""
    profile = lambda r: (np.asarray(r) <= R).astype(float)
    return Kernel("uniform", R, d, profile, 1.0 / (_unit_ball_volume(d) * R ** d), breakpoints=(R,))


def smooth_bump_kernel(R, d=1):
    """C-infinity bump ``c exp(-1 / (1 - (r/R)^2))`` for ``r < R``."""

    def profile(r):
        r = np.asarray(r, dtype=float)
        s = np.clip(r / R, 0.0, 1.0)
        with np.errstate(divide="ignore", over="ignore"):
            val = np.exp(-1.0 / (1.0 - s ** 2))
        return np.where(s < 1.0, val, 0.0)

    return Kernel("smooth_bump", R, d, profile, 1.0 / _radial_mass(profile, R, d))


def tabulated_kernel(table, d=1):
    """Radial profile from rows ``(r_offset, value)``, linearly interpolated.

    ``table`` is an ``(n, 2)`` array or the path of a plain-text file with
    one ``r_offset value`` pair per line. The profile is zero beyond the last
    offset and is renormalised to a probability kernel.
    """
    if isinstance(table, (str, bytes)) or hasattr(table, "__fspath__"):
        table = np.loadtxt(table, ndmin=2)
    table = np.asarray(table, dtype=float)
    if table.ndim != 2 or table.shape[1] != 2 or len(table) < 2:
        raise ConfigurationError("kernel table needs at least two 'r_offset value' rows")
    order = np.argsort(table[:, 0])
    rs, vs = table[order, 0], table[order, 1]
    if rs[0] < 0 or np.any(vs < 0) or np.any(np.diff(rs) <= 0):
        raise ConfigurationError("kernel table offsets must be distinct and >= 0, values >= 0")
    positive = np.flatnonzero(vs > 0)
    if positive.size == 0:
        raise ConfigurationError("kernel table is identically zero")
    R = rs[min(positive[-1] + 1, len(rs) - 1)] if vs[-1] == 0 else rs[-1]

    def profile(r):
        r = np.asarray(r, dtype=float)
        return np.where(r <= rs[-1], np.interp(r, rs, vs), 0.0)

    return Kernel("tabulated", R, d, profile, 1.0 / _radial_mass(profile, R, d, rs), breakpoints=rs)


def make_kernel(kind, R=None, d=1, table=None):
    if kind == "uniform":
        return uniform_kernel(R, d)
    if kind == "smooth_bump":
        return smooth_bump_kernel(R, d)
    if kind == "tabulated":
        return tabulated_kernel(table, d)
    raise ConfigurationError(f"unknown kernel kind {kind!r}; expected one of {KINDS}")


# ---------------------------------------------------------------------------
# periodic convolution on a grid of offsets


def _flat(a):
    return np.asarray(a).reshape(-1, order="F")


def _grid(a, n, d):
    return np.asarray(a).reshape((n,) * d, order="F")


class PeriodicConvolution:
    """``f -> sum_D w(D) f(. + D)`` on a periodic grid of ``n**d`` nodes.

    ``weights`` is indexed by wrapped offsets (``weights[D mod n]``) and must
    be symmetric, so correlation and convolution coincide.
    """

    def __init__(self, weights):
        w = np.asarray(weights, dtype=float)
        self.weights = w
        self.n = w.shape[0]
        self.d = w.ndim
        self._hat = np.fft.rfftn(w) if w.size > 1 else None

    @property
    def nodes(self):
        return self.n ** self.d

    def convolve(self, f):
        f = np.asarray(f, dtype=float)
        if self._hat is None:
            return f * self.weights.flat[0]
        axes = tuple(range(self.d))
        g = np.fft.irfftn(self._hat * np.fft.rfftn(_grid(f, self.n, self.d)), s=self.weights.shape, axes=axes)
        return _flat(g)

    def dense(self):
        """Dense ``nodes x nodes`` matrix of the operator (small grids only)."""
        n, d = self.n, self.d
        c = np.stack(np.unravel_index(np.arange(n ** d), (n,) * d, order="F"), axis=-1)
        delta = (c[None, :, :] - c[:, None, :]) % n
        return self.weights[tuple(delta[..., a] for a in range(d))]


def _symmetrize(w):
    """Average each entry with its reflected offset; exact bitwise symmetry."""
    ref = w
    for axis in range(w.ndim):
        ref = np.roll(np.flip(ref, axis=axis), 1, axis=axis)
    return (w + ref) / 2


def alias_table(p):
    """Vose alias table for the probability vector ``p``."""
    p = np.asarray(p, dtype=float)
    n = p.size
    scaled = p * (n / p.sum())
    q = np.zeros(n)
    alias = np.arange(n, dtype=np.int64)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s = small.pop()
        l = large.pop()
        q[s] = scaled[s]
        alias[s] = l
        scaled[l] = scaled[l] + scaled[s] - 1.0
        (small if scaled[l] < 1.0 else large).append(l)
    for i in large + small:
        q[i] = 1.0
    return q, alias


@dataclass(frozen=True)
class TargetSampler:
    """Arrays driving target selection in the compiled simulators.

    A target of site ``x`` is drawn by picking a block offset from the alias
    table, moving ``x``'s block by it and choosing a uniform site inside the
    destination block (blocks of ``block_side`` sites per axis).
    """

    offsets: np.ndarray
    q: np.ndarray
    alias: np.ndarray
    block_side: int
    blocks_per_side: int


def _sampler(offsets, probs, block_side, blocks_per_side):
    keep = probs > 0
    q, alias = alias_table(probs[keep])
    return TargetSampler(
        np.ascontiguousarray(offsets[keep], dtype=np.int64), q, alias, int(block_side), int(blocks_per_side)
    )


# ---------------------------------------------------------------------------
# microscopic kernel J_gamma


class MicroKernel:
    """``J_gamma`` as a table of nonzero lattice offsets and their weights."""

    def __init__(self, lattice, J, offsets, weights, a_gamma):
        self.lattice = lattice
        self.J = J
        self.offsets = offsets
        self.weights = weights
        self.a_gamma = a_gamma

    @property
    def R_gamma(self):
        return self.J.R / self.lattice.gamma

    @property
    def sup(self):
        """``sup_{x,y} J_gamma(x, y) / gamma^d``; the constant in the block bound."""
        return float(self.weights.max()) / self.lattice.gamma ** self.lattice.d

    @cached_property
    def _index(self):
        return {tuple(o): i for i, o in enumerate(self.offsets.tolist())}

    def __call__(self, x, y):
        o = tuple(int(v) for v in self.lattice.displacement(x, y))
        i = self._index.get(o)
        return 0.0 if i is None else float(self.weights[i])

    def row(self, x):
        out = np.zeros(self.lattice.site_count)
        c = self.lattice.coords(x)
        out[self.lattice.index(c + self.offsets)] = self.weights
        return out

    def dense(self):
        lat = self.lattice
        if lat.site_count > 4096:
            raise ConfigurationError("dense kernel requested on a large lattice")
        return np.stack([self.row(x) for x in range(lat.site_count)])

    @cached_property
    def sampler(self):
        return _sampler(self.offsets, self.weights, 1, self.lattice.side)


def _exact_unit_sum(w, mirror):
    """Nudge the largest mirror pair so ``math.fsum(w) == 1.0`` exactly."""
    w = w.copy()
    i = int(np.argmax(w))
    j = int(mirror[i])
    for _ in range(16):
        r = 1.0 - math.fsum(w)
        if r == 0.0:
            return w
        if i == j:
            w[i] += r
        else:
            w[i] += r / 2
            w[j] += r / 2
    raise NumericalError("could not normalise J_gamma rows to exactly one")


def build_J_gamma(lattice, J, R=None):
    """Microscopic kernel ``J_gamma`` on ``lattice`` from the macroscopic ``J``.

    ``R`` overrides nothing; it is accepted for symmetry with the kernel
    config and must agree with ``J.R`` when given.
    """
    if R is not None and not math.isclose(R, J.R):
        raise ConfigurationError(f"R={R} disagrees with kernel range {J.R}")
    if J.d != lattice.d:
        raise ConfigurationError(f"kernel dimension {J.d} != lattice dimension {lattice.d}")
    if J.R > lattice.L / 2:
        raise ConfigurationError(f"kernel range R={J.R} exceeds L/2={lattice.L / 2}")
    side, g = lattice.side, lattice.gamma
    m = int(math.floor(J.R / g))
    axis = np.arange(max(-m, -(side // 2) + 1), min(m, side // 2) + 1)
    offs = np.array(list(product(axis, repeat=lattice.d)), dtype=np.int64).reshape(-1, lattice.d)
    # axis 0 fastest, matching the flat site order
    offs = offs[:, ::-1]
    vals = J(offs * g)
    keep = (vals > 0) & np.any(offs != 0, axis=1)
    if not keep.any():
        raise ConfigurationError("J_gamma has an all-zero row (range shorter than gamma)")
    offs, vals = offs[keep], vals[keep]
    index = {tuple(o): i for i, o in enumerate(offs.tolist())}
    mirror = np.array([index[tuple(wrap(-o, side).tolist())] for o in offs])
    total = math.fsum(vals)
    weights = _exact_unit_sum(vals / total, mirror)
    a_gamma = 1.0 / (g ** lattice.d * total)
    return MicroKernel(lattice, J, offs, weights, a_gamma)


# ---------------------------------------------------------------------------
# block kernel A_gamma


class BlockKernel(PeriodicConvolution):
    """``A_gamma`` stored per block offset.

    ``mass[D] = N * A_gamma(C, C + D)`` is the probability that a target drawn
    from ``A_gamma(x, .)`` lands in the block at offset ``D``; ``values`` holds
    ``A_gamma`` itself.
    """

    def __init__(self, partition, J_gamma, mass):
        super().__init__(mass)
        self.partition = partition
        self.J_gamma = J_gamma
        self.mass = self.weights
        self.values = self.mass / partition.N

    @property
    def lattice(self):
        return self.partition.lattice

    @property
    def bound_constant(self):
        """``c`` in ``N A_gamma <= c xi^d`` for interacting blocks: ``a_gamma sup J``."""
        return self.J_gamma.sup

    def block_matrix(self):
        """``A_gamma(C, D)`` as a ``blocks x blocks`` matrix."""
        return self.dense() / self.partition.N

    def __call__(self, x, y):
        p = self.partition
        D = p.block_coords(p.block_of(y)) - p.block_coords(p.block_of(x))
        D = D % p.blocks_per_side
        return self.values[tuple(np.moveaxis(np.atleast_1d(D), -1, 0))]

    def dense(self, sites=False):
        if not sites:
            return super().dense()
        p = self.partition
        if self.lattice.site_count > 4096:
            raise ConfigurationError("dense kernel requested on a large lattice")
        B = super().dense() / p.N
        sb = p.site_block
        return B[np.ix_(sb, sb)]

    @cached_property
    def sampler(self):
        p = self.partition
        nb, d = p.blocks_per_side, p.lattice.d
        offs = np.stack(np.unravel_index(np.arange(nb ** d), (nb,) * d, order="F"), axis=-1)
        return _sampler(offs, _flat(self.mass), p.block_side, nb)


def _axis_split(o, b, nb):
    """For an axis offset ``o``: block shifts and how many of ``b`` sources hit each."""
    q, r = np.divmod(o, b)
    return (q % nb, b - r), ((q + 1) % nb, r)


def coarse_grain_A_gamma(J_gamma, partition):
    """Average ``J_gamma`` (zero diagonal) over all pairs of blocks."""
    if not isinstance(partition, BasicPartition) or partition.lattice != J_gamma.lattice:
        raise ConfigurationError("partition does not belong to the kernel's lattice")
    b, nb, d, N = partition.block_side, partition.blocks_per_side, partition.lattice.d, partition.N
    mass = np.zeros((nb,) * d)
    per_axis = [_axis_split(J_gamma.offsets[:, a], b, nb) for a in range(d)]
    for choice in product((0, 1), repeat=d):
        idx = tuple(per_axis[a][c][0] for a, c in enumerate(choice))
        count = np.prod([per_axis[a][c][1] for a, c in enumerate(choice)], axis=0)
        np.add.at(mass, idx, J_gamma.weights * count)
    mass = _symmetrize(mass / N)
    if abs(mass.sum() - 1.0) > 1e-12:
        raise NumericalError(f"A_gamma rows sum to {mass.sum()!r}")
    return BlockKernel(partition, J_gamma, mass)


# ---------------------------------------------------------------------------
# macroscopic block kernel A_xi


class XiKernel(PeriodicConvolution):
    """``A_xi`` per block offset; ``mass = xi^d A_xi`` acts on block-constant fields."""

    def __init__(self, J, L, n3, values, diagnostics):
        self.J = J
        self.L = L
        self.n3 = n3
        self.xi = L * 2.0 ** (-n3)
        self.values = values
        self.diagnostics = diagnostics
        super().__init__(values * self.xi ** J.d)
        self.mass = self.weights

    def __call__(self, C, D):
        nb = 2 ** self.n3
        delta = (np.asarray(D) - np.asarray(C)) % nb
        return self.values[tuple(np.atleast_1d(delta))]


def _gauss_panels(edges, order):
    x, w = np.polynomial.legendre.leggauss(order)
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        if b > a:
            nodes.append((b - a) / 2 * x + (a + b) / 2)
            weights.append((b - a) / 2 * w)
    return np.concatenate(nodes), np.concatenate(weights)


def _xi_entry(J, L, xi, delta, order):
    """``xi^-2d * int J(wrap u) prod_a tri(u_a - delta_a xi) du`` by tensor Gauss panels."""
    axes = []
    for a in range(J.d):
        c = delta[a] * xi
        edges = {c - xi, c, c + xi}
        if J.d == 1:
            # kernel discontinuities and kinks, in every periodic image
            for r in (0.0,) + J.breakpoints:
                for s in (-1, 1):
                    for m in range(-2, 3):
                        u = s * r + m * L
                        if c - xi < u < c + xi:
                            edges.add(u)
        x, w = _gauss_panels(sorted(edges), order)
        axes.append((x, w * np.maximum(xi - np.abs(x - c), 0.0)))
    grids = np.meshgrid(*[x for x, _ in axes], indexing="ij")
    u = np.stack(grids, axis=-1)
    u = u - L * np.round(u / L)
    wts = np.ones(())
    for _, w in axes:
        wts = np.multiply.outer(wts, w)
    return float((J(u) * wts).sum()) / xi ** (2 * J.d)


def coarse_grain_A_xi(J, n3, L=1, tol=1e-8, max_order=256):
    """Block average of ``J`` over pairs of macroscopic cubes of side ``xi = L 2^-n3``.

    Each entry is reduced to a ``d``-dimensional integral against the
    autocorrelation of the block indicator and evaluated with Gauss-Legendre
    panels, doubling the order until successive values change by less than
    ``tol``.
    """
    if J.R > L / 2:
        raise ConfigurationError(f"kernel range R={J.R} exceeds L/2={L / 2}")
    xi, nb, d = L * 2.0 ** (-n3), 2 ** n3, J.d
    values = np.zeros((nb,) * d)
    worst = 0.0
    for idx in product(range(nb), repeat=d):
        delta = wrap(np.array(idx), nb)
        if np.sqrt((np.maximum(np.abs(delta) - 1, 0) ** 2).sum()) * xi > J.R:
            continue
        order, prev = 8, _xi_entry(J, L, xi, delta, 8)
        while True:
            order *= 2
            cur = _xi_entry(J, L, xi, delta, order)
            change = abs(cur - prev)
            prev = cur
            if change < tol:
                break
            if order >= max_order:
                raise NumericalError(
                    "A_xi quadrature did not converge",
                    diagnostics={"offset": tuple(idx), "order": order, "change": change},
                )
        worst = max(worst, change)
        values[idx] = cur
    values = _symmetrize(values)
    total = values.sum() * xi ** d
    if abs(total - 1.0) > 1e-7:
        raise NumericalError(f"A_xi mass {total!r} differs from one", diagnostics={"mass": total})
    return XiKernel(J, L, n3, values, {"max_change": worst, "mass": total})


@dataclass(frozen=True)
class KernelSet:
    J: Kernel
    J_gamma: MicroKernel
    A_gamma: BlockKernel
    A_xi: XiKernel
    lambda_star: float


def build_kernel_set(lattice, partition, J, lambda_star):
    if lambda_star < 0:
        raise ConfigurationError(f"lambda_star must be nonnegative, got {lambda_star}")
    Jg = build_J_gamma(lattice, J)
    return KernelSet(J, Jg, coarse_grain_A_gamma(Jg, partition), coarse_grain_A_xi(J, partition.n3, lattice.L),
                     float(lambda_star))
