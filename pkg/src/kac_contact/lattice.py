"""Discrete torus geometry and the block partition.

Sites of the torus ``{0, ..., side-1}^d`` are stored in flat order with the
first axis varying fastest, so ``x = sum_a x_a * side**a``.
"""
import sys
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class TorusLattice:
    """Microscopic torus of spacing ``gamma = 2**-n1`` and macroscopic side ``L``."""

    d: int
    L: int
    n1: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ConfigurationError(f"dimension d must be 1, 2 or 3, got {self.d!r}")
        if not isinstance(self.L, (int, np.integer)) or self.L < 1:
            raise ConfigurationError(f"L must be a positive integer, got {self.L!r}")
        if not isinstance(self.n1, (int, np.integer)) or self.n1 < 1:
            raise ConfigurationError(f"n1 must be a positive integer, got {self.n1!r}")
        if self.side ** self.d > sys.maxsize:
            raise ConfigurationError(
                f"site count ({self.side}^{self.d}) exceeds the addressable range"
            )

    @property
    def gamma(self):
        return 2.0 ** (-self.n1)

    @property
    def side(self):
        """Number of sites along each axis, ``L / gamma``."""
        return self.L * 2 ** self.n1

    @property
    def site_count(self):
        return self.side ** self.d

    @cached_property
    def strides(self):
        return np.array([self.side ** a for a in range(self.d)], dtype=np.int64)

    def coords(self, x):
        """Integer coordinates of flat site index ``x`` (scalar or array)."""
        x = np.asarray(x, dtype=np.int64)
        return (x[..., None] // self.strides) % self.side

    def index(self, coords):
        c = np.asarray(coords, dtype=np.int64) % self.side
        return (c * self.strides).sum(axis=-1)

    def positions(self):
        """Macroscopic positions ``gamma * x`` of all sites, shape ``(sites, d)``."""
        return self.coords(np.arange(self.site_count)) * self.gamma

    def displacement(self, x, y):
        """Minimum-image displacement ``y - x`` in lattice units."""
        delta = self.coords(y) - self.coords(x)
        return wrap(delta, self.side)

    def distance(self, x, y):
        """Euclidean torus distance in lattice units."""
        return np.sqrt((self.displacement(x, y) ** 2).sum(axis=-1))


def wrap(delta, side):
    """Map integer offsets into the minimum-image range ``(-side/2, side/2]``."""
    delta = np.asarray(delta) % side
    return np.where(delta > side // 2, delta - side, delta)


@dataclass(frozen=True)
class BasicPartition:
    """Tiling of the torus into cubes of side ``xi = L * 2**-n3``.

    Each block holds ``N = (xi / gamma)**d`` sites. Blocks are indexed like
    sites, on a torus of ``blocks_per_side = 2**n3`` blocks per axis.
    """

    lattice: TorusLattice
    n3: int
    block_side: int = field(init=False)

    def __post_init__(self):
        lat = self.lattice
        if not isinstance(self.n3, (int, np.integer)) or self.n3 < 0:
            raise ConfigurationError(f"n3 must be a nonnegative integer, got {self.n3!r}")
        # xi / gamma = L * 2**(n1 - n3) must be a positive integer
        shift = lat.n1 - self.n3
        if shift >= 0:
            b = lat.L * 2 ** shift
        elif lat.L % 2 ** (-shift) == 0:
            b = lat.L // 2 ** (-shift)
        else:
            raise ConfigurationError(
                f"xi = L*2^-{self.n3} is smaller than gamma or not a multiple of it"
            )
        object.__setattr__(self, "block_side", int(b))

    @property
    def xi(self):
        return self.lattice.L * 2.0 ** (-self.n3)

    @property
    def blocks_per_side(self):
        return 2 ** self.n3

    @property
    def block_count(self):
        return self.blocks_per_side ** self.lattice.d

    @property
    def N(self):
        return self.block_side ** self.lattice.d

    @cached_property
    def block_strides(self):
        return np.array([self.blocks_per_side ** a for a in range(self.lattice.d)], dtype=np.int64)

    @cached_property
    def site_block(self):
        """Block index of every site (read-only array)."""
        c = self.lattice.coords(np.arange(self.lattice.site_count))
        out = ((c // self.block_side) * self.block_strides).sum(axis=-1)
        out.flags.writeable = False
        return out

    def block_of(self, x):
        return self.site_block[x]

    def block_coords(self, C):
        C = np.asarray(C, dtype=np.int64)
        return (C[..., None] // self.block_strides) % self.blocks_per_side

    def block_index(self, coords):
        c = np.asarray(coords, dtype=np.int64) % self.blocks_per_side
        return (c * self.block_strides).sum(axis=-1)

    def block_sites(self, C):
        """Flat site indices of block ``C``, in increasing order."""
        return np.flatnonzero(self.site_block == C)

    def block_centers(self):
        """Macroscopic centres of all blocks, shape ``(blocks, d)``."""
        c = self.block_coords(np.arange(self.block_count))
        return (c + 0.5) * self.xi


def build_lattice(d, L, n1):
    return TorusLattice(d=d, L=L, n1=n1)


def build_partition(lattice, n3):
    return BasicPartition(lattice=lattice, n3=n3)
