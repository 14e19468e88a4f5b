import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from kac_contact import _engine
from kac_contact.errors import ConfigurationError, NumericalError
from kac_contact.kernels import (
    PeriodicConvolution,
    alias_table,
    build_J_gamma,
    build_kernel_set,
    coarse_grain_A_gamma,
    coarse_grain_A_xi,
    make_kernel,
    smooth_bump_kernel,
    tabulated_kernel,
    uniform_kernel,
)
from kac_contact.lattice import build_lattice, build_partition

from oracles import brute_block_average, dense_block_average


# ---------------------------------------------------------------------------
# macroscopic kernels


@pytest.mark.parametrize("make", [uniform_kernel, smooth_bump_kernel])
def test_kernel_is_a_probability_density_1d(make):
    J = make(0.3, 1)
    val, _ = integrate.quad(lambda r: J(np.array([r]))[()], -0.3, 0.3, points=[0.0], epsabs=1e-13)
    assert val == pytest.approx(1.0, abs=1e-9)


def test_smooth_bump_is_a_probability_density_2d():
    J = smooth_bump_kernel(0.25, 2)
    val, _ = integrate.dblquad(lambda y, x: float(J(np.array([x, y]))), -0.25, 0.25, -0.25, 0.25,
                               epsabs=1e-11)
    assert val == pytest.approx(1.0, abs=1e-7)


def test_uniform_kernel_height():
    assert uniform_kernel(0.25, 1).sup == pytest.approx(2.0)
    assert uniform_kernel(0.25, 2).sup == pytest.approx(1 / (math.pi * 0.0625))


def test_tabulated_kernel_from_file(tmp_path):
    path = tmp_path / "tent.txt"
    path.write_text("0.0 1.0\n0.1 0.5\n0.2 0.0\n")
    J = tabulated_kernel(str(path), 1)
    assert J.R == pytest.approx(0.2)
    # tent of area 2 * (0.1 * 0.75 + 0.1 * 0.25) = 0.2
    assert J.radial(0.05) == pytest.approx(0.75 / 0.2)
    assert J.radial(0.25) == 0.0
    assert make_kernel("tabulated", d=1, table=str(path)).radial(0.0) == pytest.approx(5.0)


@pytest.mark.parametrize("rows", [[[0.0, 1.0]], [[0.0, -1.0], [0.1, 0.0]], [[0.0, 0.0], [0.1, 0.0]]])
def test_bad_tables_rejected(rows):
    with pytest.raises(ConfigurationError):
        tabulated_kernel(np.array(rows))


def test_unknown_kernel_kind():
    with pytest.raises(ConfigurationError):
        make_kernel("gaussian", 0.2)


# ---------------------------------------------------------------------------
# microscopic kernel


def test_uniform_J_gamma_is_uniform_over_neighbours():
    lat = build_lattice(1, 1, 6)
    Jg = build_J_gamma(lat, uniform_kernel(0.25, 1))
    # every offset 1..16 on both sides
    assert len(Jg.weights) == 32
    assert np.all(Jg.weights == Jg.weights[0])
    assert Jg.weights[0] == pytest.approx(1 / 32, rel=1e-15)


lattices = st.sampled_from([(1, n1) for n1 in range(3, 10)] + [(2, n1) for n1 in range(3, 6)])
kernels = st.tuples(st.sampled_from(["uniform", "smooth_bump"]), st.floats(0.13, 0.5))


@given(lattices, kernels)
def test_J_gamma_rows_exactly_normalised(lat_spec, kern_spec):
    d, n1 = lat_spec
    lat = build_lattice(d, 1, n1)
    J = make_kernel(kern_spec[0], kern_spec[1], d)
    Jg = build_J_gamma(lat, J)
    assert math.fsum(Jg.weights) == 1.0
    assert not np.any(np.all(Jg.offsets == 0, axis=1))
    assert np.all(Jg.weights > 0)
    # support within R_gamma
    assert np.sqrt((Jg.offsets.astype(float) ** 2).sum(axis=1)).max() <= Jg.R_gamma + 1e-9


def test_J_gamma_dense_rows_symmetric_and_zero_outside_range():
    lat = build_lattice(2, 1, 3)
    Jg = build_J_gamma(lat, smooth_bump_kernel(0.4, 2))
    M = Jg.dense()
    assert np.array_equal(M, M.T)
    assert np.all(np.diag(M) == 0)
    assert np.allclose(M.sum(axis=1), 1.0, atol=1e-15)
    far = lat.distance(np.arange(lat.site_count)[:, None], np.arange(lat.site_count)[None, :]) > Jg.R_gamma
    assert np.all(M[far] == 0)
    assert Jg(0, 1) == M[0, 1] and Jg(0, 0) == 0.0


def test_J_gamma_errors():
    lat = build_lattice(1, 1, 3)
    with pytest.raises(ConfigurationError):
        build_J_gamma(lat, uniform_kernel(0.6, 1))
    with pytest.raises(ConfigurationError):
        build_J_gamma(lat, uniform_kernel(0.1, 1))  # range below one lattice step
    with pytest.raises(ConfigurationError):
        build_J_gamma(lat, uniform_kernel(0.25, 1), R=0.3)
    with pytest.raises(ConfigurationError):
        build_J_gamma(lat, uniform_kernel(0.25, 2))


# ---------------------------------------------------------------------------
# block kernel A_gamma


small_cases = [(1, 4, 2, "smooth_bump", 0.3), (1, 5, 1, "uniform", 0.2), (2, 3, 1, "smooth_bump", 0.3),
               (2, 3, 2, "uniform", 0.4), (1, 3, 3, "smooth_bump", 0.25)]


@pytest.mark.parametrize("d, n1, n3, kind, R", small_cases)
def test_A_gamma_matches_brute_force_average(d, n1, n3, kind, R):
    lat = build_lattice(d, 1, n1)
    part = build_partition(lat, n3)
    Jg = build_J_gamma(lat, make_kernel(kind, R, d))
    A = coarse_grain_A_gamma(Jg, part)
    ref = brute_block_average(Jg.dense(), part.site_block, part.block_count)
    assert np.allclose(A.block_matrix(), ref, rtol=0, atol=1e-15)
    # pointwise evaluation agrees with the block matrix
    x, y = 1, lat.site_count - 2
    assert A(x, y) == pytest.approx(ref[part.block_of(x), part.block_of(y)], abs=1e-15)


@pytest.mark.parametrize("d, n1, n3, kind, R", small_cases)
def test_A_gamma_structure(d, n1, n3, kind, R):
    lat = build_lattice(d, 1, n1)
    part = build_partition(lat, n3)
    Jg = build_J_gamma(lat, make_kernel(kind, R, d))
    A = coarse_grain_A_gamma(Jg, part)
    B = A.block_matrix()
    assert np.array_equal(B, B.T)
    dense = A.dense(sites=True)
    assert np.all(np.abs(dense.sum(axis=1) - 1.0) <= 1e-12)
    sb = part.site_block
    assert np.array_equal(dense, B[np.ix_(sb, sb)])
    # zero exactly where no site pair interacts
    J_dense = Jg.dense()
    for C in range(part.block_count):
        for D in range(part.block_count):
            touching = J_dense[np.ix_(part.block_sites(C), part.block_sites(D))].max() > 0
            assert (B[C, D] > 0) == touching


def test_A_gamma_of_single_site_blocks_is_J_gamma():
    lat = build_lattice(1, 1, 4)
    part = build_partition(lat, 4)
    Jg = build_J_gamma(lat, smooth_bump_kernel(0.3, 1))
    A = coarse_grain_A_gamma(Jg, part)
    assert np.allclose(A.dense(sites=True), Jg.dense(), rtol=0, atol=1e-16)


def test_A_gamma_bound_with_lattice_normalisation():
    """``N A_gamma <= a_gamma sup J xi^d`` holds on every block pair, for every configuration."""
    for kind in ("smooth_bump", "uniform"):
        for d in (1, 2):
            J = make_kernel(kind, 0.25, d)
            for n1 in range(3, 9 if d == 1 else 7):
                lat = build_lattice(d, 1, n1)
                Jg = build_J_gamma(lat, J)
                for n3 in range(0, min(3, n1) + 1):
                    part = build_partition(lat, n3)
                    A = coarse_grain_A_gamma(Jg, part)
                    c = Jg.a_gamma * J.sup
                    assert A.bound_constant == pytest.approx(c, rel=1e-12) or A.bound_constant <= c
                    assert A.mass.max() <= c * part.xi ** d * (1 + 1e-10)


def test_lattice_normalisation_only_misses_the_diagonal():
    J = smooth_bump_kernel(0.25, 1)
    for n1 in (8, 10):
        g = 2.0 ** -n1
        a = build_J_gamma(build_lattice(1, 1, n1), J).a_gamma
        # the excluded diagonal is the only O(gamma) defect of the Riemann sum
        assert a == pytest.approx(1 / (1 - g * J.sup), abs=1e-9)


def test_partition_from_other_lattice_rejected():
    Jg = build_J_gamma(build_lattice(1, 1, 4), uniform_kernel(0.25))
    with pytest.raises(ConfigurationError):
        coarse_grain_A_gamma(Jg, build_partition(build_lattice(1, 1, 5), 2))


def _target_frequencies(sampler, x, lat, n, seed):
    gen = np.random.default_rng(seed)
    s = sampler
    out = np.empty(n, np.int64)
    for m in range(n):
        out[m] = _engine.draw_target(x, lat.side, lat.d, s.offsets, s.q, s.alias, s.block_side,
                                     s.blocks_per_side, gen)
    return np.bincount(out, minlength=lat.site_count)


def test_alias_table_reproduces_probabilities():
    p = np.array([0.5, 0.1, 0.0, 0.25, 0.15])
    q, alias = alias_table(p)
    n = len(p)
    recon = q / n
    np.add.at(recon, alias, (1 - q) / n)
    assert np.allclose(recon, p, atol=1e-15)


@pytest.mark.parametrize("use_blocks", [False, True])
def test_target_sampler_law(use_blocks):
    lat = build_lattice(1, 1, 4)
    part = build_partition(lat, 2)
    Jg = build_J_gamma(lat, smooth_bump_kernel(0.3, 1))
    kern = coarse_grain_A_gamma(Jg, part) if use_blocks else Jg
    row = kern.dense(sites=True)[5] if use_blocks else Jg.row(5)
    n = 100_000
    counts = _target_frequencies(kern.sampler, 5, lat, n, 11)
    if not use_blocks:
        assert counts[5] == 0
    keep = row > 0
    assert counts[~keep].sum() == 0
    p = stats.chisquare(counts[keep], row[keep] / row[keep].sum() * n).pvalue
    assert p > 1e-3


# ---------------------------------------------------------------------------
# periodic convolution and A_xi


def test_periodic_convolution_dense_agrees(rng):
    w = rng.random((8, 8))
    w = (w + np.roll(np.flip(np.roll(np.flip(w, 0), 1, 0), 1), 1, 1)) / 2
    conv = PeriodicConvolution(w)
    f = rng.random(64)
    assert np.allclose(conv.convolve(f), conv.dense() @ f, atol=1e-13)


def test_A_xi_equals_J_on_block_pairs_where_J_is_constant():
    J = uniform_kernel(0.375, 1)
    A = coarse_grain_A_xi(J, 3)
    # blocks of side 1/8 at offsets 0, 1, 2 lie entirely within the range
    for D in (0, 1, 2, 6, 7):
        assert A(0, D) == pytest.approx(J.sup, abs=1e-8)
    assert A(0, 4) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("n3", [2, 3, 4])
def test_A_xi_matches_dense_average(n3):
    J = smooth_bump_kernel(0.25, 1)
    A = coarse_grain_A_xi(J, n3)
    nb = 2 ** n3
    for D in range(nb):
        ref = dense_block_average(J, 1.0, 1.0 / nb, 0, D, m=400)
        assert A(0, D) == pytest.approx(ref, abs=2e-5 * J.sup)


def test_A_xi_symmetric_normalised():
    for d, n3 in ((1, 4), (2, 2)):
        A = coarse_grain_A_xi(smooth_bump_kernel(0.25, d), n3)
        assert abs(A.mass.sum() - 1.0) < 1e-7
        B = A.dense()
        assert np.array_equal(B, B.T)


def _sup_gap(J, n3, m=2048):
    """``sup |A_xi(r, r') - J(r, r')|`` over a dense set of point pairs (1D)."""
    A = coarse_grain_A_xi(J, n3)
    nb = 2 ** n3
    r = (np.arange(m) + 0.5) / m
    rp = r[::8]
    diff = r[None, :] - rp[:, None]
    diff -= np.round(diff)
    blk = ((r[None, :] * nb).astype(int) - (rp[:, None] * nb).astype(int)) % nb
    return float(np.abs(A.values[blk] - J(diff[..., None])).max())


def test_A_xi_gap_shrinks_and_halves():
    J = smooth_bump_kernel(0.25, 1)
    gaps = [_sup_gap(J, n3) for n3 in range(2, 7)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert 1.5 <= gaps[-2] / gaps[-1] <= 2.5


def test_A_xi_pointwise_limit():
    J = smooth_bump_kernel(0.25, 1)
    r, rp = 0.3, 0.41
    vals = []
    for n3 in (3, 5, 7):
        nb = 2 ** n3
        vals.append(abs(coarse_grain_A_xi(J, n3)(int(r * nb), int(rp * nb)) - float(J(np.array([rp - r])))))
    assert vals[-1] < vals[0] and vals[-1] < 0.05 * J.sup


def test_A_xi_quadrature_failure_reports_diagnostics():
    with pytest.raises(NumericalError) as exc:
        coarse_grain_A_xi(smooth_bump_kernel(0.25, 1), 2, max_order=8)
    assert "offset" in exc.value.diagnostics and "change" in exc.value.diagnostics


def test_A_xi_range_check():
    with pytest.raises(ConfigurationError):
        coarse_grain_A_xi(uniform_kernel(0.6, 1), 2)


def test_kernel_set_bundles_all_kernels():
    lat = build_lattice(1, 1, 6)
    ks = build_kernel_set(lat, build_partition(lat, 2), smooth_bump_kernel(0.25), 2.0)
    assert ks.A_gamma.partition.N == 16 and ks.A_xi.n3 == 2 and ks.lambda_star == 2.0
    with pytest.raises(ConfigurationError):
        build_kernel_set(lat, build_partition(lat, 2), smooth_bump_kernel(0.25), -1.0)
