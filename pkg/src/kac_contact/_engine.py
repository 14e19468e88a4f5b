"""Compiled event loops.

All functions take a ``numpy.random.Generator`` and advance it in place, so
a trajectory is a pure function of the generator's seed. The loops release
the GIL and can run in worker threads.
"""
import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def draw_target(x, side, d, off, q, alias, b, nb, rng):
    """Target site for a source at ``x``: alias-sampled block offset + uniform site."""
    j = rng.integers(0, q.shape[0])
    if rng.random() >= q[j]:
        j = alias[j]
    y = 0
    stride = 1
    for a in range(d):
        xa = (x // stride) % side
        tb = (xa // b + off[j, a]) % nb
        ya = tb * b
        if b > 1:
            ya += rng.integers(0, b)
        y += ya * stride
        stride *= side
    return y


@njit(**_JIT)
def contact_run(U, k, lam, t0, times, side, d, off, q, alias, b, nb, rng, snaps):
    """Composition-method simulation of the generalized contact process.

    Every level-``k`` site fires at total rate ``1 + lam``: a reset with
    probability ``1/(1+lam)``, otherwise an infection attempt on a target
    drawn from the kernel row, starting at time ``t0``. ``snaps[i]``
    receives the state at ``times[i]``. Returns the number of clock rings processed.
    """
    n = U.shape[0]
    tlist = np.empty(n, np.int64)
    tpos = np.full(n, -1, np.int64)
    nk = 0
    for x in range(n):
        if U[x] == k:
            tpos[x] = nk
            tlist[nk] = x
            nk += 1
    t = t0
    it = 0
    nt = times.shape[0]
    rings = 0
    while it < nt:
        if nk == 0:
            while it < nt:
                snaps[it, :] = U
                it += 1
            break
        t_next = t + rng.exponential(1.0 / (nk * (1.0 + lam)))
        while it < nt and times[it] < t_next:
            snaps[it, :] = U
            it += 1
        if it >= nt:
            break
        t = t_next
        i = rng.integers(0, nk)
        x = tlist[i]
        if rng.random() * (1.0 + lam) < 1.0:
            U[x] = 0
            last = tlist[nk - 1]
            tlist[i] = last
            tpos[last] = i
            tpos[x] = -1
            nk -= 1
        else:
            y = draw_target(x, side, d, off, q, alias, b, nb, rng)
            if U[y] < k:
                U[y] += 1
                if U[y] == k:
                    tlist[nk] = y
                    tpos[y] = nk
                    nk += 1
        rings += 1
    return rings


@njit(**_JIT)
def _move(x, j, U, lists, counts, pos):
    i = U[x]
    p = pos[x]
    last = lists[i, counts[i] - 1]
    lists[i, p] = last
    pos[last] = p
    counts[i] -= 1
    lists[j, counts[j]] = x
    pos[x] = counts[j]
    counts[j] += 1
    U[x] = j


@njit(**_JIT)
def general_run(U, S, t0, times, side, d, ch_start, ch_kind, ch_rate, ch_from, ch_to, ch_aux,
                koff, kq, kalias, kstart, kb, knb, gacc, rng, snaps):
    """Composition-method simulation of the general finite-state model.

    Channels are grouped by the state of the site that carries the clock.
    An interaction channel (kind 0) fires at rate ``ch_rate`` per source
    site, draws a target ``x`` from kernel ``ch_aux`` and moves it
    ``ch_from -> ch_to`` when ``U[x] == ch_from``. An intrinsic channel
    (kind 1) moves the source itself with acceptance ``gacc[ch_aux, y]``
    (thinning of a spatially varying rate).
    """
    n = U.shape[0]
    lists = np.empty((S, n), np.int64)
    counts = np.zeros(S, np.int64)
    pos = np.empty(n, np.int64)
    for x in range(n):
        s = U[x]
        lists[s, counts[s]] = x
        pos[x] = counts[s]
        counts[s] += 1
    src_rate = np.zeros(S)
    for s in range(S):
        for c in range(ch_start[s], ch_start[s + 1]):
            src_rate[s] += ch_rate[c]
    t = t0
    it = 0
    nt = times.shape[0]
    rings = 0
    while it < nt:
        total = 0.0
        for s in range(S):
            total += counts[s] * src_rate[s]
        if total <= 0.0:
            while it < nt:
                snaps[it, :] = U
                it += 1
            break
        t_next = t + rng.exponential(1.0 / total)
        while it < nt and times[it] < t_next:
            snaps[it, :] = U
            it += 1
        if it >= nt:
            break
        t = t_next
        u = rng.random() * total
        s = 0
        acc = counts[0] * src_rate[0]
        while u >= acc and s < S - 1:
            s += 1
            acc += counts[s] * src_rate[s]
        while counts[s] == 0 or src_rate[s] == 0.0:
            s -= 1
        y = lists[s, rng.integers(0, counts[s])]
        v = rng.random() * src_rate[s]
        c = ch_start[s]
        acc = ch_rate[c]
        while v >= acc and c < ch_start[s + 1] - 1:
            c += 1
            acc += ch_rate[c]
        if ch_kind[c] == 0:
            kid = ch_aux[c]
            k0 = kstart[kid]
            k1 = kstart[kid + 1]
            x = draw_target(y, side, d, koff[k0:k1], kq[k0:k1], kalias[k0:k1], kb[kid], knb[kid], rng)
            if x != y and U[x] == ch_from[c]:
                _move(x, ch_to[c], U, lists, counts, pos)
        else:
            if rng.random() < gacc[ch_aux[c], y]:
                _move(y, ch_to[c], U, lists, counts, pos)
        rings += 1
    return rings


@njit(**_JIT)
def _site_in_block(C, local, nb, b, side, d):
    y = 0
    stride = 1
    bstride = 1
    for a in range(d):
        ca = (C // bstride) % nb
        la = (local // (b ** a)) % b
        y += (ca * b + la) * stride
        stride *= side
        bstride *= nb
    return y


@njit(**_JIT)
def window_sample(lam, delta, t0, n_blocks, N, b, nb, side, d, boff, bmass, rng):
    """Poisson arrows and marks on ``[t0, t0 + delta)`` for the block kernel.

    For every ordered block pair the number of arrows is Poisson with mean
    ``lam * delta * A * (#ordered site pairs, x != y)``; endpoints are then
    uniform among admissible pairs. Marks are Poisson(delta) per site.
    """
    n_off = boff.shape[0]
    counts = np.empty((n_blocks, n_off), np.int64)
    total = 0
    for C in range(n_blocks):
        for o in range(n_off):
            same = True
            for a in range(d):
                if boff[o, a] % nb != 0:
                    same = False
            pairs = N * (N - 1) if same else N * N
            mean = lam * delta * (bmass[o] / N) * pairs
            c = rng.poisson(mean) if mean > 0.0 else 0
            counts[C, o] = c
            total += c
    src = np.empty(total, np.int64)
    dst = np.empty(total, np.int64)
    atime = np.empty(total)
    m = 0
    for C in range(n_blocks):
        for o in range(n_off):
            if counts[C, o] == 0:
                continue
            D = 0
            bstride = 1
            for a in range(d):
                ca = (C // bstride) % nb
                D += ((ca + boff[o, a]) % nb) * bstride
                bstride *= nb
            for _ in range(counts[C, o]):
                lx = rng.integers(0, N)
                if D == C:
                    ly = rng.integers(0, N - 1)
                    if ly >= lx:
                        ly += 1
                else:
                    ly = rng.integers(0, N)
                src[m] = _site_in_block(C, lx, nb, b, side, d)
                dst[m] = _site_in_block(D, ly, nb, b, side, d)
                atime[m] = t0 + delta * rng.random()
                m += 1
    n_sites = side ** d
    n_marks = rng.poisson(delta * n_sites)
    msite = np.empty(n_marks, np.int64)
    mtime = np.empty(n_marks)
    for i in range(n_marks):
        msite[i] = rng.integers(0, n_sites)
        mtime[i] = t0 + delta * rng.random()
    return src, dst, atime, msite, mtime


@njit(**_JIT)
def window_replay(U, k, src, dst, atime, msite, mtime, site_block, M_CDi, M_D):
    """Apply the window's clock rings in time order, counting effective ones."""
    na = src.shape[0]
    times = np.concatenate((atime, mtime))
    order = np.argsort(times, kind="mergesort")
    for e in order:
        if e < na:
            x = src[e]
            y = dst[e]
            if U[x] == k and U[y] < k:
                M_CDi[site_block[x], site_block[y], U[y]] += 1
                U[y] += 1
        else:
            x = msite[e - na]
            if U[x] == k:
                U[x] = 0
                M_D[site_block[x]] += 1


@njit(**_JIT)
def windows_run(U, k, lam, delta, t0, n_windows, n_blocks, N, b, nb, side, d, boff, bmass,
                site_block, rng, snaps):
    """Compose ``n_windows`` sampled windows; ``snaps[w]`` is the state after window ``w``."""
    M = np.zeros((n_blocks, n_blocks, max(k, 1)), np.int64)
    MD = np.zeros(n_blocks, np.int64)
    for w in range(n_windows):
        src, dst, atime, msite, mtime = window_sample(
            lam, delta, t0 + w * delta, n_blocks, N, b, nb, side, d, boff, bmass, rng)
        window_replay(U, k, src, dst, atime, msite, mtime, site_block, M, MD)
        snaps[w, :] = U
