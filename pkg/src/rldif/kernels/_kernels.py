"""Kernel bodies: plain numpy code written in nopython-compatible style.

Each function is self-contained (no cross-function calls) so numba can
compile it directly and the uncompiled version runs identically under
CPython. Keep the arithmetic order fixed: tests assert backend equality.
"""

import numpy as np


def tm_search(xa, xb, d0, d0_cut, max_iter):
    """Best template-modeling score superposing xa onto xb (one direction).

    Seeds come from least-squares superpositions on the full chain and on
    contiguous fragments of lengths L, L/2, L/4 at every start offset with
    stride max(L // 8, 1); each seed is refined by re-superposing on the
    residues closer than d0_cut and rescoring until the included set is
    stable. Score normalizes by the common length L.
    """
    L = xa.shape[0]
    d0sq = d0 * d0
    best = 0.0

    frag_lens = np.empty(3, dtype=np.int64)
    frag_lens[0] = L
    frag_lens[1] = max(L // 2, 3)
    frag_lens[2] = max(L // 4, 3)
    stride = max(L // 8, 1)

    include = np.zeros(L, dtype=np.bool_)
    prev_include = np.zeros(L, dtype=np.bool_)

    for fi in range(3):
        flen = frag_lens[fi]
        if flen > L:
            continue
        start = 0
        while start + flen <= L:
            include[:] = False
            include[start : start + flen] = True

            for _ in range(max_iter):
                n_inc = 0
                for i in range(L):
                    if include[i]:
                        n_inc += 1
                if n_inc < 3:
                    break

                # Kabsch on the included subset
                ca = np.zeros(3)
                cb = np.zeros(3)
                for i in range(L):
                    if include[i]:
                        ca += xa[i]
                        cb += xb[i]
                ca /= n_inc
                cb /= n_inc
                cov = np.zeros((3, 3))
                for i in range(L):
                    if include[i]:
                        cov += np.outer(xa[i] - ca, xb[i] - cb)
                u, s, vt = np.linalg.svd(cov)
                if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
                    u[:, 2] = -u[:, 2]
                rot = u @ vt  # xa-frame -> xb-frame

                # rescore over all residues
                score = 0.0
                for i in range(L):
                    moved = (xa[i] - ca) @ rot + cb
                    diff = moved - xb[i]
                    dsq = diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]
                    score += 1.0 / (1.0 + dsq / d0sq)
                    prev_include[i] = include[i]
                    include[i] = dsq < d0_cut * d0_cut
                score /= L
                if score > best:
                    best = score

                stable = True
                for i in range(L):
                    if include[i] != prev_include[i]:
                        stable = False
                        break
                if stable:
                    break

            if flen == L:
                break
            start += stride
    return best


def nw_fill(a, b):
    """Global-alignment DP matrix: match +1, mismatch 0, gap 0 (loops)."""
    n = a.shape[0]
    m = b.shape[0]
    h = np.zeros((n + 1, m + 1), dtype=np.int32)
    for i in range(1, n + 1):
        ai = a[i - 1]
        for j in range(1, m + 1):
            diag = h[i - 1, j - 1]
            if ai == b[j - 1]:
                diag += 1
            up = h[i - 1, j]
            left = h[i, j - 1]
            m3 = diag
            if up > m3:
                m3 = up
            if left > m3:
                m3 = left
            h[i, j] = m3
    return h


def nw_fill_numpy(a, b):
    """Same DP matrix, row-vectorized.

    With a zero gap penalty the in-row dependency h[i, j-1] reduces to a
    running maximum, so each row is one maximum.accumulate.
    """
    n = a.shape[0]
    h = np.zeros((n + 1, b.shape[0] + 1), dtype=np.int32)
    for i in range(1, n + 1):
        match = (b == a[i - 1]).astype(np.int32)
        cand = np.maximum(h[i - 1, :-1] + match, h[i - 1, 1:])
        h[i, 1:] = np.maximum.accumulate(cand)
    return h


def toy_chain(turns, torsions):
    """CA trace from per-residue turn/torsion angles (radians).

    Extended-chain start with 3.8 A spacing; atom i >= 2 is placed from the
    previous three positions with bond angle turns[i] and dihedral
    torsions[i] (torsion unused at i = 2, where the chain is planar).
    """
    n = turns.shape[0]
    bond = 3.8
    ca = np.zeros((n, 3))
    if n > 1:
        ca[1, 0] = bond
    for i in range(2, n):
        c = ca[i - 1]
        b = ca[i - 2]
        if i == 2:
            a = np.zeros(3)
            a[0] = b[0] - 1.0
            a[1] = b[1] - 1.0  # off-axis virtual anchor fixes the plane
            torsion = 0.0
        else:
            a = ca[i - 3]
            torsion = torsions[i]
        theta = turns[i]

        bc = c - b
        bc = bc / np.sqrt(bc[0] * bc[0] + bc[1] * bc[1] + bc[2] * bc[2])
        ab = b - a
        nvec = np.cross(ab, bc)
        nn = np.sqrt(nvec[0] * nvec[0] + nvec[1] * nvec[1] + nvec[2] * nvec[2])
        nvec = nvec / nn
        mvec = np.cross(nvec, bc)
        d0 = -bond * np.cos(theta)
        d1 = bond * np.sin(theta) * np.cos(torsion)
        d2 = bond * np.sin(theta) * np.sin(torsion)
        ca[i, 0] = c[0] + d0 * bc[0] + d1 * mvec[0] + d2 * nvec[0]
        ca[i, 1] = c[1] + d0 * bc[1] + d1 * mvec[1] + d2 * nvec[1]
        ca[i, 2] = c[2] + d0 * bc[2] + d1 * mvec[2] + d2 * nvec[2]
    return ca
