"""Compiled coordinate-ascent sweep over the mean-field factors.

Blocks are stored as one row-major payload; ``poff[k]`` is the payload
offset of block ``k``, ``off[k]`` its first SNP and ``size[k]`` its width.
All arrays are updated in place.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def block_matvec(payload, poff, off, size, v, out):
    for k in range(size.size):
        m = size[k]
        p = poff[k]
        o = off[k]
        for i in range(m):
            acc = 0.0
            for l in range(m):
                acc += payload[p + i * m + l] * v[o + l]
            out[o + i] = acc


@njit(cache=True)
def _axpy_row(payload, p, m, i, o, delta, out):
    # out[block] += delta * row i of the block (rows equal columns by symmetry)
    base = p + i * m
    for l in range(m):
        out[o + l] += delta * payload[base + l]


@njit(cache=True)
def sweep(
    A, B, poff, off, size, blk,
    gy, gx, Ajj, Bjj,
    mu_g, s2_g, mu_a, s2_a,
    beta0, zeta, sigma2, Ew, sigma0_2,
    Ag, Bg, Aa,
):
    """One pass over gamma then alpha coordinates in ascending SNP order.

    ``gy = Gamma_hat / sigma_y**2`` and ``gx = gamma_hat / sigma_x**2``.
    ``Ag``, ``Bg``, ``Aa`` are scratch buffers for the running products
    ``A @ mu_g``, ``B @ mu_g`` and ``A @ mu_a``. Returns the index of the
    first SNP with a non-finite update, or -1.
    """
    J = mu_g.size
    block_matvec(A, poff, off, size, mu_g, Ag)
    block_matvec(B, poff, off, size, mu_g, Bg)
    block_matvec(A, poff, off, size, mu_a, Aa)
    b2 = beta0 * beta0
    z2 = zeta * zeta
    for j in range(J):
        k = blk[j]
        prec = b2 * Ajj[j] + z2 * Bjj[j] + 1.0 / sigma2
        cur = mu_g[j]
        rhs = (
            beta0 * gy[j]
            - b2 * (Ag[j] - Ajj[j] * cur)
            - beta0 * Aa[j]
            + zeta * gx[j]
            - z2 * (Bg[j] - Bjj[j] * cur)
        )
        new = rhs / prec
        if not (np.isfinite(new) and np.isfinite(prec) and prec > 0):
            return j
        d = new - cur
        mu_g[j] = new
        s2_g[j] = 1.0 / prec
        i = j - off[k]
        _axpy_row(A, poff[k], size[k], i, off[k], d, Ag)
        _axpy_row(B, poff[k], size[k], i, off[k], d, Bg)
    for j in range(J):
        k = blk[j]
        prec = Ajj[j] + Ew / sigma0_2
        cur = mu_a[j]
        rhs = gy[j] - beta0 * Ag[j] - (Aa[j] - Ajj[j] * cur)
        new = rhs / prec
        if not (np.isfinite(new) and np.isfinite(prec) and prec > 0):
            return j
        mu_a[j] = new
        s2_a[j] = 1.0 / prec
        _axpy_row(A, poff[k], size[k], j - off[k], off[k], new - cur, Aa)
    return -1
