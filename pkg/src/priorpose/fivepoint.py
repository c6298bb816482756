"""Batched five-point essential matrix solver.

The essential matrix is parameterized over the 4-dimensional null space of the
five epipolar constraints, ``E = x X + y Y + z Z + W``. The rank and trace
constraints give ten cubics in (x, y, z); after eliminating the ten cubic
monomials the solutions are the eigenpairs of the 10x10 multiplication-by-x
matrix, whose characteristic polynomial is the degree-10 polynomial of the
problem.

Everything operates on stacks of problems so a RANSAC loop can solve all of
its hypotheses in one call.
"""
from __future__ import annotations

import itertools

import numpy as np

# Monomial exponents (x, y, z). Cubic "leading" monomials first, then the basis.
_LEAD = [(3, 0, 0), (2, 1, 0), (1, 2, 0), (0, 3, 0), (2, 0, 1), (1, 1, 1), (0, 2, 1), (1, 0, 2), (0, 1, 2), (0, 0, 3)]
_BASIS = [(2, 0, 0), (1, 1, 0), (0, 2, 0), (1, 0, 1), (0, 1, 1), (0, 0, 2), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_CUBIC = _LEAD + _BASIS
_QUAD = _BASIS
_LIN = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]

MAX_SOLUTIONS = 10
IMAG_TOL = 1e-8


def _mul_table(left, right, out):
    index = {m: i for i, m in enumerate(out)}
    T = np.zeros((len(left) * len(right), len(out)))
    for (i, a), (j, b) in itertools.product(enumerate(left), enumerate(right)):
        T[i * len(right) + j, index[tuple(p + q for p, q in zip(a, b))]] = 1.0
    return T


_T_LL = _mul_table(_LIN, _LIN, _QUAD)
_T_QL = _mul_table(_QUAD, _LIN, _CUBIC)


def _mul(P, Q, T):
    outer = P[..., :, None] * Q[..., None, :]
    return outer.reshape(outer.shape[:-2] + (-1,)) @ T


def _constraint_matrix(basis):
    """basis: (n, 4, 3, 3) null-space matrices X, Y, Z, W -> (n, 10, 20) cubic coefficients."""
    # E[n, i, j] as a linear polynomial over (x, y, z, 1)
    E = np.moveaxis(basis, 1, -1)
    # E E^T, quadratic
    EEt = np.zeros(E.shape[:1] + (3, 3, len(_QUAD)))
    for k in range(3):
        EEt += _mul(E[:, :, None, k, :], E[:, None, :, k, :], _T_LL)
    trace = EEt[:, 0, 0] + EEt[:, 1, 1] + EEt[:, 2, 2]
    rows = []
    for i in range(3):
        for j in range(3):
            acc = np.zeros(E.shape[:1] + (len(_CUBIC),))
            for k in range(3):
                acc += 2.0 * _mul(EEt[:, i, k], E[:, k, j], _T_QL)
            acc -= _mul(trace, E[:, i, j], _T_QL)
            rows.append(acc)
    # det(E) = E_0 . (E_1 x E_2)
    c0 = _mul(E[:, 1, 1], E[:, 2, 2], _T_LL) - _mul(E[:, 1, 2], E[:, 2, 1], _T_LL)
    c1 = _mul(E[:, 1, 2], E[:, 2, 0], _T_LL) - _mul(E[:, 1, 0], E[:, 2, 2], _T_LL)
    c2 = _mul(E[:, 1, 0], E[:, 2, 1], _T_LL) - _mul(E[:, 1, 1], E[:, 2, 0], _T_LL)
    det = _mul(c0, E[:, 0, 0], _T_QL) + _mul(c1, E[:, 0, 1], _T_QL) + _mul(c2, E[:, 0, 2], _T_QL)
    rows.append(det)
    return np.stack(rows, axis=1)


def null_space_basis(xA, xB):
    """xA, xB: (n, 5, 2) normalized points -> ((n, 4, 3, 3) basis, (n,) valid mask)."""
    a = np.concatenate([xA, np.ones(xA.shape[:-1] + (1,))], axis=-1)
    b = np.concatenate([xB, np.ones(xB.shape[:-1] + (1,))], axis=-1)
    A = (b[..., :, None] * a[..., None, :]).reshape(a.shape[:-1] + (9,))
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    valid = s[:, 4] > 1e-10 * s[:, 0]
    return Vt[:, 5:, :].reshape(-1, 4, 3, 3), valid


def solve_five_point_batch(xA, xB):
    """Solve a stack of five-point problems.

    xA, xB: (n, 5, 2) normalized camera coordinates.
    Returns ``(E, mask)`` with E of shape (n, 10, 3, 3), each Frobenius-normalized,
    and a boolean mask (n, 10) marking real solutions.
    """
    xA = np.asarray(xA, dtype=float)
    xB = np.asarray(xB, dtype=float)
    n = xA.shape[0]
    basis, valid = null_space_basis(xA, xB)
    M = _constraint_matrix(basis)
    lead, rest = M[:, :, :10], M[:, :, 10:]

    s = np.linalg.svd(lead, compute_uv=False)
    valid &= s[:, -1] > 1e-12 * s[:, 0]
    lead = np.where(valid[:, None, None], lead, np.eye(10))
    B = np.linalg.solve(lead, rest)

    act = np.zeros((n, 10, 10))
    for row, lead_idx in zip(range(6), (0, 1, 2, 4, 5, 7)):
        act[:, row] = -B[:, lead_idx]
    act[:, 6, 0] = 1.0
    act[:, 7, 1] = 1.0
    act[:, 8, 3] = 1.0
    act[:, 9, 6] = 1.0
    act = np.where(valid[:, None, None], act, 0.0)

    w, V = np.linalg.eig(act)
    real = np.abs(w.imag) < IMAG_TOL
    V = V.real
    scale = V[:, 9, :]
    real &= np.abs(scale) > 1e-12
    safe = np.where(real, scale, 1.0)
    x = V[:, 6, :] / safe
    y = V[:, 7, :] / safe
    z = V[:, 8, :] / safe
    x, y, z = _polish(M, x, y, z, real & valid[:, None])
    X, Y, Z, W = basis[:, 0], basis[:, 1], basis[:, 2], basis[:, 3]
    E = (
        x[:, :, None, None] * X[:, None]
        + y[:, :, None, None] * Y[:, None]
        + z[:, :, None, None] * Z[:, None]
        + W[:, None]
    )
    norms = np.linalg.norm(E, axis=(2, 3))
    real &= norms > 0
    E = E / np.where(real, norms, 1.0)[:, :, None, None]
    mask = real & valid[:, None]
    return E, mask


_EXP = np.array(_CUBIC)


def _monomials(x, y, z):
    """Monomial values and their partial derivatives, each (..., 20)."""
    pw = [np.stack([np.ones_like(v), v, v * v, v * v * v], axis=-1) for v in (x, y, z)]
    ex, ey, ez = _EXP[:, 0], _EXP[:, 1], _EXP[:, 2]
    px, py, pz = pw[0][..., ex], pw[1][..., ey], pw[2][..., ez]
    val = px * py * pz
    dx = ex * pw[0][..., np.maximum(ex - 1, 0)] * py * pz
    dy = ey * px * pw[1][..., np.maximum(ey - 1, 0)] * pz
    dz = ez * px * py * pw[2][..., np.maximum(ez - 1, 0)]
    return val, np.stack([dx, dy, dz], axis=-1)


def _polish(M, x, y, z, mask, iterations=2):
    """Gauss-Newton refinement of the roots on the ten cubic constraints."""
    for _ in range(iterations):
        val, jac = _monomials(x, y, z)
        r = np.einsum("nij,nsj->nsi", M, val)
        J = np.einsum("nij,nsjk->nsik", M, jac)
        JtJ = np.swapaxes(J, -1, -2) @ J
        Jtr = np.einsum("nsik,nsi->nsk", J, r)
        ok = mask & (np.abs(np.linalg.det(JtJ)) > 1e-300)
        JtJ = np.where(ok[..., None, None], JtJ, np.eye(3))
        step = np.linalg.solve(JtJ, np.where(ok[..., None], Jtr, 0.0)[..., None])[..., 0]
        x, y, z = x - step[..., 0], y - step[..., 1], z - step[..., 2]
    return x, y, z


def essential_residuals(E):
    """det(E) and the trace constraint 2 E E^T E - tr(E E^T) E, for (…, 3, 3) input."""
    EEt = E @ np.swapaxes(E, -1, -2)
    tr = np.trace(EEt, axis1=-2, axis2=-1)
    return np.linalg.det(E), 2.0 * EEt @ E - tr[..., None, None] * E
