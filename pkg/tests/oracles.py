"""Brute-force reference implementations used as test oracles.

Nothing here touches the torch convolution path: operators are materialized
element by element with plain loops.
"""

import math

import numpy as np


def toeplitz_matrix(atoms, stride, code_hw, out_hw):
    """Dense matrix of the transposed convolution ``gamma -> D^T gamma``.

    Rows index the output ``(c, y, x)``; columns index the code ``(f, p, q)``.
    """
    atoms = np.asarray(atoms, dtype=float)
    n_f, n_c, kh, kw = atoms.shape
    sh, sw = (stride, stride) if np.isscalar(stride) else stride
    hp, wp = code_hw
    h, w = out_hw
    M = np.zeros((n_c * h * w, n_f * hp * wp))
    for f in range(n_f):
        for p in range(hp):
            for q in range(wp):
                col = (f * hp + p) * wp + q
                for c in range(n_c):
                    for u in range(kh):
                        for v in range(kw):
                            y, x = sh * p + u, sw * q + v
                            if y < h and x < w:
                                M[(c * h + y) * w + x, col] += atoms[f, c, u, v]
    return M


def nn_lasso_cd(M, y, lam, tol=1e-14, max_sweeps=200000):
    """Coordinate descent for ``min 0.5||y - M z||^2 + lam * sum(z)``, ``z >= 0``."""
    M = np.asarray(M, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    z = np.zeros(M.shape[1])
    r = y.copy()
    col_sq = (M ** 2).sum(axis=0)
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(M.shape[1]):
            if col_sq[j] == 0:
                continue
            new = max(0.0, z[j] + (M[:, j] @ r - lam) / col_sq[j])
            d = new - z[j]
            if d != 0.0:
                r -= d * M[:, j]
                z[j] = new
                biggest = max(biggest, abs(d))
        if biggest < tol:
            break
    return z


def nn_lasso_objective(M, y, z, lam):
    r = np.asarray(y, dtype=float).ravel() - M @ z
    return 0.5 * r @ r + lam * np.abs(z).sum()


def fista_alphas(n):
    """First ``n`` terms of the momentum-strength sequence starting at 1."""
    out = [1.0]
    while len(out) < n:
        a = out[-1]
        out.append((1 + np.sqrt(1 + 4 * a * a)) / 2)
    return out


def cocircular_tangent_geometric(x, y, theta_c):
    """Tangent orientation (degrees, mod 180) at (x, y) of the circle through the
    origin that is tangent to ``theta_c`` there, solved from |p - c| = |c|."""
    nx, ny = -math.sin(theta_c), math.cos(theta_c)  # normal at the origin
    pn = x * nx + y * ny
    if abs(pn) < 1e-12:
        return math.degrees(theta_c) % 180.0
    r = (x * x + y * y) / (2.0 * pn)
    cx, cy = r * nx, r * ny
    # tangent is perpendicular to the radius p - c
    return math.degrees(math.atan2(x - cx, -(y - cy))) % 180.0


def cocircular_reference_literal(x, y, theta_c):
    """Direct transcription: x_co = sin(tc)(x^2+y^2) / (2(sin(tc)x - cos(tc)y)),
    y_co = tan(tc + pi/2) x_co, reference = atan((y - y_co)/(x - x_co)) + pi/2."""
    x_co = math.sin(theta_c) * (x * x + y * y) / (2 * (math.sin(theta_c) * x - math.cos(theta_c) * y))
    y_co = math.tan(theta_c + math.pi / 2) * x_co
    return math.degrees(math.atan((y - y_co) / (x - x_co)) + math.pi / 2) % 180.0


def synthetic_tiles(seed=0, n=32, k=6, tiles=4):
    """Images tiled with non-overlapping sparse mixtures of 4 unit-norm generators.

    Returns the generators ``(4, 1, k, k)`` and images ``(n, 1, k * tiles, k * tiles)``.
    """
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((4, 1, k, k))
    G /= np.linalg.norm(G.reshape(4, -1), axis=1)[:, None, None, None]
    x = np.zeros((n, 1, k * tiles, k * tiles))
    for img in range(n):
        for p in range(tiles):
            for q in range(tiles):
                act = rng.choice(4, size=rng.integers(1, 3), replace=False)
                coef = rng.uniform(1, 2, size=len(act))
                x[img, :, p * k:(p + 1) * k, q * k:(q + 1) * k] = np.tensordot(coef, G[act], axes=1)
    return G, x


def best_cosines(G, atoms):
    """For each generator, the largest absolute cosine with any learned atom."""
    A = np.asarray(atoms, dtype=float).reshape(len(atoms), -1)
    A = A / np.linalg.norm(A, axis=1, keepdims=True)
    return np.abs(np.asarray(G).reshape(len(G), -1) @ A.T).max(axis=1)
