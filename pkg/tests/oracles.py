"""Dense, formula-level oracles.

Everything here works with explicit ``V``, ``P`` and ``G`` matrices and
shares no code with the package's solver, so agreement is evidence of
correctness rather than of consistency with itself.
"""

import numpy as np
from scipy.optimize import minimize_scalar


def dense_G_blocks(spec, sigma2):
    out = []
    for block, s2 in zip(spec.blocks, sigma2):
        prec = sum(np.asarray(a, dtype=float) / v for a, v in zip(block.atoms, s2))
        out.append(np.linalg.inv(prec))
    return out


def dense_G(spec, sigma2):
    blocks = dense_G_blocks(spec, sigma2)
    q = sum(b.shape[0] for b in blocks)
    G = np.zeros((q, q))
    i = 0
    for b in blocks:
        G[i:i + b.shape[0], i:i + b.shape[0]] = b
        i += b.shape[0]
    return G


def dense_Z(spec):
    Z = spec.Z_full()
    return Z.toarray() if hasattr(Z, "toarray") else np.asarray(Z)


def dense_V(spec, sigma2, phi, w):
    Z = dense_Z(spec)
    return np.diag(phi / np.asarray(w)) + Z @ dense_G(spec, sigma2) @ Z.T


def dense_P(spec, sigma2, phi, w):
    X = spec.X
    Vi = np.linalg.inv(dense_V(spec, sigma2, phi, w))
    ViX = Vi @ X
    return Vi - ViX @ np.linalg.solve(X.T @ ViX, ViX.T)


def dense_estimates(spec, sigma2, phi, z, w):
    """GLS ``beta`` and BLUP ``alpha = G Z' P z``."""
    X = spec.X
    Vi = np.linalg.inv(dense_V(spec, sigma2, phi, w))
    beta = np.linalg.solve(X.T @ Vi @ X, X.T @ Vi @ z)
    P = dense_P(spec, sigma2, phi, w)
    alpha = dense_G(spec, sigma2) @ dense_Z(spec).T @ P @ z
    return beta, alpha


def dense_reml(spec, sigma2, phi, z, w):
    """``log|V| + log|X'V^{-1}X| + z'Pz + (n - r) log 2 pi``."""
    X = spec.X
    V = dense_V(spec, sigma2, phi, w)
    Vi = np.linalg.inv(V)
    P = dense_P(spec, sigma2, phi, w)
    n, r = X.shape
    return (np.linalg.slogdet(V)[1] + np.linalg.slogdet(X.T @ Vi @ X)[1] + z @ P @ z
            + (n - r) * np.log(2 * np.pi))


def ed_block_hat(spec, sigma2, phi, w):
    """``trace(Z_k G_k Z_k' P)`` per block."""
    P = dense_P(spec, sigma2, phi, w)
    Z = dense_Z(spec)
    out = []
    for sl, Gk in zip(spec.block_slices(), dense_G_blocks(spec, sigma2)):
        Zk = Z[:, sl]
        out.append(float(np.trace(Zk @ Gk @ Zk.T @ P)))
    return out


def ed_per_param(spec, sigma2, phi, w):
    """``trace(Z_k' P Z_k G_k Lambda_kl G_k) / sigma2_kl`` for each parameter."""
    P = dense_P(spec, sigma2, phi, w)
    Z = dense_Z(spec)
    out = {}
    for k, (sl, Gk) in enumerate(zip(spec.block_slices(), dense_G_blocks(spec, sigma2))):
        Zk = Z[:, sl]
        M = Zk.T @ P @ Zk
        for l, lam in enumerate(spec.blocks[k].atoms):
            out[(k, l)] = float(np.trace(M @ Gk @ np.asarray(lam) @ Gk)) / sigma2[k][l]
    return out


def harville_iterates(spec, z, n_iter, sigma2_init=1.0, phi_init=1.0):
    """Literal Harville iteration for ``G_k = sigma2_k I``.

    ``T = (I + Z'SZG)^{-1}``, ``ED_k = q_k - trace(T_kk)``,
    ``sigma2_k = alpha_k'alpha_k / ED_k``; the dispersion follows
    ``(z - zhat)'(z - zhat) / (n - r - sum ED)`` (unit weights).

    Returns the list of ``(sigma2 per block, phi)`` starting with the
    initial values.
    """
    X = spec.X
    Z = dense_Z(spec)
    n, r = X.shape
    sizes = [b.q for b in spec.blocks]
    s2 = [sigma2_init] * len(sizes)
    phi = phi_init
    out = [(list(s2), phi)]
    for _ in range(n_iter):
        G = np.diag(np.repeat(s2, sizes))
        Rinv = np.eye(n) / phi
        S = Rinv - Rinv @ X @ np.linalg.solve(X.T @ Rinv @ X, X.T @ Rinv)
        T = np.linalg.inv(np.eye(Z.shape[1]) + Z.T @ S @ Z @ G)
        V = phi * np.eye(n) + Z @ G @ Z.T
        Vi = np.linalg.inv(V)
        P = Vi - Vi @ X @ np.linalg.solve(X.T @ Vi @ X, X.T @ Vi)
        alpha = G @ Z.T @ P @ z
        beta = np.linalg.solve(X.T @ Vi @ X, X.T @ Vi @ z)
        zhat = X @ beta + Z @ alpha
        new, ed_tot, i = [], 0.0, 0
        for q in sizes:
            ed = q - np.trace(T[i:i + q, i:i + q])
            a = alpha[i:i + q]
            new.append(float(a @ a) / ed)
            ed_tot += ed
            i += q
        if not spec.family.phi_known:
            res = z - zhat
            phi = float(res @ res) / (n - r - ed_tot)
        s2 = new
        out.append((list(s2), phi))
    return out


def golden_reml_sigma2(spec, z, w, phi, lo=-12.0, hi=8.0, n_grid=201):
    """Minimise the dense REML deviance of a one-parameter model over ``log sigma2``.

    A coarse grid locates a bracket, golden-section search refines it.
    """
    def f(t):
        return dense_reml(spec, [np.array([np.exp(t)])], phi, z, w)

    grid = np.linspace(lo, hi, n_grid)
    i = int(np.argmin([f(t) for t in grid]))
    if i in (0, n_grid - 1):
        raise ValueError("REML minimum on the edge of the search range")
    res = minimize_scalar(f, bracket=(grid[i - 1], grid[i], grid[i + 1]), method="golden",
                          tol=1e-12)
    return float(np.exp(res.x))
