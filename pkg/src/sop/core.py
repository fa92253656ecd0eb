"""SOP estimation: Henderson solves, variance updates and the fitting loop."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg import lapack

from .errors import (DegenerateComponentError, InvalidArgumentError, OverparameterizedError,
                     SingularSystemError)
from .model import (VarianceState, as_dense, assemble_precision, block_variance_diag,
                    matrix_rank, working_response)

logger = logging.getLogger("sop")

ED_REL_MIN = 1e-10
SCORE_REL_MIN = 1e-6
FLOOR_REL = 1e-10
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FitOptions:
    """Iteration controls for :func:`fit`.

    ``tol`` is the relative change in REML deviance that stops the inner
    loop; ``outer_tol`` the sup-norm change of the linear predictor that
    stops the outer (working response) loop.
    """

    max_inner: int = 200
    max_outer: int = 100
    tol: float = 1e-6
    outer_tol: float = 1e-6
    sigma2_init: float = 1.0
    phi_init: float = 1.0

    def __post_init__(self):
        if self.max_inner < 1 or self.max_outer < 1:
            raise InvalidArgumentError("iteration limits must be positive")
        if not (self.tol > 0 and self.outer_tol > 0):
            raise InvalidArgumentError("tolerances must be positive")
        if not (self.sigma2_init > 0 and self.phi_init > 0):
            raise InvalidArgumentError("initial values must be positive")


@dataclass(frozen=True, eq=False)
class HendersonSystem:
    """Coefficient matrix ``C``, right-hand side and the coefficient layout."""

    C: np.ndarray
    rhs: np.ndarray
    beta_slice: slice
    block_slices: tuple


@dataclass(frozen=True, eq=False)
class CoefficientEstimates:
    """Solution of the Henderson system.

    ``cstar_blocks[k]`` is the ``(q_k, q_k)`` diagonal block of ``C^{-1}``, or
    only its diagonal (1-D) when every atom of block ``k`` is diagonal.
    ``chol`` is the lower Cholesky factor of ``C``.
    """

    beta: np.ndarray
    alpha: np.ndarray
    beta_slice: slice
    block_slices: tuple
    cstar_blocks: tuple
    chol: np.ndarray
    phi: float
    z: np.ndarray
    w: np.ndarray
    fitted: np.ndarray
    logdet_C: float

    def alpha_block(self, k):
        sl, r = self.block_slices[k], self.beta.size
        return self.alpha[sl.start - r:sl.stop - r]

    @property
    def coef(self):
        return np.concatenate([self.beta, self.alpha])

    def cstar_block(self, k):
        """Full ``(q_k, q_k)`` block of ``C^{-1}`` (computed on demand if needed)."""
        blk = self.cstar_blocks[k]
        if blk.ndim == 2:
            return blk
        V = _inverse_factor_columns(self.chol, self.block_slices[k])
        return V.T @ V

    def covariance_rows(self, A):
        """``diag(A C^{-1} A^T)`` for a matrix ``A`` of stacked-coefficient rows."""
        V = sla.solve_triangular(self.chol, np.asarray(A, dtype=float).T, lower=True,
                                 check_finite=False)
        return np.einsum("ij,ij->j", V, V)


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of :func:`fit`.

    ``ed`` maps ``(k, l)`` to the per-parameter effective dimension and
    ``ed_blocks`` holds their per-block sums.  ``state_trace`` records the
    variance state used at each inner iteration.
    """

    coefficients: CoefficientEstimates
    state: VarianceState
    ed: dict
    ed_blocks: tuple
    deviance_trace: list
    iterations: tuple
    converged: bool
    fitted_mu: np.ndarray
    eta: np.ndarray
    family: object
    rank_x: int
    n: int
    state_trace: list = field(default_factory=list)
    deviance_increases: int = 0

    @property
    def total_ed(self):
        """Model dimension: ``rank(X)`` plus all per-parameter EDs."""
        return float(self.rank_x + sum(self.ed_blocks))

    @property
    def deviance(self):
        return self.deviance_trace[-1]


# ---------------------------------------------------------------------------
# Henderson system
# ---------------------------------------------------------------------------

class _CrossProducts:
    """Weighted cross products that stay fixed while only variances change."""

    def __init__(self, spec, z, w):
        z = np.asarray(z, dtype=float)
        w = np.asarray(w, dtype=float)
        if z.shape != (spec.n,) or w.shape != (spec.n,):
            raise InvalidArgumentError("z and w must be n-vectors")
        if np.any(~np.isfinite(w) | (w <= 0)):
            raise InvalidArgumentError("weights must be strictly positive")
        X = spec.X
        Z = spec.Z_full()
        WX = X * w[:, None]
        wz = w * z
        self.XtWX = X.T @ WX
        self.XtWz = X.T @ wz
        if sp.issparse(Z):
            WZ = sp.diags(w) @ Z
            self.ZtWZ = np.asarray((Z.T @ WZ).todense())
            self.ZtWX = np.asarray(Z.T @ WX)
            self.ZtWz = np.asarray(Z.T @ wz).ravel()
        else:
            self.ZtWZ = Z.T @ (Z * w[:, None])
            self.ZtWX = Z.T @ WX
            self.ZtWz = Z.T @ wz
        # exact symmetry of C
        self.XtWX = 0.5 * (self.XtWX + self.XtWX.T)
        self.ZtWZ = 0.5 * (self.ZtWZ + self.ZtWZ.T)
        self.zWz = float(z @ wz)
        self.sum_log_w = float(np.log(w).sum())
        self.spec, self.z, self.w, self.Z = spec, z, w, Z


def _precision_blocks(spec, state):
    """Per-block (Ginv, G-or-diag) and the full block-diagonal ``G^{-1}``."""
    q = spec.n_random
    Ginv = np.zeros((q, q))
    pieces = []
    for k, (block, sl) in enumerate(zip(spec.blocks, spec.block_slices())):
        if block.all_diagonal:
            gdiag = block_variance_diag(block, state.sigma2[k])
            Ginv[sl, sl] = np.diag(1.0 / gdiag)
            pieces.append(gdiag)
        else:
            Gk_inv, Gk = assemble_precision(block, state.sigma2[k])
            Ginv[sl, sl] = Gk_inv
            pieces.append(Gk)
    return Ginv, pieces


def _assemble(xp, state, Ginv):
    phi = state.phi
    r = xp.XtWX.shape[0]
    q = Ginv.shape[0]
    C = np.empty((r + q, r + q))
    C[:r, :r] = xp.XtWX
    C[:r, r:] = xp.ZtWX.T
    C[r:, :r] = xp.ZtWX
    C[r:, r:] = xp.ZtWZ
    C /= phi
    C[r:, r:] += Ginv
    rhs = np.concatenate([xp.XtWz, xp.ZtWz]) / phi
    return C, rhs


def _layout(spec):
    r = spec.r
    return slice(0, r), tuple(slice(r + s.start, r + s.stop) for s in spec.block_slices())


def build_henderson(spec, state, z, w):
    """Assemble the Henderson system with ``R = phi W^{-1}``."""
    xp = _CrossProducts(spec, z, w)
    Ginv, _ = _precision_blocks(spec, state)
    C, rhs = _assemble(xp, state, Ginv)
    beta_sl, block_sl = _layout(spec)
    return HendersonSystem(C=C, rhs=rhs, beta_slice=beta_sl, block_slices=block_sl)


def _inverse_factor_columns(L, cols):
    """Columns ``cols`` of ``L^{-1}``; rows above ``cols.start`` are zero."""
    s = cols.start
    m = L.shape[0] - s
    E = np.zeros((m, cols.stop - s))
    E[np.arange(cols.stop - s), np.arange(cols.stop - s)] = 1.0
    V = sla.solve_triangular(L[s:, s:], E, lower=True, check_finite=False)
    return V


def _factorize(C, spec):
    L, info = lapack.dpotrf(C, lower=1, clean=1, overwrite_a=0)
    if info != 0:
        where = "fixed effects"
        bad = info - 1
        if bad >= spec.r:
            for block, sl in zip(spec.blocks, _layout(spec)[1]):
                if sl.start <= bad < sl.stop:
                    where = f"block {block.name!r}"
                    break
        raise SingularSystemError(
            f"Henderson system is not positive definite (breakdown in {where}); "
            "check the rank conditions of the model", block=where)
    return L


def _solve(spec, state, xp, cstar="auto"):
    Ginv, _ = _precision_blocks(spec, state)
    C, rhs = _assemble(xp, state, Ginv)
    L = _factorize(C, spec)
    coef = sla.cho_solve((L, True), rhs, check_finite=False)
    beta_sl, block_sl = _layout(spec)
    blocks = []
    for block, sl in zip(spec.blocks, block_sl):
        V = _inverse_factor_columns(L, sl)
        # diagonal atoms need only diag(C*_kk), see compute_ed
        if cstar == "full" or not block.all_diagonal:
            blocks.append(V.T @ V)
        else:
            blocks.append(np.einsum("ij,ij->j", V, V))
    beta, alpha = coef[beta_sl], coef[spec.r:]
    fitted = spec.X @ beta
    if alpha.size:
        fitted = fitted + xp.Z @ alpha
    logdet_C = 2.0 * float(np.log(np.diag(L)).sum())
    return CoefficientEstimates(beta=beta, alpha=alpha, beta_slice=beta_sl, block_slices=block_sl,
                                cstar_blocks=tuple(blocks), chol=L, phi=state.phi, z=xp.z, w=xp.w,
                                fitted=np.asarray(fitted).ravel(), logdet_C=logdet_C)


def solve_henderson(spec, state, z, w, cstar="auto"):
    """Solve the Henderson equations at fixed variance parameters.

    One Cholesky factorization of ``C``; the blocks of ``C^{-1}`` are obtained
    by triangular solves against the block's unit vectors only.

    Parameters
    ----------
    spec : MixedModelSpec
    state : VarianceState
    z, w : numpy.ndarray
        Working response and strictly positive weights.
    cstar : {"auto", "full"}
        ``"full"`` forces full ``C*_kk`` blocks even for diagonal atoms.

    Raises
    ------
    SingularSystemError
        If ``C`` cannot be factorized; the message names the offending block.
    """
    return _solve(spec, state, _CrossProducts(spec, z, w), cstar=cstar)


# ---------------------------------------------------------------------------
# Effective dimensions and updates
# ---------------------------------------------------------------------------

def compute_ed(spec, state, estimates):
    """Per-parameter effective dimensions ``ED_{k_l}``.

    Uses ``trace((G_k - C*_kk) Lambda_{k_l}) / sigma2_{k_l}``; for blocks with
    diagonal atoms only the diagonals are formed.
    """
    ed = {}
    for k, block in enumerate(spec.blocks):
        s2 = state.sigma2[k]
        cst = estimates.cstar_blocks[k]
        if block.all_diagonal:
            gdiag = block_variance_diag(block, s2)
            cdiag = cst if cst.ndim == 1 else np.diag(cst)
            diff = gdiag - cdiag
            lam = block.atom_diagonals()
            for l in range(block.p):
                ed[(k, l)] = float(np.dot(diff, lam[l])) / s2[l]
        else:
            _, G = assemble_precision(block, s2)
            cst = cst if cst.ndim == 2 else estimates.cstar_block(k)
            diff = G - cst
            for l, lam in enumerate(block.atoms):
                if block.diagonal_flags[l]:
                    val = float(np.dot(np.diag(diff), np.diag(lam)))
                else:
                    val = float(np.sum(diff * lam))
                ed[(k, l)] = val / s2[l]
    return ed


def _ed_capacity(spec, state):
    """``trace(G_k Lambda_{k_l}) / sigma2_{k_l}``: the ED each parameter would
    reach with perfectly informative data (``G_k - C*_kk`` is below ``G_k``)."""
    cap = {}
    for k, block in enumerate(spec.blocks):
        s2 = state.sigma2[k]
        if block.all_diagonal:
            g = block_variance_diag(block, s2)
            for l, lam in enumerate(block.atom_diagonals()):
                cap[(k, l)] = float(np.dot(g, lam)) / s2[l]
        else:
            _, G = assemble_precision(block, s2)
            for l, lam in enumerate(block.atoms):
                cap[(k, l)] = float(np.sum(G * lam)) / s2[l]
    return cap


def update_variances(spec, state, estimates, ed=None, on_degenerate="raise"):
    """One SOP update ``sigma2 <- alpha_k' Lambda alpha_k / ED_{k_l}``.

    Updates are floored at ``1e-10 * phi``; floored keys are recorded in
    ``VarianceState.floored``.

    Parameters
    ----------
    on_degenerate : {"raise", "floor"}
        What to do when ``ED_{k_l}`` vanishes (below ``1e-10`` times its
        capacity ``trace(G_k Lambda_{k_l}) / sigma2_{k_l}``, i.e. rank condition
        (i) fails): raise :class:`DegenerateComponentError` or floor and flag.
        A parameter whose capacity is itself tiny (dominated by the other
        atoms of its block) is not degenerate.  In ``"floor"`` mode, if the
        update with ED clamped at that threshold would still increase
        ``sigma2`` (the penalty is vanishing and its ED is lost to rounding),
        the current value is kept instead.  The same holds whenever an
        increasing update has ``alpha' Lambda alpha / sigma2`` below ``1e-6``
        times the capacity, so the REML score in ``log sigma2`` is negligible.
    """
    if on_degenerate not in ("raise", "floor"):
        raise InvalidArgumentError("on_degenerate must be 'raise' or 'floor'")
    if ed is None:
        ed = compute_ed(spec, state, estimates)
    floor = FLOOR_REL * state.phi
    cap = _ed_capacity(spec, state)
    new, floored, held = [], set(), set()
    for k, block in enumerate(spec.blocks):
        a = estimates.alpha_block(k)
        s2_old = state.sigma2[k]
        vals = np.empty(block.p)
        for l, lam in enumerate(block.atoms):
            key = (k, l)
            if block.diagonal_flags[l]:
                num = float(np.dot(a * np.diag(lam), a))
            else:
                num = float(a @ lam @ a)
            e = ed[key]
            e_min = ED_REL_MIN * cap[key]
            if not e > e_min:
                if on_degenerate == "floor" and num / e_min > s2_old[l]:
                    # ED lost to rounding while sigma2 runs off to infinity
                    vals[l] = s2_old[l]
                    held.add(key)
                    continue
                if on_degenerate == "raise":
                    raise DegenerateComponentError(
                        f"effective dimension of {block.labels[l]!r} is {e:.3g}: "
                        "rank(X, Z_k G_k Lambda) does not exceed rank(X), so this "
                        "variance parameter is not identified", key=key)
                vals[l] = floor
                floored.add(key)
                continue
            v = num / e
            if v > s2_old[l] and num / s2_old[l] <= SCORE_REL_MIN * cap[key]:
                # REML score ED - num/sigma2 is negligible: the likelihood is flat
                # towards infinity, further doubling only degrades conditioning
                vals[l] = s2_old[l]
                held.add(key)
                continue
            if not np.isfinite(v):
                raise DegenerateComponentError(
                    f"update of {block.labels[l]!r} overflowed (alpha' Lambda alpha = {num:.3g}, "
                    f"ED = {e:.3g})", key=key)
            if not v > floor:
                v = floor
                floored.add(key)
            vals[l] = v
        new.append(vals)
    if floored:
        logger.info("variance update floored for %s",
                    ", ".join(spec.label(key) for key in sorted(floored)))
    if held:
        logger.debug("variance held (flat likelihood towards infinity) for %s",
                     ", ".join(spec.label(key) for key in sorted(held)))
    return state.replace(sigma2=tuple(new), floored=floored)


def phi_update(spec, state, estimates, z, w, ed=None):
    """Dispersion update ``(z - zhat)' W (z - zhat) / (n - rank(X) - sum ED)``."""
    if spec.family.phi_known:
        raise InvalidArgumentError(f"dispersion of the {spec.family.kind} family is fixed")
    if ed is None:
        ed = compute_ed(spec, state, estimates)
    resid = np.asarray(z, dtype=float) - estimates.fitted
    rss = float(resid @ (np.asarray(w, dtype=float) * resid))
    denom = spec.n - spec.r - sum(ed.values())
    if denom <= 0:
        raise OverparameterizedError(
            f"residual degrees of freedom {denom:.3g} <= 0: the model uses up all observations")
    return rss / denom


def phi_harville(spec, estimates, z, w):
    """Harville's dispersion estimate ``z' W (z - zhat) / (n - rank(X))``."""
    z = np.asarray(z, dtype=float)
    return float(z @ (np.asarray(w, dtype=float) * (z - estimates.fitted))) / (spec.n - spec.r)


def _deviance(spec, state, xp, est):
    """-2 log REML likelihood from the factorization of ``C``.

    ``log|V| + log|X'V^{-1}X| = log|R| + log|G| + log|C|`` and
    ``z'Pz = z'R^{-1}(z - zhat)``.
    """
    n, r, phi = spec.n, spec.r, state.phi
    logdet_R = n * math.log(phi) - xp.sum_log_w
    logdet_G = 0.0
    for k, block in enumerate(spec.blocks):
        if block.all_diagonal:
            logdet_G += float(np.log(block_variance_diag(block, state.sigma2[k])).sum())
        else:
            Ginv, _ = assemble_precision(block, state.sigma2[k])
            logdet_G -= float(np.linalg.slogdet(Ginv)[1])
    zPz = float(xp.z @ (xp.w * (xp.z - est.fitted))) / phi
    return logdet_R + logdet_G + est.logdet_C + zPz + (n - r) * LOG_2PI


def reml_deviance(spec, state, z, w, estimates=None):
    """REML deviance ``-2 l_R`` at ``state`` for working data ``(z, w)``.

    The additive constant is ``(n - r) log(2 pi)``; only differences are
    meaningful across models.  ``V`` is never formed.
    """
    xp = _CrossProducts(spec, z, w)
    if estimates is None or estimates.phi != state.phi:
        estimates = _solve(spec, state, xp)
    return _deviance(spec, state, xp, estimates)


def _initial_mean(spec):
    fam, y = spec.family, spec.y
    if fam.kind == "poisson":
        return y + 0.1
    if fam.kind == "binomial":
        m = spec.trials
        return (y * m + 0.5) / (m + 1.0)
    return y.copy()


def fit(spec, options=None):
    """Estimate coefficients and variance parameters by SOP.

    Outer loop: working response and weights from the current mean.  Inner
    loop: Henderson solve, then simultaneous updates of every ``sigma2`` (and
    ``phi`` when unknown) until the REML deviance settles.  Gaussian models
    with identity link need a single outer pass.

    Returns
    -------
    FitResult
        ``converged`` is False when an iteration limit is hit; the traces are
        complete either way.
    """
    opts = options or FitOptions()
    fam = spec.family
    phi0 = fam.phi_value if fam.phi_known else opts.phi_init
    state = VarianceState.initial(spec, opts.sigma2_init, phi0)
    mu = _initial_mean(spec)
    eta_old = fam.linkfun(mu) - (spec.offset if spec.offset is not None else 0.0)
    dev_trace, state_trace = [], []
    increases = 0
    total_inner = 0
    converged = False
    outer = 0
    est = None
    for outer in range(1, opts.max_outer + 1):
        z, w = working_response(spec, mu)
        xp = _CrossProducts(spec, z, w)
        dev_prev = None
        inner_ok = False
        for it in range(opts.max_inner):
            est = _solve(spec, state, xp)
            dev = _deviance(spec, state, xp, est)
            dev_trace.append(dev)
            state_trace.append(state)
            total_inner += 1
            logger.debug("outer %d inner %d: -2logL = %.10g", outer, it + 1, dev)
            if dev_prev is not None:
                if dev - dev_prev > 1e-6 * max(1.0, abs(dev)):
                    increases += 1
                    logger.warning("REML deviance increased by %.3g at inner iteration %d",
                                   dev - dev_prev, it + 1)
                if abs(dev - dev_prev) < opts.tol * max(1.0, abs(dev)):
                    inner_ok = True
                    break
            dev_prev = dev
            ed = compute_ed(spec, state, est)
            # zero ED at the starting values means the model is not identified;
            # later collapse towards the boundary is floored instead
            mode = "raise" if (outer == 1 and it == 0) else "floor"
            try:
                new = update_variances(spec, state, est, ed=ed, on_degenerate=mode)
            except DegenerateComponentError as exc:
                raise DegenerateComponentError(f"{spec.name}: {exc}", key=exc.key) from exc
            if not fam.phi_known:
                new = new.replace(phi=phi_update(spec, state, est, z, w, ed=ed))
            state = new
        if not inner_ok:
            # iteration limit: the last update has not been solved for yet
            est = _solve(spec, state, xp)
        eta = est.fitted
        offset = spec.offset if spec.offset is not None else 0.0
        mu = fam.linkinv(eta + offset)
        if fam.is_gaussian_identity:
            logger.info("%d inner iterations, -2logL = %.10g", it + 1, dev)
            converged = inner_ok
            break
        change = float(np.max(np.abs(eta - eta_old)))
        logger.info("outer %d: %d inner iterations, -2logL = %.10g, max |d eta| = %.3g",
                    outer, it + 1, dev, change)
        eta_old = eta
        if change < opts.outer_tol and inner_ok:
            converged = True
            break
    if not converged:
        logger.warning("%s: no convergence after %d outer / %d inner iterations",
                       spec.name, outer, total_inner)
    ed = compute_ed(spec, state, est)
    ed_blocks = tuple(float(sum(ed[(k, l)] for l in range(b.p)))
                      for k, b in enumerate(spec.blocks))
    return FitResult(coefficients=est, state=state, ed=ed, ed_blocks=ed_blocks,
                     deviance_trace=dev_trace, iterations=(outer, total_inner),
                     converged=converged, fitted_mu=mu, eta=eta, family=fam,
                     rank_x=matrix_rank(spec.X), n=spec.n, state_trace=state_trace,
                     deviance_increases=increases)


def t_identity_check(spec, state, estimates):
    """Largest ``|Z_k' P Z_k G_k - (I - T_kk)|`` over all blocks (dense; small n only).

    ``T = (I + Z'SZG)^{-1}`` with
    ``S = R^{-1} - R^{-1} X (X'R^{-1}X)^{-1} X'R^{-1}``.
    """
    n = spec.n
    if n > 2000:
        raise InvalidArgumentError("t_identity_check forms n x n matrices; n is too large")
    w, phi = estimates.w, state.phi
    X = spec.X
    Z = as_dense(spec.Z_full())
    Rinv = np.diag(w / phi)
    RinvX = Rinv @ X
    S = Rinv - RinvX @ np.linalg.solve(X.T @ RinvX, RinvX.T)
    G = np.zeros((spec.n_random, spec.n_random))
    for k, sl in enumerate(spec.block_slices()):
        G[sl, sl] = assemble_precision(spec.blocks[k], state.sigma2[k])[1]
    V = np.diag(phi / w) + Z @ G @ Z.T
    Vinv = np.linalg.inv(V)
    VinvX = Vinv @ X
    P = Vinv - VinvX @ np.linalg.solve(X.T @ VinvX, VinvX.T)
    T = np.linalg.inv(np.eye(spec.n_random) + Z.T @ S @ Z @ G)
    worst = 0.0
    for sl in spec.block_slices():
        Zk = Z[:, sl]
        lhs = Zk.T @ P @ Zk @ G[sl, sl]
        rhs = np.eye(sl.stop - sl.start) - T[sl, sl]
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst
