"""Turn P-spline models with overlapping penalties into mixed models.

Three families are covered:

* spatially adaptive P-splines, where the difference penalty carries a
  smoothly varying weight ``lambda = Psi xi`` (one variance parameter per
  column of ``Psi``);
* hierarchical curves, a penalized population curve plus subject curves
  shrunk by both a difference and a ridge penalty;
* the factor-by-curve extension with one population curve per group.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError
from .model import MixedModelSpec, RandomBlock, make_family
from .splines import diff_matrix, eval_basis, make_knots

EVD_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class AdaptiveSpec:
    """Bookkeeping for an adaptive P-spline fit.

    ``F = D' (D D')^{-1}`` maps differences to coefficients, so the random
    design is ``B F``; ``Psi`` is the ``(d - q, p)`` basis that smooths the
    local penalty weights over difference positions.
    """

    d: int
    q: int
    p: int
    kv_main: object
    kv_psi: object
    F: np.ndarray
    Psi: np.ndarray
    D: np.ndarray

    def fixed_design(self, x):
        x = np.asarray(x, dtype=float)
        return np.vander(x, self.q, increasing=True)

    def random_design(self, x):
        return eval_basis(x, self.kv_main).values @ self.F

    def difference_positions(self):
        """Approximate x-location of each coefficient difference."""
        g = self.kv_main.greville()
        pos = np.array([g[i:i + self.q + 1].mean() for i in range(self.d - self.q)])
        return np.clip(pos, self.kv_main.x_min, self.kv_main.x_max)


@dataclass(frozen=True, eq=False)
class HierarchicalSpec:
    """Bookkeeping for the hierarchical (and factor-by-curve) models.

    ``U0`` spans the null space of ``D_q' D_q``; ``Uplus`` and
    ``Sigma_plus`` hold the remaining eigenpairs.  ``groups`` is None for the
    single-population model, otherwise the 0/1 label of each subject.
    """

    d: int
    d_subj: int
    q: int
    q_subj: int
    m: int
    t: np.ndarray
    kv_pop: object
    kv_subj: object
    U0: np.ndarray
    Uplus: np.ndarray
    Sigma_plus: np.ndarray
    groups: np.ndarray = None

    @property
    def n_groups(self):
        return 1 if self.groups is None else 2

    def Q(self):
        """Subject-to-group contrast (block indicator)."""
        if self.groups is None:
            return np.ones((self.m, 1))
        return np.column_stack([self.groups == 0, self.groups == 1]).astype(float)

    @property
    def n_coefficients(self):
        return self.n_groups * self.d + self.m * self.d_subj


def _check_vector(x, name):
    x = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return x


def _psi_basis(n_diff, p):
    """Cubic (or lower, when ``p`` is small) B-splines on positions 1..n_diff."""
    degree = min(3, p - 1)
    n_seg = p - degree
    kv = make_knots(1.0, float(n_diff), n_seg, degree)
    Psi = eval_basis(np.arange(1, n_diff + 1, dtype=float), kv).values
    return kv, Psi


def adaptive_pspline_spec(x, y, family=None, nseg=20, degree=3, q=2, p=1, trials=None,
                          name="adaptive"):
    """Adaptive P-spline as a one-block mixed model.

    Parameters
    ----------
    x, y : array_like, shape (n,)
        Covariate and response.
    family : Family, optional
        Gaussian with unknown dispersion by default.
    nseg, degree : int
        Main basis: ``d = nseg + degree`` B-splines on equally spaced knots
        over the range of ``x``.
    q : int
        Difference order of the penalty.
    p : int
        Number of B-splines for the smoothing-parameter curve; ``p = 1``
        gives the ordinary P-spline with one smoothing parameter.

    Returns
    -------
    spec : MixedModelSpec
        ``X = [1, x, ..., x^(q-1)]``, ``Z = B F`` and atoms ``diag(psi_l)``.
    adaptive : AdaptiveSpec
    """
    x = _check_vector(x, "x")
    y = _check_vector(y, "y")
    if x.size != y.size:
        raise InvalidArgumentError("x and y must have the same length")
    family = family or make_family("gaussian")
    if q < 1:
        raise InvalidArgumentError("penalty order q must be at least 1")
    kv = make_knots(x.min(), x.max(), nseg, degree)
    d = kv.n_basis
    if q >= d:
        raise InvalidArgumentError(f"penalty order {q} too large for {d} basis functions")
    if not 1 <= p < d - q:
        raise InvalidArgumentError(
            f"p={p} smoothing-parameter basis functions for {d - q} coefficient differences; "
            "need 1 <= p < d - q (one parameter per difference is not identifiable)")
    B = eval_basis(x, kv).values
    D = diff_matrix(q, d).values
    F = np.linalg.solve(D @ D.T, D).T
    Z = B @ F
    X = np.vander(x, q, increasing=True)
    kv_psi, Psi = _psi_basis(d - q, p)
    atoms = [np.diag(Psi[:, l]) for l in range(p)]
    labels = [f"sigma2_{l + 1}" for l in range(p)] if p > 1 else ["sigma2"]
    block = RandomBlock(Z=Z, atoms=atoms, labels=labels, diagonal_flags=[True] * p, name="f(x)")
    spec = MixedModelSpec(X=X, blocks=(block,), family=family, y=y, trials=trials, name=name)
    return spec, AdaptiveSpec(d=d, q=q, p=p, kv_main=kv, kv_psi=kv_psi, F=F, Psi=Psi, D=D)


def lambda_field(adaptive, state):
    """Local smoothing parameters ``lambda = Psi xi`` with ``xi_l = phi / sigma2_l``."""
    xi = state.phi / np.asarray(state.sigma2[0], dtype=float)
    return adaptive.Psi @ xi


def _penalty_evd(d, q):
    D = diff_matrix(q, d).values
    vals, vecs = np.linalg.eigh(D.T @ D)
    zero = vals < EVD_RTOL * vals.max()
    if zero.sum() != q:
        raise InvalidArgumentError(f"penalty null space has dimension {zero.sum()}, expected {q}")
    return vecs[:, zero], vecs[:, ~zero], vals[~zero]


def _hierarchical_parts(t, Y, d, d_subj, q, q_subj, degree):
    t = _check_vector(t, "t")
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] != t.size:
        raise InvalidArgumentError("Y must be an (s, m) matrix with one row per time point")
    if not np.all(np.isfinite(Y)):
        raise InvalidArgumentError("Y contains non-finite values (unbalanced data is not supported)")
    m = Y.shape[1]
    if m < 2:
        raise InvalidArgumentError(
            "at least two subjects are needed: with m = 1 the subject curves are "
            "confounded with the population curve and the variance parameters are not identified")
    for name, dd, qq in (("population", d, q), ("subject", d_subj, q_subj)):
        if dd - degree < 1:
            raise InvalidArgumentError(f"{name} basis needs more than {degree} functions")
        if not 1 <= qq < dd:
            raise InvalidArgumentError(f"{name} penalty order must be in [1, {dd - 1}]")
    kv_pop = make_knots(t.min(), t.max(), d - degree, degree)
    kv_subj = make_knots(t.min(), t.max(), d_subj - degree, degree)
    B = eval_basis(t, kv_pop).values
    Bs = eval_basis(t, kv_subj).values
    U0, Uplus, Splus = _penalty_evd(d, q)
    Ds = diff_matrix(q_subj, d_subj).values
    Z_subj = sp.kron(sp.identity(m, format="csr"), sp.csr_matrix(Bs), format="csr")
    atoms_subj = [np.kron(np.eye(m), Ds.T @ Ds), np.eye(m * d_subj)]
    return t, Y, m, kv_pop, kv_subj, B, U0, Uplus, Splus, Z_subj, atoms_subj


def hierarchical_m0_spec(t, Y, family=None, d=10, d_subj=8, q=2, q_subj=2, degree=3,
                         name="hierarchical"):
    """Population curve plus penalized subject curves (balanced design).

    ``y = (1_m kron B) theta + (I_m kron Bs) theta_subj + e`` reparametrized
    through the eigen-decomposition of ``D_q' D_q``: fixed part
    ``1_m kron B U0``; block 1 ``1_m kron B U+`` with atom ``Sigma+``; block 2
    ``I_m kron Bs`` with atoms ``I_m kron Ds'Ds`` and ``I``.

    Parameters
    ----------
    t : array_like, shape (s,)
        Common time grid.
    Y : array_like, shape (s, m)
        One column per subject.
    """
    family = family or make_family("gaussian")
    t, Y, m, kv_pop, kv_subj, B, U0, Uplus, Splus, Z_subj, atoms_subj = _hierarchical_parts(
        t, Y, d, d_subj, q, q_subj, degree)
    ones = np.ones((m, 1))
    pop_block = RandomBlock(Z=np.kron(ones, B @ Uplus), atoms=[np.diag(Splus)],
                            labels=["sigma2_1"], diagonal_flags=[True], name="population curve")
    subj_block = RandomBlock(Z=Z_subj, atoms=atoms_subj, labels=["sigma2_2", "sigma2_3"],
                             diagonal_flags=[False, True], name="subject curves")
    spec = MixedModelSpec(X=np.kron(ones, B @ U0), blocks=(pop_block, subj_block),
                          family=family, y=Y.T.ravel(), name=name)
    hs = HierarchicalSpec(d=d, d_subj=d_subj, q=q, q_subj=q_subj, m=m, t=t, kv_pop=kv_pop,
                          kv_subj=kv_subj, U0=U0, Uplus=Uplus, Sigma_plus=Splus)
    return spec, hs


def factor_by_curve_spec(t, Y, labels, family=None, d=10, d_subj=8, q=2, q_subj=2, degree=3,
                         name="factor-by-curve"):
    """Two group curves (controls labelled 0 first, then cases labelled 1) plus subject curves.

    Fixed part ``Q kron B U0`` with the block-indicator contrast ``Q``; one
    random block per group curve (atom ``Sigma+`` each, variances
    ``sigma2_1`` and ``sigma2_2``) and the subject block with
    ``sigma2_3`` (difference penalty) and ``sigma2_4`` (ridge).
    """
    family = family or make_family("gaussian")
    labels = np.asarray(labels).ravel()
    if not np.all(np.isin(labels, [0, 1])):
        raise InvalidArgumentError("group labels must be 0 (control) or 1 (case)")
    labels = labels.astype(int)
    t, Y, m, kv_pop, kv_subj, B, U0, Uplus, Splus, Z_subj, atoms_subj = _hierarchical_parts(
        t, Y, d, d_subj, q, q_subj, degree)
    if labels.size != m:
        raise InvalidArgumentError(f"{labels.size} labels for {m} subjects")
    if labels.min() == labels.max():
        raise InvalidArgumentError("both groups need at least one subject")
    if np.any(np.diff(labels) < 0):
        raise InvalidArgumentError("subjects must be ordered with controls (0) first")
    Q = np.column_stack([labels == 0, labels == 1]).astype(float)
    blocks = []
    for g in range(2):
        blocks.append(RandomBlock(Z=np.kron(Q[:, [g]], B @ Uplus), atoms=[np.diag(Splus)],
                                  labels=[f"sigma2_{g + 1}"], diagonal_flags=[True],
                                  name=f"group {g} curve"))
    blocks.append(RandomBlock(Z=Z_subj, atoms=atoms_subj, labels=["sigma2_3", "sigma2_4"],
                              diagonal_flags=[False, True], name="subject curves"))
    spec = MixedModelSpec(X=np.kron(Q, B @ U0), blocks=tuple(blocks), family=family,
                          y=Y.T.ravel(), name=name)
    hs = HierarchicalSpec(d=d, d_subj=d_subj, q=q, q_subj=q_subj, m=m, t=t, kv_pop=kv_pop,
                          kv_subj=kv_subj, U0=U0, Uplus=Uplus, Sigma_plus=Splus, groups=labels)
    return spec, hs


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _rows_adaptive(adaptive, x_new):
    return np.hstack([adaptive.fixed_design(x_new), adaptive.random_design(x_new)])


def _rows_hierarchical(hs, x_new, subject=None, group=None):
    B = eval_basis(x_new, hs.kv_pop).values
    n = B.shape[0]
    if hs.groups is None:
        if group not in (None, 0):
            raise InvalidArgumentError("single-population model has no group index")
        if subject is not None:
            group = 0
        parts = [B @ hs.U0, B @ hs.Uplus]
    else:
        if subject is not None:
            g_subj = int(hs.groups[subject])
            if group is not None and group != g_subj:
                raise InvalidArgumentError(f"subject {subject} belongs to group {g_subj}")
            group = g_subj
        if group not in (0, 1):
            raise InvalidArgumentError("factor-by-curve predictions need group 0 or 1")
        e = np.zeros(2)
        e[group] = 1.0
        fixed = np.kron(e[None, :], B @ hs.U0)
        curves = [B @ hs.Uplus if g == group else np.zeros_like(B @ hs.Uplus) for g in range(2)]
        parts = [fixed] + curves
    subj = np.zeros((n, hs.m * hs.d_subj))
    if subject is not None:
        if not 0 <= subject < hs.m:
            raise InvalidArgumentError(f"subject index {subject} out of range")
        Bs = eval_basis(x_new, hs.kv_subj).values
        subj[:, subject * hs.d_subj:(subject + 1) * hs.d_subj] = Bs
    return np.hstack(parts + [subj])


def predict_curve(builder_spec, fit_result, x_new, subject=None, group=None, scale="response"):
    """Fitted curve and standard errors at ``x_new``.

    Standard errors come from the rows of ``C^{-1}`` (which already carries
    ``phi`` through ``R``) and are on the link scale; the fitted values are
    returned on the response scale.

    Parameters
    ----------
    builder_spec : AdaptiveSpec or HierarchicalSpec
    fit_result : FitResult
    x_new : array_like
        Points inside the training domain.
    subject, group : int, optional
        Hierarchical models: add subject ``subject``'s deviation, or pick
        the group curve of a factor-by-curve model.
    scale : {"response", "link"}
        Scale of the returned fitted values.

    Returns
    -------
    fitted, se : numpy.ndarray
    """
    if scale not in ("response", "link"):
        raise InvalidArgumentError("scale must be 'response' or 'link'")
    x_new = np.atleast_1d(np.asarray(x_new, dtype=float))
    if isinstance(builder_spec, AdaptiveSpec):
        A = _rows_adaptive(builder_spec, x_new)
    elif isinstance(builder_spec, HierarchicalSpec):
        A = _rows_hierarchical(builder_spec, x_new, subject=subject, group=group)
    else:
        raise InvalidArgumentError(f"cannot predict from {type(builder_spec).__name__}")
    est = fit_result.coefficients
    eta = A @ est.coef
    se = np.sqrt(np.maximum(est.covariance_rows(A), 0.0))
    if scale == "link":
        return eta, se
    return fit_result.family.linkinv(eta), se
