"""Mixed-model description in the form the SOP updates need.

A model is ``g(mu) = X beta + sum_k Z_k alpha_k (+ offset)`` where every random
block carries a precision matrix that is *linear* in the precision parameters,
``G_k^{-1} = sum_l Lambda_{k_l} / sigma2_{k_l}``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import (DegenerateMeanError, InvalidArgumentError, SingularPrecisionError)

RANK_RTOL = 1e-10
SYM_TOL = 1e-12
PSD_RTOL = 1e-10
COND_MAX = 1e14
COMMUTE_RTOL = 1e-10
RESIDUAL_RTOL = 1e-8


# ---------------------------------------------------------------------------
# Families
# ---------------------------------------------------------------------------

_CANONICAL = {"gaussian": "identity", "poisson": "log", "binomial": "logit"}


@dataclass(frozen=True)
class Family:
    """Response distribution, link and dispersion handling.

    ``phi_known`` defaults to False for Gaussian responses and True (with
    ``phi_value = 1``) for Poisson and binomial ones.
    """

    kind: str = "gaussian"
    link: str = None
    phi_known: bool = None
    phi_value: float = 1.0

    def __post_init__(self):
        if self.kind not in _CANONICAL:
            raise InvalidArgumentError(f"unknown family {self.kind!r}")
        if self.link is None:
            object.__setattr__(self, "link", _CANONICAL[self.kind])
        if self.link not in ("identity", "log", "logit"):
            raise InvalidArgumentError(f"unknown link {self.link!r}")
        if self.phi_known is None:
            object.__setattr__(self, "phi_known", self.kind != "gaussian")
        if not (np.isfinite(self.phi_value) and self.phi_value > 0):
            raise InvalidArgumentError("phi_value must be positive")

    @property
    def is_gaussian_identity(self):
        return self.kind == "gaussian" and self.link == "identity"

    def linkfun(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.link == "identity":
            return mu.copy()
        if self.link == "log":
            return np.log(mu)
        return np.log(mu / (1.0 - mu))

    def linkinv(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.link == "identity":
            return eta.copy()
        if self.link == "log":
            return np.exp(eta)
        return 0.5 * (1.0 + np.tanh(0.5 * eta))

    def mu_eta_inv(self, mu):
        """Derivative of the link, g'(mu)."""
        mu = np.asarray(mu, dtype=float)
        if self.link == "identity":
            return np.ones_like(mu)
        if self.link == "log":
            return 1.0 / mu
        return 1.0 / (mu * (1.0 - mu))

    def variance(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return np.ones_like(mu)
        if self.kind == "poisson":
            return mu.copy()
        return mu * (1.0 - mu)

    def check_mean(self, mu):
        mu = np.asarray(mu, dtype=float)
        if not np.all(np.isfinite(mu)):
            raise DegenerateMeanError("non-finite mean")
        if self.kind == "poisson" and np.any(mu <= 0):
            raise DegenerateMeanError("Poisson mean on the boundary (mu <= 0)")
        if self.kind == "binomial" and np.any((mu <= 0) | (mu >= 1)):
            raise DegenerateMeanError("binomial mean on the boundary (mu in {0, 1})")
        if self.link == "log" and np.any(mu <= 0):
            raise DegenerateMeanError("log link needs mu > 0")


def make_family(name, phi=None):
    """Canonical-link family by name; pass ``phi`` to fix the dispersion."""
    if phi is None:
        return Family(kind=name)
    return Family(kind=name, phi_known=True, phi_value=float(phi))


# ---------------------------------------------------------------------------
# Matrix helpers
# ---------------------------------------------------------------------------

def as_dense(A):
    return A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)


def matrix_rank(A, rtol=RANK_RTOL):
    """Count of singular values above ``rtol`` times the largest."""
    A = as_dense(A)
    if A.size == 0:
        return 0
    s = np.linalg.svd(A, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def _is_diagonal(A):
    off = A - np.diag(np.diag(A))
    return not np.any(off)


# ---------------------------------------------------------------------------
# Model description
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RandomBlock:
    """One random component ``Z_k`` with its overlapping precision atoms.

    Parameters
    ----------
    Z : array or scipy.sparse matrix, shape (n, q_k)
        Design matrix of the component.
    atoms : sequence of arrays, shape (q_k, q_k)
        Known symmetric PSD matrices; the block precision is
        ``sum_l atoms[l] / sigma2[l]``.
    labels : sequence of str, optional
        One name per atom (defaults to ``"{name}.{l}"``).
    diagonal_flags : sequence of bool, optional
        Auto-detected when omitted.
    name : str
        Block name used in messages and reports.
    """

    Z: object
    atoms: tuple
    labels: tuple = None
    diagonal_flags: tuple = None
    name: str = "block"

    def __post_init__(self):
        Z = self.Z.tocsr() if sp.issparse(self.Z) else np.asarray(self.Z, dtype=float)
        if Z.ndim != 2:
            raise InvalidArgumentError(f"{self.name}: Z must be two-dimensional")
        object.__setattr__(self, "Z", Z)
        atoms = tuple(np.asarray(as_dense(a), dtype=float) for a in self.atoms)
        if not atoms:
            raise InvalidArgumentError(f"{self.name}: at least one precision atom is required")
        q = Z.shape[1]
        for l, a in enumerate(atoms):
            if a.shape != (q, q):
                raise InvalidArgumentError(
                    f"{self.name}: atom {l} has shape {a.shape}, expected ({q}, {q})")
        object.__setattr__(self, "atoms", atoms)

        labels = self.labels
        if labels is None:
            labels = tuple(f"{self.name}.{l + 1}" for l in range(len(atoms)))
        if len(labels) != len(atoms):
            raise InvalidArgumentError(f"{self.name}: one label per atom is required")
        object.__setattr__(self, "labels", tuple(labels))

        flags = self.diagonal_flags
        if flags is None:
            flags = tuple(_is_diagonal(a) for a in atoms)
        elif len(flags) != len(atoms):
            raise InvalidArgumentError(f"{self.name}: one diagonal flag per atom is required")
        object.__setattr__(self, "diagonal_flags", tuple(bool(f) for f in flags))
        self._validate()

    def _validate(self):
        for l, a in enumerate(self.atoms):
            scale = np.abs(a).max()
            if np.abs(a - a.T).max() > SYM_TOL * max(1.0, scale):
                raise InvalidArgumentError(f"{self.name}: atom {self.labels[l]} is not symmetric")
            if self.diagonal_flags[l]:
                if not _is_diagonal(a):
                    raise InvalidArgumentError(
                        f"{self.name}: atom {self.labels[l]} flagged diagonal but is not")
                lo = np.diag(a).min()
            else:
                lo = sla.eigvalsh(a, subset_by_index=[0, 0])[0]
            if lo < -PSD_RTOL * scale:
                raise InvalidArgumentError(
                    f"{self.name}: atom {self.labels[l]} is not positive semi-definite "
                    f"(min eigenvalue {lo:.3g})")
        # sum of atoms (all sigma2 = 1) must be positive definite
        assemble_precision(self, np.ones(self.p))

    @property
    def q(self):
        return self.Z.shape[1]

    @property
    def p(self):
        return len(self.atoms)

    @property
    def all_diagonal(self):
        return all(self.diagonal_flags)

    def atom_diagonals(self):
        return np.array([np.diag(a) for a in self.atoms])


@dataclass(frozen=True, eq=False)
class MixedModelSpec:
    """A complete model: fixed design, random blocks, family and response.

    Binomial responses are proportions in ``y`` with the number of trials in
    ``trials`` (default 1).
    """

    X: np.ndarray
    blocks: tuple
    family: Family
    y: np.ndarray
    trials: np.ndarray = None
    offset: np.ndarray = None
    name: str = "model"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        n = y.size
        if X.shape[0] != n:
            raise InvalidArgumentError(f"X has {X.shape[0]} rows but y has {n} entries")
        if X.shape[1] == 0:
            raise InvalidArgumentError("X must have at least one column")
        s = np.linalg.svd(X, compute_uv=False)
        if s[-1] <= RANK_RTOL * s[0]:
            raise InvalidArgumentError("X is not of full column rank")
        blocks = tuple(self.blocks)
        for k, b in enumerate(blocks):
            if not isinstance(b, RandomBlock):
                raise InvalidArgumentError(f"block {k} is not a RandomBlock")
            if b.Z.shape[0] != n:
                raise InvalidArgumentError(f"block {b.name}: Z has {b.Z.shape[0]} rows, expected {n}")
        trials = self.trials
        if trials is not None:
            trials = np.asarray(trials, dtype=float).ravel()
            if trials.shape != (n,) or np.any(trials <= 0):
                raise InvalidArgumentError("trials must be a positive vector matching y")
        elif self.family.kind == "binomial":
            trials = np.ones(n)
        offset = self.offset
        if offset is not None:
            offset = np.asarray(offset, dtype=float).ravel()
            if offset.shape != (n,):
                raise InvalidArgumentError("offset must match y")
        if not np.all(np.isfinite(y)):
            raise InvalidArgumentError("response contains non-finite values")
        if self.family.kind == "poisson" and np.any(y < 0):
            raise InvalidArgumentError("Poisson responses must be non-negative")
        if self.family.kind == "binomial" and np.any((y < 0) | (y > 1)):
            raise InvalidArgumentError("binomial responses must be proportions in [0, 1]")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "trials", trials)
        object.__setattr__(self, "offset", offset)

    @property
    def n(self):
        return self.y.size

    @property
    def r(self):
        return self.X.shape[1]

    @property
    def n_random(self):
        return sum(b.q for b in self.blocks)

    def keys(self):
        """All ``(k, l)`` parameter keys in block order."""
        return [(k, l) for k, b in enumerate(self.blocks) for l in range(b.p)]

    def label(self, key):
        k, l = key
        return self.blocks[k].labels[l]

    def block_slices(self):
        """Column slices of each block inside the stacked random vector."""
        out, start = [], 0
        for b in self.blocks:
            out.append(slice(start, start + b.q))
            start += b.q
        return out

    def Z_full(self):
        if not self.blocks:
            return np.zeros((self.n, 0))
        if any(sp.issparse(b.Z) for b in self.blocks):
            return sp.hstack([sp.csr_matrix(b.Z) for b in self.blocks]).tocsr()
        return np.hstack([b.Z for b in self.blocks])


@dataclass(frozen=True, eq=False)
class VarianceState:
    """Current variance parameters ``sigma2[k][l]`` and dispersion ``phi``.

    ``floored`` lists the keys whose last update hit the positivity floor.
    """

    sigma2: tuple
    phi: float = 1.0
    floored: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        s2 = tuple(np.array(v, dtype=float).ravel() for v in self.sigma2)
        for v in s2:
            v.setflags(write=False)
            if not np.all(np.isfinite(v) & (v > 0)):
                raise InvalidArgumentError("variance parameters must be positive and finite")
        if not (np.isfinite(self.phi) and self.phi > 0):
            raise InvalidArgumentError("phi must be positive and finite")
        object.__setattr__(self, "sigma2", s2)
        object.__setattr__(self, "phi", float(self.phi))
        object.__setattr__(self, "floored", frozenset(self.floored))

    @classmethod
    def initial(cls, spec, sigma2=1.0, phi=1.0):
        return cls(tuple(np.full(b.p, float(sigma2)) for b in spec.blocks), phi)

    def __getitem__(self, key):
        k, l = key
        return float(self.sigma2[k][l])

    def items(self):
        for k, v in enumerate(self.sigma2):
            for l, s in enumerate(v):
                yield (k, l), float(s)

    def flat(self):
        return np.concatenate(self.sigma2) if self.sigma2 else np.zeros(0)

    def replace(self, sigma2=None, phi=None, floored=None):
        return VarianceState(self.sigma2 if sigma2 is None else sigma2,
                             self.phi if phi is None else phi,
                             self.floored if floored is None else floored)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def assemble_precision(block, sigma2):
    """Block precision ``G_k^{-1} = sum_l Lambda_l / sigma2_l`` and its inverse.

    Parameters
    ----------
    block : RandomBlock
    sigma2 : sequence of float
        The block's variance parameters, e.g. ``state.sigma2[k]``.

    Returns
    -------
    Ginv, G : numpy.ndarray
        Both ``(q_k, q_k)`` and symmetric positive definite.

    Raises
    ------
    SingularPrecisionError
        When the 1-norm condition number exceeds 1e14.
    """
    sigma2 = np.asarray(sigma2, dtype=float).ravel()
    if sigma2.size != block.p:
        raise InvalidArgumentError(f"{block.name}: expected {block.p} variance parameters")
    if np.any(~np.isfinite(sigma2) | (sigma2 <= 0)):
        raise InvalidArgumentError(f"{block.name}: variance parameters must be positive")
    if block.all_diagonal:
        g_inv = block.atom_diagonals().T @ (1.0 / sigma2)
        if np.any(g_inv <= 0) or g_inv.max() > COND_MAX * g_inv.min():
            raise SingularPrecisionError(f"{block.name}: precision matrix is singular")
        return np.diag(g_inv), np.diag(1.0 / g_inv)
    Ginv = np.zeros((block.q, block.q))
    for a, s in zip(block.atoms, sigma2):
        Ginv += a / s
    Ginv = 0.5 * (Ginv + Ginv.T)
    try:
        cf = sla.cho_factor(Ginv, lower=True)
    except np.linalg.LinAlgError:
        raise SingularPrecisionError(f"{block.name}: precision matrix is not positive definite") from None
    G = sla.cho_solve(cf, np.eye(block.q))
    G = 0.5 * (G + G.T)
    cond = np.abs(Ginv).sum(axis=0).max() * np.abs(G).sum(axis=0).max()
    if not np.isfinite(cond) or cond > COND_MAX:
        raise SingularPrecisionError(f"{block.name}: precision matrix is singular (cond {cond:.2e})")
    return Ginv, G


def block_variance_diag(block, sigma2):
    """Diagonal of ``G_k`` for blocks whose atoms are all diagonal."""
    return 1.0 / (block.atom_diagonals().T @ (1.0 / np.asarray(sigma2, dtype=float)))


def working_response(spec, mu):
    """IRLS working response and weights at the mean ``mu``.

    ``z = g(mu) + (y - mu) g'(mu) - offset`` and
    ``w = trials / (g'(mu)^2 nu(mu))``.
    """
    fam = spec.family
    mu = np.asarray(mu, dtype=float)
    fam.check_mean(mu)
    gp = fam.mu_eta_inv(mu)
    z = fam.linkfun(mu) + (spec.y - mu) * gp
    w = 1.0 / (gp ** 2 * fam.variance(mu))
    if spec.trials is not None:
        w = w * spec.trials
    if spec.offset is not None:
        z = z - spec.offset
    return z, w


@dataclass(frozen=True)
class RankReport:
    condition_i: bool
    condition_ii: bool
    shortcut_used: str


def _commutes(G, L):
    scale = np.abs(G).max() * np.abs(L).max()
    return np.abs(G @ L - L @ G).max() <= COMMUTE_RTOL * max(scale, np.finfo(float).tiny)


def check_rank_conditions(spec, state, z, force_general=False):
    """Report the positivity conditions for every variance parameter.

    Condition (i): ``rank(X, Z_k G_k Lambda_{k_l}) > rank(X)``, evaluated
    through ``rank(X, Z_k)`` when the atom has full rank and through
    ``rank(X, Z_k Lambda_{k_l})`` when ``G_k`` and the atom commute, unless
    ``force_general`` is set.  Condition (ii): ``z`` is not in the column
    space of ``X``.

    Returns
    -------
    dict
        ``(k, l) -> RankReport``.
    """
    X = spec.X
    rank_x = matrix_rank(X)
    z = np.asarray(z, dtype=float)
    coef, *_ = np.linalg.lstsq(X, z, rcond=None)
    resid = np.linalg.norm(z - X @ coef)
    cond_ii = bool(resid > RESIDUAL_RTOL * np.linalg.norm(z))

    report = {}
    for k, block in enumerate(spec.blocks):
        Zk = as_dense(block.Z)
        _, G = assemble_precision(block, state.sigma2[k])
        rank_xz = None
        for l, lam in enumerate(block.atoms):
            if not force_general and matrix_rank(lam) == block.q:
                if rank_xz is None:
                    rank_xz = matrix_rank(np.hstack([X, Zk]))
                ok, how = rank_xz > rank_x, "full-rank-Lambda"
            elif not force_general and _commutes(G, lam):
                ok, how = matrix_rank(np.hstack([X, Zk @ lam])) > rank_x, "commuting"
            else:
                ok, how = matrix_rank(np.hstack([X, Zk @ G @ lam])) > rank_x, "general"
            report[(k, l)] = RankReport(bool(ok), cond_ii, how)
    return report


def ed_upper_bounds(spec, state):
    """Rank bounds on the effective dimensions.

    Returns
    -------
    per_param : dict
        ``(k, l) -> rank(X, Z_k G_k Lambda_{k_l}) - rank(X)``.
    per_block : list of int
        ``rank(X, Z_k) - rank(X)``.
    """
    X = spec.X
    rank_x = matrix_rank(X)
    per_param, per_block = {}, []
    for k, block in enumerate(spec.blocks):
        Zk = as_dense(block.Z)
        _, G = assemble_precision(block, state.sigma2[k])
        per_block.append(matrix_rank(np.hstack([X, Zk])) - rank_x)
        for l, lam in enumerate(block.atoms):
            per_param[(k, l)] = matrix_rank(np.hstack([X, Zk @ (G @ lam)])) - rank_x
    return per_param, per_block
