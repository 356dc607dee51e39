"""Gaussian-Markov random fields: the latent prior and the CAR residual model.

Precisions of lattice graphs in row-major site order are banded (bandwidth at
most ``nx + 1``), so factorizations use LAPACK's banded Cholesky.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, sparse

log = logging.getLogger(__name__)

GMRF_KL = "gmrf-kl"
LAPLACIAN_PENALTY = "laplacian-penalty"
PRIOR_MODES = (GMRF_KL, LAPLACIAN_PENALTY)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class BandedCholesky:
    """Upper banded Cholesky factor ``U`` with ``Q = U^T U``."""

    ab: np.ndarray
    bandwidth: int

    @classmethod
    def factor(cls, Q: sparse.spmatrix) -> "BandedCholesky":
        Q = sparse.csr_matrix(Q)
        n = Q.shape[0]
        coo = sparse.triu(Q).tocoo()
        b = int(np.max(coo.col - coo.row)) if coo.nnz else 0
        ab = np.zeros((b + 1, n))
        ab[b + coo.row - coo.col, coo.col] = coo.data
        try:
            cb = linalg.cholesky_banded(ab, lower=False)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(f"precision matrix is not positive definite: {exc}") from None
        return cls(cb, b)

    @property
    def n(self) -> int:
        return self.ab.shape[1]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(self.ab[self.bandwidth])))

    def solve_upper(self, w: np.ndarray) -> np.ndarray:
        """Solve ``U x = w``; with ``w`` standard normal, ``x ~ N(0, Q^{-1})``."""
        return linalg.solve_banded((0, self.bandwidth), self.ab, w)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return linalg.cho_solve_banded((self.ab, False), b)

    def inverse_diagonal(self) -> np.ndarray:
        return np.diag(self.solve(np.eye(self.n))).copy()


@dataclass(frozen=True, eq=False)
class GmrfPrior:
    """Zero-mean field with precision ``tau * (L + eps I)``."""

    Q: sparse.csr_matrix
    tau: float
    eps: float
    logdet: float
    chol: BandedCholesky = field(repr=False)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def precision(self) -> sparse.csr_matrix:
        return self.Q


def build_prior(L, tau: float = 1.0, eps: float = 1e-2) -> GmrfPrior:
    if not tau > 0:
        raise ValueError("tau must be positive")
    if not eps > 0:
        raise ValueError("eps must be positive (eps = 0 gives a singular, intrinsic prior)")
    L = sparse.csr_matrix(L, dtype=float)
    Q = (tau * (L + eps * sparse.identity(L.shape[0]))).tocsr()
    chol = BandedCholesky.factor(Q)
    return GmrfPrior(Q, float(tau), float(eps), chol.logdet(), chol)


@dataclass(frozen=True, eq=False)
class CarModel:
    """Conditional autoregressive field with covariance ``lam * M(rho)^{-1}``.

    ``M = D - rho A`` by default.  With ``literal`` set, ``M`` is the symmetric part
    of ``D - rho A D``.
    """

    rho: float
    lam: float
    adjacency: sparse.csr_matrix
    literal: bool = False

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")

    @property
    def degree(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    def structure(self) -> sparse.csr_matrix:
        return car_structure(self.adjacency, self.rho, self.literal)

    @property
    def precision(self) -> sparse.csr_matrix:
        return (self.structure() / self.lam).tocsr()

    def covariance(self) -> np.ndarray:
        """Dense covariance, for small graphs and tests."""
        return self.lam * np.linalg.inv(self.structure().toarray())

    def marginal_variances(self) -> np.ndarray:
        return self.lam * BandedCholesky.factor(self.structure()).inverse_diagonal()


def car_structure(adjacency, rho: float, literal: bool = False) -> sparse.csr_matrix:
    A = sparse.csr_matrix(adjacency, dtype=float)
    d = np.asarray(A.sum(axis=1)).ravel()
    D = sparse.diags(d)
    if literal:
        AD = A @ D
        return (D - rho * 0.5 * (AD + AD.T)).tocsr()
    return (D - rho * A).tocsr()


def sample_gmrf(model, n_samples: int, seed) -> np.ndarray:
    """Draw ``n_samples`` zero-mean fields, shape ``(n_samples, n)``.

    Works for :class:`GmrfPrior` and :class:`CarModel`.  Solves ``U x = w`` with
    ``U`` the Cholesky factor of the precision, so the result is exactly
    reproducible for a fixed seed.
    """
    if isinstance(model, GmrfPrior):
        chol = model.chol
    else:
        chol = BandedCholesky.factor(model.precision)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((chol.n, int(n_samples)))
    return chol.solve_upper(w).T.copy()


def kl_diag_to_gmrf(mu, sigma2, prior: GmrfPrior) -> float:
    """KL from a diagonal Gaussian ``N(mu, diag sigma2)`` to the prior, summed over channels.

    ``mu`` and ``sigma2`` have shape ``(n,)`` or ``(n, d_Z)``; each latent channel
    is an independent field with the same prior precision.
    """
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if mu.ndim == 1:
        mu, sigma2 = mu[:, None], sigma2[:, None]
    if mu.shape != sigma2.shape or mu.shape[0] != prior.n:
        raise ValueError(f"mu {mu.shape} / sigma2 {sigma2.shape} do not match prior size {prior.n}")
    if not np.all(sigma2 > 0):
        raise ValueError("posterior variances must be positive")
    Q = prior.Q
    n, d = mu.shape
    trace = Q.diagonal() @ sigma2
    quad = np.einsum("ik,ik->k", mu, Q @ mu)
    per_channel = 0.5 * (trace + quad - n - prior.logdet - np.log(sigma2).sum(axis=0))
    return float(per_channel.sum())


def quadratic_penalty(z, L) -> float:
    """``sum_k z_k^T L z_k`` over latent channels."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    return float(np.einsum("ik,ik->", z, L @ z))


RHO_GRID = np.linspace(-0.99, 0.99, 199)


def _pseudo_loglik(x: np.ndarray, adjacency, rho: float, literal: bool) -> float:
    # Conditional residual of site s is (Mx)_s / M_ss with variance lam / M_ss; lam profiled out.
    M = car_structure(adjacency, rho, literal)
    mdiag = M.diagonal()
    keep = mdiag > 0
    r = (M @ x)[keep]
    lam_hat = np.mean(r ** 2 / mdiag[keep])
    return -0.5 * keep.sum() * np.log(lam_hat) + 0.5 * np.sum(np.log(mdiag[keep]))


def calibrate_lambda(adjacency, rho: float, variance: float, literal: bool = False) -> float:
    """Scale so that the mean marginal variance of ``lam * M(rho)^{-1}`` equals ``variance``."""
    inv_diag = BandedCholesky.factor(car_structure(adjacency, rho, literal)).inverse_diagonal()
    return float(variance / inv_diag.mean())


def fit_car(residual, adjacency, literal: bool = False) -> CarModel:
    """Fit ``rho`` by maximum pseudo-likelihood and calibrate ``lam`` to the residual variance."""
    x = np.asarray(residual, dtype=float).ravel()
    adjacency = sparse.csr_matrix(adjacency, dtype=float)
    if x.size != adjacency.shape[0]:
        raise ValueError("residual length does not match adjacency size")
    if x.size < 9:
        raise ValueError("fit_car needs at least 9 sites")
    variance = float(np.var(x))
    if not variance > 0:
        raise ValueError("residuals have zero variance")
    x = x - x.mean()

    def ok(rho):
        try:
            BandedCholesky.factor(car_structure(adjacency, rho, literal))
            return True
        except NotPositiveDefiniteError:
            return False

    grid = RHO_GRID if not literal else np.array([r for r in RHO_GRID if ok(r)])
    scores = np.array([_pseudo_loglik(x, adjacency, r, literal) for r in grid])
    best = np.flatnonzero(scores >= scores.max() - 1e-12 * abs(scores.max()))
    k = best[np.argmin(np.abs(grid[best]))]
    step = RHO_GRID[1] - RHO_GRID[0]
    lo, hi = max(grid[k] - step, grid[0]), min(grid[k] + step, grid[-1])
    res = optimize.minimize_scalar(lambda r: -_pseudo_loglik(x, adjacency, r, literal), bounds=(lo, hi),
                                   method="bounded", options={"xatol": 1e-7})
    rho = float(res.x)
    if _pseudo_loglik(x, adjacency, rho, literal) < scores[k]:
        rho = float(grid[k])
    lam = calibrate_lambda(adjacency, rho, variance, literal)
    log.debug("fit_car: rho=%.4f lam=%.4g var=%.4g", rho, lam, variance)
    return CarModel(float(rho), lam, adjacency, literal)
