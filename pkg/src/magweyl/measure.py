"""Power-law fits and Monte-Carlo estimates of sublevel-set measures."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .fields import FieldData
from .geometry import affine_parts

MIN_HITS = 25


class DegenerateFitError(ValueError):
    pass


class PowerLawRegressor(RegressorMixin, BaseEstimator):
    """Least-squares fit of ``y = C * prod x_i ** a_i`` in log-log space.

    ``X`` has one column per scaling variable. After fitting, ``coef_`` holds
    the exponents, ``stderr_`` their standard errors and ``prefactor_`` is C.
    """

    def __init__(self, fit_prefactor=True):
        self.fit_prefactor = fit_prefactor

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=float)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y have different lengths")
        if np.any(X <= 0) or np.any(y <= 0):
            raise DegenerateFitError("power-law fit needs positive data")
        A = np.log(X)
        if self.fit_prefactor:
            A = np.column_stack([np.ones(len(y)), A])
        ly = np.log(y)
        n, p = A.shape
        if n < p or np.linalg.matrix_rank(A) < p:
            raise DegenerateFitError(f"{n} points cannot determine {p} parameters")
        beta, *_ = np.linalg.lstsq(A, ly, rcond=None)
        resid = ly - A @ beta
        dof = n - p
        sigma2 = float(resid @ resid) / dof if dof > 0 else 0.0
        cov = sigma2 * np.linalg.inv(A.T @ A)
        se = np.sqrt(np.diag(cov))
        if self.fit_prefactor:
            self.prefactor_ = float(np.exp(beta[0]))
            self.coef_ = beta[1:]
            self.stderr_ = se[1:]
        else:
            self.prefactor_ = 1.0
            self.coef_ = beta
            self.stderr_ = se
        self.residuals_ = resid
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return self.prefactor_ * np.exp(np.log(X) @ self.coef_)


@dataclass
class MeasureEstimate:
    rho: np.ndarray
    nu: np.ndarray
    hits: np.ndarray
    samples: int
    q: float
    q_stderr: float
    used: np.ndarray

    def table(self):
        return list(zip(self.rho.tolist(), self.nu.tolist()))


def _philox(seed, block):
    return np.random.Generator(np.random.Philox(key=int(seed)).jumped(int(block)))


def field_gradient_norm(fields: FieldData):
    """``(x, alpha) -> |grad phi_alpha(x)|`` for batches of points."""

    def norm(X, alpha):
        v0, v1 = affine_parts(fields, X)
        vec = v0 + alpha[:, None] * v1
        return np.sqrt(np.einsum("ij,ij->i", vec, vec))

    return norm


def nu_estimate(norm_fn, box, rho_grid, samples=100_000, seed=0, block_size=20_000, n_jobs=1):
    """Monte-Carlo measure of ``{(x, alpha): |grad phi_alpha| <= rho}``.

    ``norm_fn`` is either a :class:`FieldData` or a vectorised callable
    ``(X, alpha) -> norms``. ``box`` is a ``(lower, upper)`` pair of arrays.
    Samples are drawn in fixed blocks from counter-based streams, so the
    result does not depend on ``n_jobs``.
    """
    if isinstance(norm_fn, FieldData):
        norm_fn = field_gradient_norm(norm_fn)
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    rho = np.sort(np.asarray(rho_grid, dtype=float))
    if np.any(rho <= 0) or np.any(rho > 1):
        raise ValueError("rho values must lie in (0, 1]")
    if samples < 10_000:
        raise ValueError("need at least 10^4 samples")
    nblocks = -(-samples // block_size)
    sizes = [min(block_size, samples - b * block_size) for b in range(nblocks)]

    def run(b):
        rng = _philox(seed, b)
        X = lo + (hi - lo) * rng.random((sizes[b], lo.size))
        alpha = rng.random(sizes[b])
        vals = norm_fn(X, alpha)
        return np.array([np.count_nonzero(vals <= r) for r in rho], dtype=np.int64)

    if n_jobs == 1:
        parts = [run(b) for b in range(nblocks)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(run, range(nblocks)))
    hits = np.sum(parts, axis=0)
    volume = float(np.prod(hi - lo))
    nu = volume * hits / samples
    if hits[-1] == 0:
        raise DegenerateFitError("no samples below the largest rho")
    used = hits >= MIN_HITS
    q = q_se = float("nan")
    if np.count_nonzero(used) >= 2:
        fit = PowerLawRegressor().fit(rho[used], nu[used])
        q, q_se = float(fit.coef_[0]), float(fit.stderr_[0])
    return MeasureEstimate(rho=rho, nu=nu, hits=hits, samples=samples, q=q, q_stderr=q_se, used=used)
