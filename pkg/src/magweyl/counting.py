"""Eigenvalue counting ``N(tau) = #{lambda <= tau}`` for Hermitian operators.

Three routes: dense diagonalisation (oracle tier), Sylvester inertia of
``H - tau`` via symmetric factorisation (exact, sparse), and the kernel
polynomial method (stochastic Chebyshev trace of the step function).
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .discrete import DiscreteHamiltonian

DENSE_CAP = 6000
INERTIA_CAP = 300_000
DENSE_LDL_CAP = 1500
CLOSED_RTOL = 1e-12
DEFAULT_MOMENTS = 1024


class CapExceededError(ValueError):
    pass


class FactorizationError(RuntimeError):
    pass


class LanczosError(RuntimeError):
    pass


@dataclass
class CountingCurve:
    tau_grid: np.ndarray
    counts: np.ndarray
    method: str
    bounds: tuple | None = None
    stderr: np.ndarray | None = None
    eigenvalues: np.ndarray | None = None
    weights: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        err = self.stderr if self.stderr is not None else np.zeros_like(self.counts)
        lines = ["tau,count,stderr,method"]
        for t, c, e in zip(self.tau_grid, self.counts, err):
            lines.append(f"{t:.17g},{c:.17g},{e:.17g},{self.method}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "method": self.method,
            "tau": np.asarray(self.tau_grid).tolist(),
            "count": np.asarray(self.counts).tolist(),
            "stderr": None if self.stderr is None else np.asarray(self.stderr).tolist(),
            "bounds": None if self.bounds is None else [float(b) for b in self.bounds],
            **self.meta,
        }


# ---------------------------------------------------------------------------
# operator adapters


def _size(H):
    return H.shape[0]


def _sparse(H):
    if isinstance(H, DiscreteHamiltonian):
        return H.to_sparse()
    if sp.issparse(H):
        return sp.csr_matrix(H)
    return sp.csr_matrix(np.asarray(H))


def _dense(H):
    if isinstance(H, DiscreteHamiltonian):
        return H.to_dense()
    if sp.issparse(H):
        return H.toarray()
    return np.asarray(H)


def _matvec(H):
    if isinstance(H, DiscreteHamiltonian):
        if H.grid.size <= INERTIA_CAP:
            A = H.to_sparse()
            return A.dot
        return H.apply
    if sp.issparse(H):
        A = sp.csr_matrix(H)
        return A.dot
    A = np.asarray(H)
    return A.dot


def _scale(H):
    A = _sparse(H)
    return float(abs(A).sum(axis=1).max()) if A.nnz else 1.0


def _closed(tau, scale):
    return np.asarray(tau, dtype=float) + CLOSED_RTOL * max(scale, 1.0)


# ---------------------------------------------------------------------------
# dense


def dense_eigenvalues(H, cap=DENSE_CAP):
    n = _size(H)
    if n > cap:
        raise CapExceededError(
            f"dimension {n} exceeds the dense cap {cap}; use kpm_count or inertia_count"
        )
    return np.linalg.eigvalsh(_dense(H))


def dense_count(H, tau_grid, cap=DENSE_CAP) -> CountingCurve:
    """Exact counts from a full Hermitian eigendecomposition."""
    ev = dense_eigenvalues(H, cap)
    tau = np.asarray(tau_grid, dtype=float)
    scale = float(np.max(np.abs(ev))) if ev.size else 1.0
    counts = np.searchsorted(ev, _closed(tau, scale), side="right").astype(float)
    return CountingCurve(tau, counts, "dense", bounds=(ev[0], ev[-1]), eigenvalues=ev)


def weighted_dense_count(H, tau_grid, weights, cap=DENSE_CAP) -> CountingCurve:
    """``tr(diag(weights) theta(tau - H))`` from eigenvectors."""
    n = _size(H)
    if n > cap:
        raise CapExceededError(f"dimension {n} exceeds the dense cap {cap}")
    ev, vecs = np.linalg.eigh(_dense(H))
    w = np.asarray(weights, dtype=float).ravel()
    loc = np.einsum("i,ij->j", w, np.abs(vecs) ** 2)
    tau = np.asarray(tau_grid, dtype=float)
    scale = float(np.max(np.abs(ev))) if ev.size else 1.0
    cut = np.searchsorted(ev, _closed(tau, scale), side="right")
    csum = np.concatenate([[0.0], np.cumsum(loc)])
    return CountingCurve(tau, csum[cut], "dense-weighted", bounds=(ev[0], ev[-1]), eigenvalues=ev,
                         weights=loc)


# ---------------------------------------------------------------------------
# spectral bounds


def _lanczos_extremes(mv, n, steps, rng):
    steps = min(steps, n)
    Q = np.zeros((n, steps), dtype=complex)
    alpha = np.zeros(steps)
    beta = np.zeros(steps)
    q = rng.standard_normal(n) + 0j
    q /= np.linalg.norm(q)
    k = 0
    for k in range(steps):
        Q[:, k] = q
        w = mv(q)
        alpha[k] = np.real(np.vdot(q, w))
        w = w - Q[:, : k + 1] @ (Q[:, : k + 1].conj().T @ w)
        w = w - Q[:, : k + 1] @ (Q[:, : k + 1].conj().T @ w)
        b = np.linalg.norm(w)
        if not np.isfinite(b):
            raise LanczosError("non-finite Lanczos vector")
        if k == steps - 1:
            beta[k] = b
            break
        if b <= 1e-10 * max(1.0, abs(alpha[k])):
            # invariant subspace: continue with a fresh orthogonal direction
            r = rng.standard_normal(n) + 0j
            r = r - Q[:, : k + 1] @ (Q[:, : k + 1].conj().T @ r)
            r = r - Q[:, : k + 1] @ (Q[:, : k + 1].conj().T @ r)
            nr = np.linalg.norm(r)
            if nr < 1e-12:
                beta[k] = 0.0
                break
            q = r / nr
            beta[k] = 0.0
        else:
            q = w / b
            beta[k] = b
    m = k + 1
    T = np.diag(alpha[:m]) + np.diag(beta[: m - 1], 1) + np.diag(beta[: m - 1], -1)
    theta, S = np.linalg.eigh(T)
    resid = np.abs(beta[m - 1] * S[-1, :])
    return theta[0], theta[-1], resid[0], resid[-1]


def spectral_bounds(H, steps=80, seed=0, max_restarts=5):
    """Padded Lanczos estimates ``(lo, hi)`` bracketing the spectrum."""
    mv = _matvec(H)
    n = _size(H)
    last = None
    for attempt in range(max_restarts):
        rng = np.random.default_rng([seed, attempt])
        try:
            lo, hi, rlo, rhi = _lanczos_extremes(mv, n, steps, rng)
            break
        except LanczosError as exc:
            last = exc
    else:
        raise LanczosError(f"Lanczos failed {max_restarts} times: {last}")
    spread = hi - lo
    scale = max(abs(lo), abs(hi), 1e-300)
    pad = 0.01 * spread if spread > 1e-8 * scale else 0.01 * scale
    return float(lo - max(pad, 2 * rlo)), float(hi + max(pad, 2 * rhi))


# ---------------------------------------------------------------------------
# kernel polynomial method


def jackson_kernel(m):
    n = np.arange(m)
    a = np.pi / (m + 1)
    return ((m - n + 1) * np.cos(a * n) + np.sin(a * n) / np.tan(a)) / (m + 1)


def step_coefficients(t, m):
    """Chebyshev coefficients of ``1_{x <= t}`` on ``[-1, 1]``."""
    th = np.arccos(np.clip(t, -1.0, 1.0))
    n = np.arange(1, m)
    c = np.empty(np.shape(th) + (m,))
    c[..., 0] = (np.pi - th) / np.pi
    c[..., 1:] = -2.0 * np.sin(np.multiply.outer(th, n)) / (n * np.pi)
    return c


def _probe(seed, index, n):
    # jumped() gives each probe a disjoint 2^128 block of the seed's stream
    rng = np.random.Generator(np.random.Philox(key=int(seed)).jumped(int(index)))
    return rng.integers(0, 2, size=n).astype(float) * 2.0 - 1.0


def _probe_moments(mv, z, moments, center, half):
    """Chebyshev moments ``z^* T_n(Ht) z`` with the doubling identities."""
    def op(v):
        return (mv(v) - center * v) / half

    half_m = (moments + 1) // 2
    mu = np.zeros(moments)
    t0 = z.astype(complex)
    t1 = op(t0)
    mu0 = np.real(np.vdot(t0, t0))
    mu1 = np.real(np.vdot(t0, t1))
    mu[0] = mu0
    if moments > 1:
        mu[1] = mu1
    prev, cur = t0, t1
    for k in range(1, half_m):
        # prev = T_{k-1} z, cur = T_k z
        if 2 * k < moments:
            mu[2 * k] = 2.0 * np.real(np.vdot(cur, cur)) - mu0
        nxt = 2.0 * op(cur) - prev
        if 2 * k + 1 < moments:
            mu[2 * k + 1] = 2.0 * np.real(np.vdot(nxt, cur)) - mu1
        prev, cur = cur, nxt
    return mu


def kpm_count(H, tau_grid, moments=DEFAULT_MOMENTS, probes=32, seed=0, bounds=None, weights=None,
              n_jobs=1) -> CountingCurve:
    """Stochastic estimate of ``tr(W theta(tau - H))`` with Jackson damping.

    ``W = diag(weights)`` (default identity); probes are Rademacher vectors
    scaled by ``sqrt(weights)``. Each probe has its own counter-based stream
    and the reductions run in probe order, so results do not depend on
    ``n_jobs``.
    """
    if moments < 64:
        raise ValueError("need at least 64 moments")
    if probes < 8:
        raise ValueError("need at least 8 probes")
    n = _size(H)
    mv = _matvec(H)
    if bounds is None:
        bounds = spectral_bounds(H, seed=seed)
    lo, hi = bounds
    tau = np.asarray(tau_grid, dtype=float)
    sw = None
    if weights is not None:
        w = np.asarray(weights, dtype=float).ravel()
        if np.any(w < 0):
            raise ValueError("kpm weights must be non-negative")
        sw = np.sqrt(w)

    for _ in range(4):
        center, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
        if half <= 0:
            half = max(abs(center), 1.0) * 1e-2

        def one(r):
            z = _probe(seed, r, n)
            if sw is not None:
                z = z * sw
            return _probe_moments(mv, z, moments, center, half)

        if n_jobs == 1:
            mom = [one(r) for r in range(probes)]
        else:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                mom = list(pool.map(one, range(probes)))
        mom = np.array(mom)
        # moments of a bounded spectrum satisfy |mu_n| <= mu_0
        if np.all(np.abs(mom) <= mom[:, :1] * (1 + 1e-6) + 1e-9):
            break
        lo, hi = center - 1.2 * half, center + 1.2 * half
    else:
        raise LanczosError("spectral bounds do not bracket the operator")

    t = (tau - center) / half
    if np.any(np.abs(t) > 1):
        warnings.warn("tau outside the spectral bounds; clamped", stacklevel=2)
    coef = step_coefficients(np.clip(t, -1, 1), moments) * jackson_kernel(moments)
    per_probe = mom @ coef.T  # (probes, ntau)
    est = per_probe.mean(axis=0)
    err = per_probe.std(axis=0, ddof=1) / np.sqrt(probes)
    return CountingCurve(
        tau, est, "kpm", bounds=(lo, hi), stderr=err,
        meta={"moments": moments, "probes": probes, "seed": seed},
    )


# ---------------------------------------------------------------------------
# inertia


def _dense_ldl_negatives(A):
    A = 0.5 * (A + A.conj().T)
    if np.iscomplexobj(A):
        A[np.diag_indices_from(A)] = A.diagonal().real
    _, D, _ = sla.ldl(A, hermitian=True)
    n = D.shape[0]
    neg = 0
    i = 0
    while i < n:
        if i + 1 < n and D[i + 1, i] != 0:
            neg += int(np.sum(np.linalg.eigvalsh(D[i:i + 2, i:i + 2]) < 0))
            i += 2
        else:
            d = np.real(D[i, i])
            if d == 0:
                raise FactorizationError("zero pivot")
            neg += int(d < 0)
            i += 1
    return neg


def _sparse_ldl_negatives(A):
    lu = spla.splu(
        sp.csc_matrix(A),
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options={"SymmetricMode": True},
    )
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise FactorizationError("symmetric factorisation needed off-diagonal pivots")
    d = lu.U.diagonal()
    if np.any(d == 0) or not np.all(np.isfinite(d)):
        raise FactorizationError("zero or non-finite pivot")
    return int(np.sum(np.real(d) < 0))


def inertia_count(H, tau, cap=INERTIA_CAP) -> int:
    """Exact ``#{lambda <= tau}`` as the negative inertia of ``H - tau'``.

    ``tau' = tau + 1e-12 * scale`` implements the closed convention and moves
    the shift off an eigenvalue sitting exactly at ``tau``.
    """
    n = _size(H)
    if n > cap:
        raise CapExceededError(f"dimension {n} exceeds the inertia cap {cap}")
    A = _sparse(H)
    scale = _scale(H)
    shift = float(_closed(tau, scale))
    errors = []
    for attempt in range(3):
        M = A - (shift + attempt * CLOSED_RTOL * max(scale, 1.0)) * sp.identity(n, format="csr")
        try:
            if n <= DENSE_LDL_CAP:
                return _dense_ldl_negatives(M.toarray())
            return _sparse_ldl_negatives(M)
        except (FactorizationError, RuntimeError) as exc:
            errors.append(str(exc))
    raise FactorizationError("; ".join(errors))


def inertia_curve(H, tau_grid, cap=INERTIA_CAP) -> CountingCurve:
    tau = np.asarray(tau_grid, dtype=float)
    counts = np.array([inertia_count(H, t, cap) for t in tau], dtype=float)
    return CountingCurve(tau, counts, "inertia")


# ---------------------------------------------------------------------------
# separable sum-sets


def convolve_counts(curve12: CountingCurve, curve34: CountingCurve, tau_grid) -> CountingCurve:
    """Counting curve of ``H12 (x) I + I (x) H34`` from both eigenvalue lists."""
    if curve12.eigenvalues is None or curve34.eigenvalues is None:
        raise ValueError("convolution needs eigenvalue-backed curves")
    ev1 = np.asarray(curve12.eigenvalues)
    ev2 = np.asarray(curve34.eigenvalues)
    w1 = np.ones_like(ev1) if curve12.weights is None else np.asarray(curve12.weights)
    w2 = np.ones_like(ev2) if curve34.weights is None else np.asarray(curve34.weights)
    order = np.argsort(ev2, kind="stable")
    ev2, w2 = ev2[order], w2[order]
    csum = np.concatenate([[0.0], np.cumsum(w2)])
    tau = np.asarray(tau_grid, dtype=float)
    scale = float(np.max(np.abs(ev1)) + np.max(np.abs(ev2)))
    tc = _closed(tau, scale)
    idx = np.searchsorted(ev2, tc[:, None] - ev1[None, :], side="right")
    counts = (csum[idx] * w1[None, :]).sum(axis=1)
    weighted = curve12.weights is not None or curve34.weights is not None
    return CountingCurve(tau, counts, "convolved" + ("-weighted" if weighted else ""))


# ---------------------------------------------------------------------------
# estimator facade


class SpectralCounter(BaseEstimator):
    """Counting-function estimator: ``fit(H)`` then ``predict(tau_grid)``.

    ``method`` is ``"dense"``, ``"inertia"`` or ``"kpm"``.
    """

    def __init__(self, method="dense", moments=DEFAULT_MOMENTS, probes=32, seed=0, n_jobs=1,
                 dense_cap=DENSE_CAP):
        self.method = method
        self.moments = moments
        self.probes = probes
        self.seed = seed
        self.n_jobs = n_jobs
        self.dense_cap = dense_cap

    def fit(self, H, y=None):
        if self.method not in ("dense", "inertia", "kpm"):
            raise ValueError(f"unknown counting method {self.method!r}")
        self.operator_ = H
        self.n_states_ = _size(H)
        if self.method == "dense":
            self.eigenvalues_ = dense_eigenvalues(H, self.dense_cap)
            self.bounds_ = (float(self.eigenvalues_[0]), float(self.eigenvalues_[-1]))
        elif self.method == "kpm":
            self.bounds_ = spectral_bounds(H, seed=self.seed)
        return self

    def count_curve(self, tau_grid) -> CountingCurve:
        check_is_fitted(self, "n_states_")
        if self.method == "dense":
            return dense_count(self.operator_, tau_grid, self.dense_cap)
        if self.method == "inertia":
            return inertia_curve(self.operator_, tau_grid)
        return kpm_count(self.operator_, tau_grid, self.moments, self.probes, self.seed,
                         bounds=self.bounds_, n_jobs=self.n_jobs)

    def predict(self, tau_grid):
        return self.count_curve(tau_grid).counts
