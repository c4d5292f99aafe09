"""Pointwise magnetic geometry: intensities, resonances and classifiers.

The magnetic intensities are the moduli ``f1 >= f2 >= 0`` of the eigenvalues
``+-i f_j`` of ``M = g F`` with ``F_jk = d_j V_k - d_k V_j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from math import gcd

import numpy as np

from .fields import DomainError, FieldData, central_gradient
from .params import SemiclassicalParams

DEFAULT_EPS0 = 1e-2
RESONANCE_EPS = 1e-6
MAX_RESONANCE_ORDER = 5
ELL_EPS = 0.1
ELL_EPS0 = 1.0


class PreconditionError(ValueError):
    """A standing non-degeneracy assumption fails at the queried point."""


class InconsistentMatrixError(ValueError):
    """``M`` is not similar to a skew matrix through an SPD metric."""


class ChartError(ValueError):
    """A submanifold chart has a rank-deficient Jacobian."""


@dataclass(frozen=True)
class IntensityPair:
    f1: float
    f2: float

    def __post_init__(self):
        if self.f2 < 0 or self.f1 < self.f2:
            raise ValueError(f"need f1 >= f2 >= 0, got ({self.f1}, {self.f2})")

    @property
    def sigma_distance(self) -> float:
        return 0.5 * abs(self.f1 - self.f2)


@dataclass
class PointClassification:
    point: list
    intensities: IntensityPair
    sigma_distance: float
    resonances: list
    microhyperbolicity_margin: float | None
    argmin_alpha: float | None
    elliptic: bool | None
    ell_scale: float
    ell_branch: str
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["intensities"] = {"f1": self.intensities.f1, "f2": self.intensities.f2}
        out["resonances"] = [
            {"k": k, "l": l, "order": k + l, "residual": r} for k, l, r in self.resonances
        ]
        return out


def magnetic_matrix(fields: FieldData, x):
    """Return ``(F, M)`` with ``F_jk = d_j V_k - d_k V_j`` and ``M = g F``.

    Works on a single point or a batch ``(..., d)``.
    """
    J = fields.d_gauge(x)
    F = J - np.swapaxes(J, -1, -2)
    M = fields.g(x) @ F
    if not np.all(np.isfinite(M)):
        raise DomainError("non-finite magnetic matrix")
    return F, M


def _intensities_from_invariants(s, d):
    disc = s * s - 4.0 * d
    tol = 1e-12 * np.maximum(s * s, np.abs(d))
    if np.any((s < -np.sqrt(tol)) | (d < -tol)):
        raise InconsistentMatrixError("M = g F needs s = -tr(M^2)/2 >= 0 and det M >= 0")
    if np.any(disc < -tol):
        raise InconsistentMatrixError(
            f"negative discriminant {np.min(disc):.3e} for s = {np.max(s):.3e}"
        )
    root = np.sqrt(np.maximum(disc, 0.0))
    big = np.maximum(0.5 * (s + root), 0.0)
    # small root through d / big for accuracy when f2 << f1
    with np.errstate(divide="ignore", invalid="ignore"):
        small = np.where(big > 0, np.maximum(d, 0.0) / np.where(big > 0, big, 1.0), 0.0)
    return np.sqrt(big), np.sqrt(small)


def intensity_values(M):
    """Vectorised ``(f1, f2)`` arrays from a batch of 4x4 (or 2x2) matrices."""
    M = np.asarray(M, dtype=float)
    n = M.shape[-1]
    s = -0.5 * np.einsum("...ij,...ji->...", M, M)
    if n == 2:
        f = np.sqrt(np.maximum(np.linalg.det(M), 0.0))
        return f, np.zeros_like(f)
    if n != 4:
        raise ValueError("intensities are defined here for d = 2 or 4")
    return _intensities_from_invariants(s, np.linalg.det(M))


def intensity_pair(M) -> IntensityPair:
    """Magnetic intensities of a single matrix ``M = g F``."""
    f1, f2 = intensity_values(M)
    return IntensityPair(float(f1), float(f2))


def intensities_at(fields: FieldData, x):
    _, M = magnetic_matrix(fields, x)
    return intensity_values(M)


def _log_gradients(fields: FieldData, x):
    x = np.asarray(x, dtype=float)
    f1, f2 = intensities_at(fields, x)
    V = fields.v(x)
    if np.any(f2 <= 0):
        raise PreconditionError("f2 = 0: intensities must satisfy f1, f2 >= eps0 > 0")
    if np.any(V <= 0):
        raise PreconditionError("V <= 0: the potential must satisfy V >= eps0 > 0")

    def logs(y):
        a, b = intensities_at(fields, y)
        return np.stack([np.log(a), np.log(b)], axis=-1)

    G = central_gradient(logs, x, fields.eta)  # (..., d, 2)
    glv = fields.d_potential(x) / V[..., None]
    return G[..., 0], G[..., 1], glv


def phi_alpha_gradient(fields: FieldData, x, alpha):
    """Gradient of ``alpha log f1 + (1 - alpha) log f2 - log V``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    g1, g2, gv = _log_gradients(fields, x)
    return alpha * g1 + (1.0 - alpha) * g2 - gv


def affine_parts(fields: FieldData, x):
    """``(v0, v1)`` with ``grad phi_alpha = v0 + alpha v1``."""
    g1, g2, gv = _log_gradients(fields, x)
    return g2 - gv, g1 - g2


def min_affine_norm(v0, v1):
    """Closed-form ``min_{alpha in [0,1]} |v0 + alpha v1|`` and its minimiser.

    Vectorised over leading axes.
    """
    v0 = np.asarray(v0, dtype=float)
    v1 = np.asarray(v1, dtype=float)
    nn = np.einsum("...i,...i->...", v1, v1)
    dot = np.einsum("...i,...i->...", v0, v1)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(nn > 0, -dot / np.where(nn > 0, nn, 1.0), 0.0)
    alpha = np.clip(alpha, 0.0, 1.0)
    vec = v0 + alpha[..., None] * v1
    return np.sqrt(np.einsum("...i,...i->...", vec, vec)), alpha


def microhyperbolicity_margin(fields: FieldData, x):
    """Return ``(margin, alpha_bar)``; margin >= eps means the condition holds with eps."""
    v0, v1 = affine_parts(fields, x)
    margin, alpha = min_affine_norm(v0, v1)
    if np.ndim(margin) == 0:
        return float(margin), float(alpha)
    return margin, alpha


def nearest_landau_gap(V, f1, f2, mu_h):
    """Distance from ``V`` to the lattice ``(2p+1) mu_h f1 + (2n+1) mu_h f2``."""
    if f1 <= 0 or f2 <= 0:
        raise PreconditionError("ellipticity needs f1, f2 > 0")
    if mu_h <= 0:
        raise ValueError("mu*h must be positive")
    a, b = mu_h * f1, mu_h * f2
    pmax = max(int(np.floor(max(V, 0.0) / (2 * a))), 0) + 1
    nmax = max(int(np.floor(max(V, 0.0) / (2 * b))), 0) + 1
    p = np.arange(pmax + 1)[:, None]
    n = np.arange(nmax + 1)[None, :]
    levels = (2 * p + 1) * a + (2 * n + 1) * b
    return float(np.min(np.abs(V - levels)))


def ellipticity_check(fields: FieldData, x, params: SemiclassicalParams, eps: float) -> bool:
    """True when every Landau level stays at least ``eps`` away from ``2 tau + V``."""
    f1, f2 = intensities_at(fields, x)
    E = 2.0 * params.tau + float(fields.v(x))
    return nearest_landau_gap(E, float(f1), float(f2), params.mu_h) >= eps


def resonance_scan(f1, f2, M=MAX_RESONANCE_ORDER, eps=RESONANCE_EPS):
    """Coprime ``(k, l)`` with ``k + l <= M`` and ``|k f1 - l f2| < eps``.

    Sorted by order, then residual.
    """
    if M < 2:
        raise ValueError("maximal resonance order must be >= 2")
    hits = []
    for order in range(2, M + 1):
        for k in range(1, order):
            l = order - k
            if gcd(k, l) != 1:
                continue
            r = abs(k * f1 - l * f2)
            if r < eps:
                hits.append((k, l, float(r)))
    hits.sort(key=lambda t: (t[0] + t[1], t[2]))
    return hits


def numeric_hessian(fn, x, eta=None):
    """Second-order central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    d = x.size
    if eta is None:
        eta = np.finfo(float).eps ** 0.25 * max(1.0, float(np.max(np.abs(x))))
    H = np.empty((d, d))
    f0 = fn(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = eta
        H[i, i] = (fn(x + ei) - 2.0 * f0 + fn(x - ei)) / eta**2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = eta
            H[i, j] = H[j, i] = (
                fn(x + ei + ej) - fn(x + ei - ej) - fn(x - ei + ej) + fn(x - ei - ej)
            ) / (4.0 * eta**2)
    return H


def hessian_rank_check(scalar_field, x, eps0, q, chart=None, chart_point=None, hessian=None):
    """Does the (restricted) Hessian have at least ``q`` eigenvalues with ``|lambda| > eps0``?

    ``chart`` maps local coordinates ``u`` to points; ``chart(chart_point)``
    must be ``x``. The restricted Hessian is that of ``scalar_field o chart``.
    ``hessian`` optionally supplies the full Hessian analytically.
    """
    x = np.asarray(x, dtype=float)
    if chart is None:
        H = hessian(x) if hessian is not None else numeric_hessian(scalar_field, x)
    else:
        u0 = np.asarray(chart_point, dtype=float)
        if not np.allclose(chart(u0), x, atol=1e-10):
            raise ChartError("chart(chart_point) does not reproduce x")
        Jc = central_gradient(chart, u0, np.finfo(float).eps ** (1 / 3))
        if np.linalg.matrix_rank(Jc, tol=1e-8) < u0.size:
            raise ChartError("chart Jacobian is rank deficient")
        H = numeric_hessian(lambda u: scalar_field(chart(u)), u0)
    ev = np.linalg.eigvalsh(0.5 * (H + H.T))
    return int(np.sum(np.abs(ev) > eps0)) >= q


def ell_scale(fields: FieldData, x, params: SemiclassicalParams, eps=ELL_EPS, eps0=ELL_EPS0):
    """Scaling function and the dominating branch of its floor term.

    Returns ``(ell, branch)`` where branch is ``"mu_h"`` when ``(mu h)^{1/2}``
    dominates (mu >= h^{-1/3}) and ``"inv_mu"`` otherwise.
    """
    V = float(fields.v(x))
    gV = np.asarray(fields.d_potential(x), dtype=float)
    t_mh = np.sqrt(params.mu_h)
    t_im = 1.0 / params.mu
    ell_bar = eps0 * max(t_mh, t_im)
    ell = eps * np.sqrt(abs(V) + float(gV @ gV)) + 0.5 * ell_bar
    return float(ell), ("mu_h" if t_mh >= t_im else "inv_mu")


def classify_point(fields: FieldData, x, params: SemiclassicalParams, eps=DEFAULT_EPS0,
                   M=MAX_RESONANCE_ORDER, resonance_eps=RESONANCE_EPS) -> PointClassification:
    """Evaluate every pointwise predicate at ``x``."""
    x = np.asarray(x, dtype=float)
    f1, f2 = intensities_at(fields, x)
    pair = IntensityPair(float(f1), float(f2))
    notes = []
    res = resonance_scan(pair.f1, pair.f2, M, resonance_eps)
    margin = alpha = None
    elliptic = None
    if pair.f2 > 0 and float(fields.v(x)) > 0:
        margin, alpha = microhyperbolicity_margin(fields, x)
    else:
        notes.append("microhyperbolicity undefined: needs f2 > 0 and V > 0")
    if pair.f2 > 0:
        elliptic = ellipticity_check(fields, x, params, eps)
    else:
        notes.append("ellipticity undefined: f2 = 0")
    ell, branch = ell_scale(fields, x, params)
    return PointClassification(
        point=x.tolist(),
        intensities=pair,
        sigma_distance=pair.sigma_distance,
        resonances=res,
        microhyperbolicity_margin=margin,
        argmin_alpha=alpha,
        elliptic=elliptic,
        ell_scale=ell,
        ell_branch=branch,
        notes=notes,
    )
