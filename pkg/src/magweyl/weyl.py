"""Weyl, magnetic Weyl and corrected magnetic Weyl densities.

Energies enter through ``E = 2 tau + V``; a Landau level ``(m, n)`` is
occupied when ``(2m+1) mu h f1 + (2n+1) mu h f2 <= E`` (closed condition).
In 2-D the lattice has a single index.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .fields import FieldData
from .geometry import PreconditionError, intensities_at
from .params import SemiclassicalParams

THRESHOLD_RTOL = 1e-12


@dataclass(frozen=True)
class DensityQuery:
    fields: FieldData
    params: SemiclassicalParams
    x: np.ndarray
    omega: Callable | float = 0.0

    def omega_at(self, x):
        if callable(self.omega):
            return np.asarray(self.omega(x), dtype=float)
        return np.full(np.shape(x)[:-1], float(self.omega))


@dataclass
class IntegratedDensity:
    value: float
    quadrature_error_estimate: float
    node_count: int
    support_warning: bool = False

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "error": self.quadrature_error_estimate,
            "nodes": self.node_count,
            "support_warning": self.support_warning,
        }


def landau_count(E, a, b=None):
    """Number of lattice points ``(2m+1) a + (2n+1) b <= E`` (``m, n >= 0``).

    With ``b=None`` counts the 1-D lattice ``(2m+1) a <= E``. Vectorised
    over ``E``, ``a`` and ``b``.
    """
    E = np.asarray(E, dtype=float)
    a = np.asarray(a, dtype=float)
    slack = THRESHOLD_RTOL * np.maximum(np.abs(E), 1.0)
    if b is None:
        k = np.floor((E + slack - a) / (2.0 * a)) + 1.0
        return np.maximum(k, 0.0)
    b = np.asarray(b, dtype=float)
    E, a, b, slack = np.broadcast_arrays(E, a, b, slack)
    top = np.floor((E + slack - a - b) / (2.0 * a))
    total = np.zeros(E.shape)
    mmax = int(np.max(top, initial=-1))
    for m in range(mmax + 1):
        rest = E + slack - (2 * m + 1) * a - b
        total += np.where(rest >= 0, np.floor(rest / (2.0 * b)) + 1.0, 0.0)
    return total


def _prepare(fields, params, x):
    x = np.asarray(x, dtype=float)
    E = 2.0 * params.tau + fields.v(x)
    return x, E, fields.sqrt_g(x)


def weyl_density(query: DensityQuery):
    """Phase-space volume density of ``{a(x, xi) <= tau}`` times ``(2 pi h)^{-d}``."""
    fields, params = query.fields, query.params
    x, E, sg = _prepare(fields, params, query.x)
    Ep = np.maximum(E, 0.0)
    if fields.dim == 4:
        out = Ep**2 * sg / (32.0 * math.pi**2 * params.h**4)
    elif fields.dim == 2:
        out = Ep * sg / (4.0 * math.pi * params.h**2)
    else:
        raise ValueError("Weyl densities are implemented for d = 2 and d = 4")
    return out if np.ndim(out) else float(out)


def _intensities_checked(fields, x):
    f1, f2 = intensities_at(fields, x)
    if fields.dim == 4 and np.any(f2 <= 0):
        raise PreconditionError("magnetic Weyl density needs f1, f2 > 0")
    if fields.dim == 2 and np.any(f1 <= 0):
        raise PreconditionError("magnetic Weyl density needs f > 0")
    return f1, f2


def _mw_from(E, f1, f2, sg, params, dim):
    mh = params.mu_h
    if dim == 4:
        n = landau_count(E, mh * f1, mh * f2)
        quantum = params.mu**2 / (4.0 * math.pi**2 * params.h**2) * f1 * f2 * sg
    else:
        n = landau_count(E, mh * f1)
        quantum = params.mu / (2.0 * math.pi * params.h) * f1 * sg
    return n, quantum


def density_quantum(query: DensityQuery):
    """Density contributed by a single occupied Landau level."""
    fields, params = query.fields, query.params
    x, E, sg = _prepare(fields, params, query.x)
    f1, f2 = _intensities_checked(fields, x)
    _, q = _mw_from(E, f1, f2, sg, params, fields.dim)
    return q if np.ndim(q) else float(q)


def magnetic_weyl_density(query: DensityQuery):
    """Landau-lattice count density at ``(x, tau)``."""
    fields, params = query.fields, query.params
    x, E, sg = _prepare(fields, params, query.x)
    f1, f2 = _intensities_checked(fields, x)
    n, q = _mw_from(E, f1, f2, sg, params, fields.dim)
    out = n * q
    return out if np.ndim(out) else float(out)


def corrected_density(query: DensityQuery):
    """Correction term: threshold shift by ``omega mu^-2`` plus its smooth counterterm."""
    fields, params = query.fields, query.params
    x, E, sg = _prepare(fields, params, query.x)
    f1, f2 = _intensities_checked(fields, x)
    w = query.omega_at(x)
    shift = w / params.mu**2
    n_shift, q = _mw_from(E - shift, f1, f2, sg, params, fields.dim)
    n_base, _ = _mw_from(E, f1, f2, sg, params, fields.dim)
    if fields.dim == 4:
        smooth = E * w * sg / (16.0 * math.pi**2 * params.mu**2 * params.h**4)
    else:
        # 2-D analogue: derivative of E/(4 pi h^2) times the shift
        smooth = w * sg / (4.0 * math.pi * params.mu**2 * params.h**2)
    out = (n_shift - n_base) * q + smooth
    return out if np.ndim(out) else float(out)


DENSITIES = {
    "weyl": weyl_density,
    "magnetic_weyl": magnetic_weyl_density,
    "corrected": corrected_density,
}


def _midpoint_sum(density, fields, params, psi, lo, hi, nodes, omega, chunk=1 << 18):
    d = lo.size
    steps = (hi - lo) / nodes
    axes = [lo[i] + (np.arange(nodes[i]) + 0.5) * steps[i] for i in range(d)]
    total_pts = int(np.prod(nodes))
    vals = []
    for start in range(0, total_pts, chunk):
        idx = np.unravel_index(np.arange(start, min(start + chunk, total_pts)), tuple(nodes))
        X = np.stack([axes[i][idx[i]] for i in range(d)], axis=-1)
        w = np.asarray(psi(X), dtype=float)
        dens = np.zeros(len(X))
        nz = w != 0
        if np.any(nz):
            q = DensityQuery(fields, params, X[nz], omega)
            dens[nz] = density(q)
        vals.append(w * dens)
    cell = float(np.prod(steps))
    # exact summation keeps the result independent of chunking and order
    return math.fsum(np.concatenate(vals).tolist()) * cell


def integrate_density(density, fields: FieldData, params: SemiclassicalParams, psi, box, nodes=16,
                      omega=0.0, periodic_axes=()) -> IntegratedDensity:
    """Tensor-product midpoint rule for ``int density(x) psi(x) dx``.

    ``density`` is a name from ``DENSITIES`` or one of the density functions.
    The error estimate is ``|Q_n - Q_{n/2}|`` (first-order Richardson, since
    the integrand jumps across Landau thresholds). Faces normal to
    ``periodic_axes`` are exempt from the support check.
    """
    if isinstance(density, str):
        density = DENSITIES[density]
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    nodes = np.broadcast_to(np.asarray(nodes, dtype=int), lo.shape).copy()
    if np.any(nodes < 8):
        raise ValueError("need at least 8 nodes per axis")
    fine = _midpoint_sum(density, fields, params, psi, lo, hi, nodes, omega)
    coarse = _midpoint_sum(density, fields, params, psi, lo, hi, nodes // 2, omega)
    warn = _touches_boundary(psi, lo, hi, periodic_axes)
    if warn:
        warnings.warn("cutoff does not vanish on the integration box boundary", stacklevel=2)
    return IntegratedDensity(
        value=fine,
        quadrature_error_estimate=abs(fine - coarse),
        node_count=int(np.prod(nodes)),
        support_warning=warn,
    )


def _touches_boundary(psi, lo, hi, periodic_axes=(), samples=9):
    d = lo.size
    grids = np.meshgrid(*[np.linspace(lo[i], hi[i], samples) for i in range(d)], indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    face = np.isclose(pts, lo) | np.isclose(pts, hi)
    face[:, list(periodic_axes)] = False
    on_face = np.any(face, axis=-1)
    if not np.any(on_face):
        return False
    vals = np.asarray(psi(pts[on_face]), dtype=float)
    return bool(np.any(np.abs(vals) > 1e-12))
