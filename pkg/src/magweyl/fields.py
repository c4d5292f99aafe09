"""Evaluable field triples (g^{jk}, V_j, V) with derivative access.

All callables are vectorised: they accept points of shape ``(..., d)`` and
return arrays with the leading batch shape preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

FD_EPS = np.finfo(float).eps ** (1.0 / 3.0)


class DomainError(ValueError):
    """Raised when a field or one of its derivatives is non-finite."""


def _finite(arr, what):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"non-finite {what}")
    return arr


def central_gradient(fn, x, eta):
    """Central-difference gradient of a batched scalar or array function.

    Returns an array whose axis ``-1 - k`` (after the batch axes) indexes the
    derivative direction; for scalar ``fn`` the shape is ``(..., d)``.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = eta
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * eta))
    # stack derivative direction right after the batch axes
    batch_ndim = x.ndim - 1
    return np.stack(cols, axis=batch_ndim)


class Polynomial:
    """Sparse multivariate polynomial ``sum c * prod x_i**p_i``."""

    def __init__(self, terms: Mapping[tuple, float], dim: int):
        self.dim = int(dim)
        self.terms = {}
        for powers, coef in terms.items():
            powers = tuple(int(p) for p in powers)
            if len(powers) != self.dim or min(powers, default=0) < 0:
                raise ValueError(f"bad monomial powers {powers} for dim {dim}")
            if coef != 0.0:
                self.terms[powers] = self.terms.get(powers, 0.0) + float(coef)

    @classmethod
    def constant(cls, value, dim):
        return cls({(0,) * dim: value}, dim)

    @classmethod
    def variable(cls, i, dim, shift=0.0):
        p = [0] * dim
        p[i] = 1
        return cls({tuple(p): 1.0, (0,) * dim: -shift}, dim)

    def __add__(self, other):
        if not isinstance(other, Polynomial):
            other = Polynomial.constant(other, self.dim)
        out = dict(self.terms)
        for k, v in other.terms.items():
            out[k] = out.get(k, 0.0) + v
        return Polynomial(out, self.dim)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial({k: -v for k, v in self.terms.items()}, self.dim)

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, other):
        if not isinstance(other, Polynomial):
            return Polynomial({k: v * other for k, v in self.terms.items()}, self.dim)
        out = {}
        for k1, v1 in self.terms.items():
            for k2, v2 in other.terms.items():
                k = tuple(a + b for a, b in zip(k1, k2))
                out[k] = out.get(k, 0.0) + v1 * v2
        return Polynomial(out, self.dim)

    __rmul__ = __mul__

    def __pow__(self, n):
        out = Polynomial.constant(1.0, self.dim)
        for _ in range(int(n)):
            out = out * self
        return out

    def derivative(self, i):
        out = {}
        for powers, coef in self.terms.items():
            if powers[i] == 0:
                continue
            p = list(powers)
            p[i] -= 1
            out[tuple(p)] = out.get(tuple(p), 0.0) + coef * powers[i]
        return Polynomial(out, self.dim)

    @property
    def degree(self):
        return max((sum(k) for k in self.terms), default=0)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for powers, coef in self.terms.items():
            term = np.full(x.shape[:-1], coef)
            for i, p in enumerate(powers):
                if p:
                    term = term * x[..., i] ** p
            out = out + term
        return out

    def gradient(self, x):
        return np.stack([self.derivative(i)(x) for i in range(self.dim)], axis=-1)

    def hessian(self, x):
        rows = [
            np.stack([self.derivative(i).derivative(j)(x) for j in range(self.dim)], axis=-1)
            for i in range(self.dim)
        ]
        return np.stack(rows, axis=-2)

    def to_list(self):
        return [[list(k), v] for k, v in sorted(self.terms.items())]

    def __repr__(self):
        return f"Polynomial({self.terms!r}, dim={self.dim})"


@dataclass(frozen=True)
class FieldData:
    """Metric ``g^{jk}``, magnetic potential ``V_j`` and potential ``V``.

    Analytic derivative closures are optional; missing ones fall back to
    central differences with step ``FD_EPS * fd_scale``.

    ``linear_gauge`` is a constant matrix ``A`` such that ``V_k - (A x)_k`` is
    periodic; periodic grids need it to build boundary twists.
    """

    metric: Callable
    gauge: Callable
    potential: Callable
    dim: int = 4
    gauge_jacobian: Callable | None = None
    potential_gradient: Callable | None = None
    potential_hessian: Callable | None = None
    metric_gradient: Callable | None = None
    linear_gauge: np.ndarray | None = None
    fd_scale: float = 1.0
    name: str = "custom"
    params: dict = field(default_factory=dict)

    @property
    def eta(self) -> float:
        return FD_EPS * self.fd_scale

    def _check_x(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"points must have trailing dimension {self.dim}, got {x.shape}")
        return x

    def g(self, x):
        x = self._check_x(x)
        G = _finite(self.metric(x), "metric")
        if np.any(np.linalg.eigvalsh(G)[..., 0] <= 0):
            raise DomainError("metric is not positive definite at a queried point")
        return G

    def a(self, x):
        x = self._check_x(x)
        return _finite(self.gauge(x), "gauge potential")

    def v(self, x):
        x = self._check_x(x)
        return _finite(self.potential(x), "potential")

    def d_gauge(self, x):
        """``J[..., j, k] = d_j V_k``."""
        x = self._check_x(x)
        if self.gauge_jacobian is not None:
            return _finite(self.gauge_jacobian(x), "gauge jacobian")
        return _finite(central_gradient(self.gauge, x, self.eta), "gauge jacobian")

    def d_potential(self, x):
        x = self._check_x(x)
        if self.potential_gradient is not None:
            return _finite(self.potential_gradient(x), "potential gradient")
        return _finite(central_gradient(self.potential, x, self.eta), "potential gradient")

    def dd_potential(self, x):
        x = self._check_x(x)
        if self.potential_hessian is not None:
            return _finite(self.potential_hessian(x), "potential hessian")
        return _finite(central_gradient(self.d_potential, x, self.eta), "potential hessian")

    def d_metric(self, x):
        """``D[..., j, k, m] = d_j g^{km}``."""
        x = self._check_x(x)
        if self.metric_gradient is not None:
            return _finite(self.metric_gradient(x), "metric gradient")
        return _finite(central_gradient(self.metric, x, self.eta), "metric gradient")

    def sqrt_g(self, x):
        """``sqrt(det(g^{jk})^{-1})``, the Riemannian volume density."""
        return 1.0 / np.sqrt(np.linalg.det(self.g(x)))

    def describe(self) -> dict:
        return {"family": self.name, "dim": self.dim, **self.params}


# ---------------------------------------------------------------------------
# built-in families


def _const_metric(metric, dim):
    G = np.eye(dim) if metric is None else np.array(metric, dtype=float)
    if G.shape != (dim, dim):
        raise ValueError(f"metric must be {dim}x{dim}")
    if not np.allclose(G, G.T):
        raise ValueError("metric must be symmetric")
    if np.linalg.eigvalsh(G).min() <= 0:
        raise ValueError("metric must be positive definite")
    return G


def _const_metric_callables(G):
    dim = G.shape[0]

    def metric(x):
        x = np.asarray(x)
        return np.broadcast_to(G, x.shape[:-1] + (dim, dim)).copy()

    def metric_gradient(x):
        x = np.asarray(x)
        return np.zeros(x.shape[:-1] + (dim, dim, dim))

    return metric, metric_gradient


def linear_family(A, v0=1.0, grad_v=None, metric=None, name="linear-gauge", params=None):
    """Gauge ``V = A x``, potential ``v0 + c.x``, constant metric."""
    A = np.array(A, dtype=float)
    dim = A.shape[0]
    c = np.zeros(dim) if grad_v is None else np.array(grad_v, dtype=float)
    G = _const_metric(metric, dim)
    metric_fn, metric_grad = _const_metric_callables(G)

    def gauge(x):
        return np.asarray(x) @ A.T

    def gauge_jacobian(x):
        x = np.asarray(x)
        return np.broadcast_to(A.T, x.shape[:-1] + (dim, dim)).copy()

    def potential(x):
        return v0 + np.asarray(x) @ c

    def potential_gradient(x):
        x = np.asarray(x)
        return np.broadcast_to(c, x.shape).copy()

    def potential_hessian(x):
        x = np.asarray(x)
        return np.zeros(x.shape[:-1] + (dim, dim))

    if params is None:
        params = {"A": A.tolist(), "v0": v0, "grad_v": c.tolist(), "metric": G.tolist()}
    return FieldData(
        metric=metric_fn,
        gauge=gauge,
        potential=potential,
        dim=dim,
        gauge_jacobian=gauge_jacobian,
        potential_gradient=potential_gradient,
        potential_hessian=potential_hessian,
        metric_gradient=metric_grad,
        linear_gauge=A,
        name=name,
        params=params,
    )


def constant_family(f1=1.0, f2=1.0, v0=1.0, gauge="symmetric", dim=4, grad_v=None, metric=None):
    """Constant block field ``F_12 = f1`` (and ``F_34 = f2`` in 4-D).

    With the identity metric the intensities are ``(f1, f2)``.
    """
    A = np.zeros((dim, dim))
    blocks = [(0, 1, f1)] + ([(2, 3, f2)] if dim == 4 else [])
    for i, j, b in blocks:
        if gauge == "symmetric":
            A[i, j] = -0.5 * b
            A[j, i] = 0.5 * b
        elif gauge == "landau":
            A[j, i] = b
        else:
            raise ValueError(f"unknown gauge {gauge!r}")
    params = {"f1": f1, "f2": f2, "v0": v0, "gauge": gauge}
    if grad_v is not None:
        params["grad_v"] = list(grad_v)
    if metric is not None:
        params["metric"] = np.asarray(metric).tolist()
    return linear_family(A, v0=v0, grad_v=grad_v, metric=metric, name="constant", params=params)


def polynomial_family(gauge_polys, potential_poly, metric=None, linear_gauge=None, name="polynomial",
                      params=None):
    """Polynomial gauge components and potential, constant metric."""
    dim = potential_poly.dim
    if len(gauge_polys) != dim:
        raise ValueError("need one gauge polynomial per coordinate")
    G = _const_metric(metric, dim)
    metric_fn, metric_grad = _const_metric_callables(G)
    dgauge = [[gauge_polys[k].derivative(j) for k in range(dim)] for j in range(dim)]

    def gauge(x):
        return np.stack([p(x) for p in gauge_polys], axis=-1)

    def gauge_jacobian(x):
        return np.stack(
            [np.stack([dgauge[j][k](x) for k in range(dim)], axis=-1) for j in range(dim)], axis=-2
        )

    if linear_gauge is None:
        # linear part of the gauge, used for periodic twists when the rest is periodic
        linear_gauge = np.zeros((dim, dim))
        for k, p in enumerate(gauge_polys):
            for l in range(dim):
                e = [0] * dim
                e[l] = 1
                linear_gauge[k, l] = p.terms.get(tuple(e), 0.0)
    if params is None:
        params = {
            "gauge_terms": [p.to_list() for p in gauge_polys],
            "potential_terms": potential_poly.to_list(),
            "metric": G.tolist(),
        }
    return FieldData(
        metric=metric_fn,
        gauge=gauge,
        potential=potential_poly,
        dim=dim,
        gauge_jacobian=gauge_jacobian,
        potential_gradient=potential_poly.gradient,
        potential_hessian=potential_poly.hessian,
        metric_gradient=metric_grad,
        linear_gauge=np.asarray(linear_gauge, dtype=float),
        name=name,
        params=params,
    )


def ratio_well_family(center=(0.0, 0.0, 0.0, 0.0), a=1.0, b=-0.5, f1=2.0, f2=1.0, v0=1.0, grad_v=None):
    """Block field whose ratio ``f1/f2`` has one non-degenerate critical point.

    ``F_12 = f1 + a |(x1, x2) - c12|^2`` and ``F_34 = f2 + b |(x3, x4) - c34|^2``.
    """
    dim = 4
    c = np.asarray(center, dtype=float)
    X = [Polynomial.variable(i, dim) for i in range(dim)]
    Y = [Polynomial.variable(i, dim, shift=c[i]) for i in range(dim)]
    zero = Polynomial.constant(0.0, dim)
    v2 = f1 * X[0] + a * ((1.0 / 3.0) * Y[0] ** 3 + (Y[1] ** 2) * X[0])
    v4 = f2 * X[2] + b * ((1.0 / 3.0) * Y[2] ** 3 + (Y[3] ** 2) * X[2])
    gv = np.zeros(dim) if grad_v is None else np.asarray(grad_v, dtype=float)
    pot = Polynomial.constant(v0, dim)
    for i in range(dim):
        pot = pot + gv[i] * X[i]
    params = {"center": c.tolist(), "a": a, "b": b, "f1": f1, "f2": f2, "v0": v0, "grad_v": gv.tolist()}
    return polynomial_family([zero, v2, zero, v4], pot, name="ratio-well", params=params)


def trigonometric_family(f1=1.0, f2=1.0, v0=1.0, lengths=(1.0, 1.0, 1.0, 1.0), gauge_amp=0.0,
                         pot_amp=0.0, dim=4):
    """Landau-gauge constant field plus periodic perturbations on a torus.

    ``V_k += gauge_amp * sin(2 pi x_{k+1} / L_{k+1})`` (indices mod d) and
    ``V = v0 + pot_amp * sum_i cos(2 pi x_i / L_i)``.
    """
    L = np.asarray(lengths, dtype=float)[:dim]
    base = constant_family(f1, f2, v0, gauge="landau", dim=dim)
    A = base.linear_gauge
    kvec = 2.0 * np.pi / L
    nxt = [(k + 1) % dim for k in range(dim)]

    def gauge(x):
        x = np.asarray(x, dtype=float)
        lin = x @ A.T
        pert = np.stack([np.sin(kvec[nxt[k]] * x[..., nxt[k]]) for k in range(dim)], axis=-1)
        return lin + gauge_amp * pert

    def gauge_jacobian(x):
        x = np.asarray(x, dtype=float)
        J = np.broadcast_to(A.T, x.shape[:-1] + (dim, dim)).copy()
        for k in range(dim):
            j = nxt[k]
            J[..., j, k] += gauge_amp * kvec[j] * np.cos(kvec[j] * x[..., j])
        return J

    def potential(x):
        x = np.asarray(x, dtype=float)
        return v0 + pot_amp * np.sum(np.cos(kvec * x), axis=-1)

    def potential_gradient(x):
        x = np.asarray(x, dtype=float)
        return -pot_amp * kvec * np.sin(kvec * x)

    def potential_hessian(x):
        x = np.asarray(x, dtype=float)
        diag = -pot_amp * kvec**2 * np.cos(kvec * x)
        return diag[..., :, None] * np.eye(dim)

    metric_fn, metric_grad = _const_metric_callables(np.eye(dim))
    params = {"f1": f1, "f2": f2, "v0": v0, "lengths": L.tolist(), "gauge_amp": gauge_amp,
              "pot_amp": pot_amp}
    return FieldData(
        metric=metric_fn,
        gauge=gauge,
        potential=potential,
        dim=dim,
        gauge_jacobian=gauge_jacobian,
        potential_gradient=potential_gradient,
        potential_hessian=potential_hessian,
        metric_gradient=metric_grad,
        linear_gauge=A,
        name="trigonometric",
        params=params,
    )


def with_gauge_transform(fields: FieldData, chi: Callable, grad_chi: Callable,
                         hess_chi: Callable | None = None) -> FieldData:
    """Return the same fields with ``V_j -> V_j + d_j chi``."""

    def gauge(x):
        return fields.gauge(x) + grad_chi(x)

    jac = None
    if hess_chi is not None:
        def jac(x):
            return fields.d_gauge(x) + hess_chi(x)

    return FieldData(
        metric=fields.metric,
        gauge=gauge,
        potential=fields.potential,
        dim=fields.dim,
        gauge_jacobian=jac,
        potential_gradient=fields.potential_gradient,
        potential_hessian=fields.potential_hessian,
        metric_gradient=fields.metric_gradient,
        linear_gauge=fields.linear_gauge,
        fd_scale=fields.fd_scale,
        name=fields.name + "+gauge",
        params=dict(fields.params),
    )


def _poly_from_list(terms, dim):
    return Polynomial({tuple(p): c for p, c in terms}, dim)


FAMILIES = {
    "constant": constant_family,
    "linear-gauge": linear_family,
    "trigonometric": trigonometric_family,
    "ratio-well": ratio_well_family,
}


def make_field(family: str, **params) -> FieldData:
    """Instantiate a registered field family by name."""
    if family == "polynomial":
        dim = int(params.get("dim", 4))
        gauge = [_poly_from_list(t, dim) for t in params["gauge_terms"]]
        pot = _poly_from_list(params["potential_terms"], dim)
        return polynomial_family(gauge, pot, metric=params.get("metric"))
    try:
        factory = FAMILIES[family]
    except KeyError:
        raise ValueError(
            f"unknown field family {family!r}; known: {sorted(FAMILIES) + ['polynomial']}"
        ) from None
    return factory(**params)
