"""Gauge-covariant lattice discretisation of the magnetic Schroedinger operator.

The operator is ``A = 1/2 (sum_jk P_j g^{jk} P_k - V)`` with
``P_j = h D_j - mu V_j`` (the h-quantised momentum, so that Landau levels sit
at ``(2m+1) mu h f``). It is discretised through its quadratic form

    q(u) = h^2/2 sum_x sum_jk conj(D_j u)(x) g^{jk} (D_k u)(x) - 1/2 sum_x V |u|^2

with covariant differences ``D_j^+ u(x) = (w_j(x) u(x + s_j e_j) - u(x)) / s_j``
and link factors ``w_j = exp(-i mu theta_j / h)``, ``theta_j`` the line
integral of ``V_j`` along the edge. Diagonal metric entries use forward
differences with ``g`` at the edge midpoint; off-diagonal ones average the
forward-forward and backward-backward pairings. The result is Hermitian and
exactly gauge covariant whenever the line integrals are exact.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fields import FieldData
from .params import SemiclassicalParams

DIRICHLET = "dirichlet"
PERIODIC = "periodic"
FLUX_TOL = 1e-9
LINK_NODES = 3


class FluxQuantizationError(ValueError):
    """Total flux through a periodic coordinate plane is not an integer."""


class NotSeparableError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Regular grid: ``dims[j]`` points with spacing ``lengths[j] / dims[j]``.

    Periodic axes hold points at ``origin + i s``; Dirichlet axes at
    ``origin + (i + 1/2) s`` with the wavefunction vanishing outside.
    """

    dims: tuple
    lengths: tuple
    boundary: tuple | str = DIRICHLET
    origin: tuple | None = None

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        lengths = tuple(float(L) for L in self.lengths)
        if len(dims) != len(lengths):
            raise ValueError("dims and lengths must have the same length")
        if any(n < 2 for n in dims) or any(L <= 0 for L in lengths):
            raise ValueError("need at least 2 points and positive length per axis")
        bnd = self.boundary
        if isinstance(bnd, str):
            bnd = (bnd,) * len(dims)
        bnd = tuple(bnd)
        if len(bnd) != len(dims) or any(b not in (DIRICHLET, PERIODIC) for b in bnd):
            raise ValueError(f"boundary must be 'dirichlet' or 'periodic' per axis, got {bnd}")
        origin = self.origin
        if origin is None:
            origin = tuple(-0.5 * L for L in lengths)
        origin = tuple(float(o) for o in origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "boundary", bnd)
        object.__setattr__(self, "origin", origin)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def steps(self) -> np.ndarray:
        return np.asarray(self.lengths) / np.asarray(self.dims)

    def periodic(self, j) -> bool:
        return self.boundary[j] == PERIODIC

    def coordinate(self, j, index):
        shift = 0.0 if self.periodic(j) else 0.5
        return self.origin[j] + (np.asarray(index, dtype=float) + shift) * self.steps[j]

    def points(self):
        axes = [self.coordinate(j, np.arange(n)) for j, n in enumerate(self.dims)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "lengths": list(self.lengths),
            "boundary": list(self.boundary),
            "origin": list(self.origin),
        }

    @classmethod
    def from_dict(cls, data) -> "GridSpec":
        return cls(
            dims=tuple(data["dims"]),
            lengths=tuple(data["lengths"]),
            boundary=tuple(data["boundary"]) if not isinstance(data["boundary"], str) else data["boundary"],
            origin=tuple(data["origin"]) if data.get("origin") is not None else None,
        )


@dataclass
class DiscreteHamiltonian:
    """Hermitian stencil operator ``(Hu)[r] = sum_o C_o[r] u[r + o]``.

    Offsets are integer vectors; for periodic axes ``r + o`` wraps (boundary
    twists are folded into the coefficients), for Dirichlet axes the
    coefficients vanish wherever ``r + o`` leaves the grid.
    """

    grid: GridSpec
    params: SemiclassicalParams
    stencil: dict
    metadata: dict = field(default_factory=dict)

    @property
    def shape(self):
        n = self.grid.size
        return (n, n)

    @property
    def dtype(self):
        return np.complex128

    def apply(self, u):
        """Matrix-free application; ``u`` has shape ``(N,)`` or ``(N, k)``."""
        u = np.asarray(u)
        n = self.grid.size
        if u.shape[0] != n:
            raise ValueError(f"dimension mismatch: operator {n}, vector {u.shape[0]}")
        extra = u.shape[1:]
        U = u.reshape(self.grid.dims + extra)
        out = np.zeros(self.grid.dims + extra, dtype=complex)
        d = self.grid.ndim
        for off, coef in self.stencil.items():
            if not any(off):
                shifted = U
            else:
                shifted = np.roll(U, shift=tuple(-o for o in off), axis=tuple(range(d)))
            c = coef.reshape(coef.shape + (1,) * len(extra))
            out += c * shifted
        return out.reshape((n,) + extra)

    __matmul__ = apply

    def matvec(self, u):
        return self.apply(u)

    def to_sparse(self) -> sp.csr_matrix:
        dims = self.grid.dims
        n = self.grid.size
        idx = np.indices(dims)
        rows_all, cols_all, vals_all = [], [], []
        for off, coef in self.stencil.items():
            mask = coef != 0
            if not np.any(mask):
                continue
            r = np.ravel_multi_index(tuple(i[mask] for i in idx), dims)
            tgt = tuple((idx[j][mask] + off[j]) % dims[j] for j in range(len(dims)))
            c = np.ravel_multi_index(tgt, dims)
            rows_all.append(r)
            cols_all.append(c)
            vals_all.append(coef[mask])
        rows = np.concatenate(rows_all)
        cols = np.concatenate(cols_all)
        vals = np.concatenate(vals_all)
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def diagonal(self) -> np.ndarray:
        zero = (0,) * self.grid.ndim
        return np.real(self.stencil[zero]).ravel()

    def is_real(self) -> bool:
        return all(np.all(np.imag(c) == 0) for c in self.stencil.values())

    def descriptor(self) -> dict:
        return {
            "schema_version": 1,
            "grid": self.grid.to_dict(),
            "params": self.params.to_dict(),
            **self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.descriptor(), sort_keys=True)

    def write_triplets(self, path):
        """CSR triplet text dump: header ``n nnz`` then ``row col re im`` lines."""
        A = self.to_sparse().tocoo()
        with open(path, "w") as fh:
            fh.write(f"{A.shape[0]} {A.nnz}\n")
            for r, c, v in zip(A.row, A.col, A.data):
                fh.write(f"{r} {c} {v.real:.17g} {v.imag:.17g}\n")


def read_triplets(path) -> sp.csr_matrix:
    with open(path) as fh:
        n, _ = (int(t) for t in fh.readline().split())
        data = np.loadtxt(fh, ndmin=2)
    if data.size == 0:
        return sp.csr_matrix((n, n), dtype=complex)
    return sp.csr_matrix(
        (data[:, 2] + 1j * data[:, 3], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=(n, n)
    )


# ---------------------------------------------------------------------------
# construction


def flux_quanta(fields: FieldData, grid: GridSpec, params: SemiclassicalParams) -> dict:
    """``mu F_jk L_j L_k / (2 pi h)`` for every periodic coordinate plane."""
    A = np.zeros((grid.ndim, grid.ndim)) if fields.linear_gauge is None else fields.linear_gauge
    out = {}
    for j, k in itertools.combinations(range(grid.ndim), 2):
        if grid.periodic(j) and grid.periodic(k):
            F = A[k, j] - A[j, k]
            out[(j, k)] = params.mu * F * grid.lengths[j] * grid.lengths[k] / (2 * np.pi * params.h)
    return out


def check_flux_quantization(fields, grid, params):
    for (j, k), flux in flux_quanta(fields, grid, params).items():
        if abs(flux - round(flux)) > FLUX_TOL * max(1.0, abs(flux)):
            raise FluxQuantizationError(
                f"plane ({j + 1},{k + 1}) carries non-integer flux {flux:.12g} "
                f"(fractional part {flux - np.floor(flux):.6g})"
            )


def _check_periodic_fields(fields, grid, samples=5, seed=0):
    per = [j for j in range(grid.ndim) if grid.periodic(j)]
    if not per:
        return
    A = np.zeros((grid.ndim, grid.ndim)) if fields.linear_gauge is None else fields.linear_gauge
    rng = np.random.default_rng(seed)
    lo = np.asarray(grid.origin)
    X = lo + rng.random((samples, grid.ndim)) * np.asarray(grid.lengths)
    for j in per:
        shift = np.zeros(grid.ndim)
        shift[j] = grid.lengths[j]
        dV = fields.a(X + shift) - fields.a(X) - A @ shift
        dpot = fields.v(X + shift) - fields.v(X)
        dg = fields.g(X + shift) - fields.g(X)
        if max(np.max(np.abs(dV)), np.max(np.abs(dpot)), np.max(np.abs(dg))) > 1e-9:
            raise ValueError(
                f"fields are not periodic (modulo the linear gauge) along periodic axis {j + 1}"
            )


def _link_integrals(fields, X, j, step, nodes=LINK_NODES):
    t, w = np.polynomial.legendre.leggauss(nodes)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    e = np.zeros(X.shape[-1])
    e[j] = step
    acc = np.zeros(X.shape[:-1])
    for tq, wq in zip(t, w):
        acc = acc + wq * fields.a(X + tq * e)[..., j]
    return step * acc


def _twist(grid, A, mu_over_h, wrapped_idx, wraps):
    """Phase factor relating ``u`` at an unwrapped lattice point to its stored copy."""
    d = grid.ndim
    X = np.stack([grid.coordinate(j, wrapped_idx[j]) for j in range(d)], axis=-1)
    phase = np.zeros(X.shape[:-1])
    L = np.asarray(grid.lengths)
    for j in range(d):
        n = wraps[j]
        if not np.any(n):
            continue
        # chi_j(X) = L_j sum_k A_kj X_k ; u(X + L e_j) = exp(i mu chi_j(X) / h) u(X)
        col = A[:, j]
        pos = n > 0
        neg = n < 0
        chi_here = L[j] * (X @ col)
        shifted = X.copy()
        shifted[..., j] = shifted[..., j] - L[j]
        chi_back = L[j] * (shifted @ col)
        phase = phase + np.where(pos, chi_here, 0.0) - np.where(neg, chi_back, 0.0)
        X = X + (n * L[j])[..., None] * np.eye(d)[j]
    return np.exp(1j * mu_over_h * phase)


def build_hamiltonian(fields: FieldData, grid: GridSpec, params: SemiclassicalParams,
                      link_nodes: int = LINK_NODES) -> DiscreteHamiltonian:
    """Assemble the stencil of the discretised operator."""
    d = grid.ndim
    if fields.dim != d:
        raise ValueError(f"field dimension {fields.dim} does not match grid dimension {d}")
    check_flux_quantization(fields, grid, params)
    _check_periodic_fields(fields, grid)
    A = np.zeros((d, d)) if fields.linear_gauge is None else np.asarray(fields.linear_gauge)
    mu, h = params.mu, params.h
    s = grid.steps
    dims = np.asarray(grid.dims)

    # extended index range: one ghost layer on every side
    ext_idx = [np.arange(-1, n + 1) for n in dims]
    ext_shape = tuple(n + 2 for n in dims)
    mesh = np.meshgrid(*[grid.coordinate(j, ext_idx[j]) for j in range(d)], indexing="ij")
    X = np.stack(mesh, axis=-1)
    I = np.meshgrid(*ext_idx, indexing="ij")

    links = []
    for j in range(d):
        theta = _link_integrals(fields, X, j, s[j], link_nodes)
        links.append(np.exp(-1j * mu * theta / h))

    # metric samples: at edge midpoints for diagonal terms, at plaquette corners otherwise
    metric_entries = {}
    G_probe = fields.g(X.reshape(-1, d)).reshape(ext_shape + (d, d))
    for j in range(d):
        shift = np.zeros(d)
        shift[j] = 0.5 * s[j]
        metric_entries[(j, j, +1)] = fields.g(X + shift)[..., j, j]
    for j, k in itertools.combinations(range(d), 2):
        if np.all(G_probe[..., j, k] == 0):
            continue
        shift = np.zeros(d)
        shift[j] = 0.5 * s[j]
        shift[k] = 0.5 * s[k]
        metric_entries[(j, k, +1)] = fields.g(X + shift)[..., j, k]
        metric_entries[(j, k, -1)] = fields.g(X - shift)[..., j, k]

    def unit(j, sign=1):
        e = [0] * d
        e[j] = sign
        return tuple(e)

    zero = (0,) * d

    def forward(j):
        return [(unit(j), links[j] / s[j]), (zero, np.full(ext_shape, -1.0 / s[j]))]

    def backward(j):
        back = np.roll(links[j], 1, axis=j)  # w_j(x - e_j); first slice is unused ghost data
        return [(zero, np.full(ext_shape, 1.0 / s[j])), (unit(j, -1), -np.conj(back) / s[j])]

    pairs = []
    for j in range(d):
        pairs.append((forward(j), forward(j), metric_entries[(j, j, +1)], 1.0))
    for (j, k, sign), G in metric_entries.items():
        if j == k:
            continue
        Dj, Dk = (forward(j), forward(k)) if sign > 0 else (backward(j), backward(k))
        # (j,k) and (k,j) both appear in the sum over the metric
        pairs.append((Dj, Dk, G, 0.5))
        pairs.append((Dk, Dj, G, 0.5))

    stencil = {}
    pref = 0.5 * h * h

    # the ghost layer on periodic axes duplicates sites; restrict x to one copy there
    base_mask = np.ones(ext_shape, dtype=bool)
    for j in range(d):
        if grid.periodic(j):
            sl = [slice(None)] * d
            sl[j] = np.r_[0, ext_shape[j] - 1]
            base_mask[tuple(sl)] = False

    for Da, Db, G, kappa in pairs:
        for oa, ca in Da:
            for ob, cb in Db:
                val = pref * kappa * np.conj(ca) * G * cb
                _accumulate(stencil, grid, A, mu / h, I, base_mask, oa, ob, val)

    diag = stencil.setdefault(zero, np.zeros(tuple(dims), dtype=complex))
    Vgrid = fields.v(grid.points())
    diag += -0.5 * Vgrid
    # exact Hermitian diagonal
    stencil[zero] = diag.real.astype(complex)
    meta = {
        "fields": fields.describe(),
        "link_nodes": link_nodes,
        "flux_quanta": {f"{j + 1}{k + 1}": v for (j, k), v in flux_quanta(fields, grid, params).items()},
    }
    return DiscreteHamiltonian(grid=grid, params=params, stencil=stencil, metadata=meta)


def _accumulate(stencil, grid, A, mu_over_h, I, base_mask, oa, ob, val):
    d = grid.ndim
    dims = grid.dims
    pa = [I[j] + oa[j] for j in range(d)]
    pb = [I[j] + ob[j] for j in range(d)]
    keep = base_mask.copy()
    for j in range(d):
        if not grid.periodic(j):
            keep &= (pa[j] >= 0) & (pa[j] < dims[j]) & (pb[j] >= 0) & (pb[j] < dims[j])
    if not np.any(keep):
        return
    pa = [p[keep] for p in pa]
    pb = [p[keep] for p in pb]
    v = val[keep]
    wa = [np.mod(p, n) for p, n in zip(pa, dims)]
    wb = [np.mod(p, n) for p, n in zip(pb, dims)]
    na = [(p - w) // n for p, w, n in zip(pa, wa, dims)]
    nb = [(p - w) // n for p, w, n in zip(pb, wb, dims)]
    if any(np.any(n) for n in na + nb):
        Ta = _twist(grid, A, mu_over_h, wa, na)
        Tb = _twist(grid, A, mu_over_h, wb, nb)
        v = np.conj(Ta) * v * Tb
    off = tuple(int(b - a) for a, b in zip(oa, ob))
    arr = stencil.setdefault(off, np.zeros(dims, dtype=complex))
    np.add.at(arr, tuple(wa), v)


# ---------------------------------------------------------------------------
# separable structure and Fourier reduction


def _block_fields(fields, dims_idx, frozen, half_shift):
    """2-D restriction of separable 4-D fields to the coordinates ``dims_idx``."""
    dims_idx = list(dims_idx)
    d2 = len(dims_idx)

    def embed(y):
        y = np.asarray(y, dtype=float)
        X = np.broadcast_to(frozen, y.shape[:-1] + (fields.dim,)).copy()
        X[..., dims_idx] = y
        return X

    def metric(y):
        return fields.g(embed(y))[..., dims_idx, :][..., :, dims_idx]

    def gauge(y):
        return fields.a(embed(y))[..., dims_idx]

    def potential(y):
        return fields.v(embed(y)) - half_shift

    def jac(y):
        return fields.d_gauge(embed(y))[..., dims_idx, :][..., :, dims_idx]

    A = None
    if fields.linear_gauge is not None:
        A = np.asarray(fields.linear_gauge)[np.ix_(dims_idx, dims_idx)]
    return FieldData(
        metric=metric,
        gauge=gauge,
        potential=potential,
        dim=d2,
        gauge_jacobian=jac,
        linear_gauge=A,
        fd_scale=fields.fd_scale,
        name=f"{fields.name}[{','.join(str(i + 1) for i in dims_idx)}]",
        params=dict(fields.params),
    )


def check_separable(fields: FieldData, grid: GridSpec, tol=1e-10, samples=4):
    """Verify the block structure (x1, x2) | (x3, x4) on a sample grid."""
    if fields.dim != 4:
        raise NotSeparableError("separable split needs 4-D fields")
    axes = [grid.coordinate(j, np.linspace(0, grid.dims[j] - 1, samples)) for j in range(4)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 4)
    G = fields.g(X)
    if np.max(np.abs(G[:, :2, 2:])) > tol:
        raise NotSeparableError("metric couples the (1,2) and (3,4) blocks")
    J = fields.d_gauge(X)
    if max(np.max(np.abs(J[:, 2:, :2])), np.max(np.abs(J[:, :2, 2:]))) > tol:
        raise NotSeparableError("gauge components depend on the other block")
    dG = fields.d_metric(X)
    if max(np.max(np.abs(dG[:, 2:, :2, :2])), np.max(np.abs(dG[:, :2, 2:, 2:]))) > tol:
        raise NotSeparableError("metric blocks depend on the other block")
    H = fields.dd_potential(X)
    if np.max(np.abs(H[:, :2, 2:])) > max(tol, 1e-6):
        raise NotSeparableError("potential has cross-block second derivatives")


def separable_split(fields: FieldData, grid: GridSpec, params: SemiclassicalParams):
    """Two 2-D Hamiltonians ``H12, H34`` with ``H = H12 (x) I + I (x) H34``."""
    check_separable(fields, grid)
    frozen = np.array([grid.coordinate(j, 0) for j in range(4)])
    v_ref = float(fields.v(frozen))
    f12 = _block_fields(fields, [0, 1], frozen, 0.5 * v_ref)
    f34 = _block_fields(fields, [2, 3], frozen, 0.5 * v_ref)
    g12 = GridSpec(grid.dims[:2], grid.lengths[:2], grid.boundary[:2], grid.origin[:2])
    g34 = GridSpec(grid.dims[2:], grid.lengths[2:], grid.boundary[2:], grid.origin[2:])
    return build_hamiltonian(f12, g12, params), build_hamiltonian(f34, g34, params)


def translation_invariant(H: DiscreteHamiltonian, axis: int, tol=1e-12) -> bool:
    if not H.grid.periodic(axis):
        return False
    for coef in H.stencil.values():
        ref = np.take(coef, [0], axis=axis)
        if np.max(np.abs(coef - ref), initial=0.0) > tol * max(1.0, np.max(np.abs(coef))):
            return False
    return True


def fourier_block(H: DiscreteHamiltonian, axis: int, wavenumber: float) -> sp.csr_matrix:
    """Restriction of a translation-invariant operator to the mode ``exp(i k x_axis)``.

    The stencil must be constant along the periodic ``axis``; the block acts
    on the remaining coordinates (sparse, same ordering as the grid minus axis).
    """
    if not translation_invariant(H, axis):
        raise ValueError(f"operator is not translation invariant along axis {axis + 1}")
    s = H.grid.steps[axis]
    rest = tuple(n for j, n in enumerate(H.grid.dims) if j != axis)
    sub = {}
    for off, coef in H.stencil.items():
        c = np.take(coef, 0, axis=axis) * np.exp(1j * wavenumber * off[axis] * s)
        o = tuple(v for j, v in enumerate(off) if j != axis)
        sub[o] = sub.get(o, 0) + c
    n = int(np.prod(rest))
    idx = np.indices(rest)
    rows, cols, vals = [], [], []
    for off, coef in sub.items():
        mask = coef != 0
        if not np.any(mask):
            continue
        rows.append(np.ravel_multi_index(tuple(i[mask] for i in idx), rest))
        tgt = tuple((idx[j][mask] + off[j]) % rest[j] for j in range(len(rest)))
        cols.append(np.ravel_multi_index(tgt, rest))
        vals.append(coef[mask])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def mode_wavenumbers(n_full: int, step: float) -> np.ndarray:
    """Discrete Fourier wave numbers of a periodic axis with ``n_full`` points."""
    return 2.0 * np.pi * np.arange(n_full) / (n_full * step)
