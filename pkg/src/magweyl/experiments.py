"""(mu, h) sweeps comparing discrete counts with integrated Weyl-type terms.

A sweep evaluates, for each admissible ``(mu, h)``, the discrete surrogate
``N = tr(psi theta(tau - H))`` and the integral of the magnetic Weyl density
against ``psi``, then fits ``R = |N - main| ~ C mu^a h^b`` on the rows whose
remainder clears the discretization error.

Three evaluation paths exist:

``separable``
    4-D fields split into two 2-D planes; exact counts by convolving the
    per-plane spectra (product cutoffs only).
``pilot2d``
    2-D fields on a Dirichlet x periodic strip that are translation invariant
    along the periodic axis; the operator is reduced to tridiagonal Fourier
    blocks. Counts are computed at steps ``s`` and ``2s``.
``dense``, ``inertia``, ``kpm``
    the assembled operator on the full grid.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import eigh_tridiagonal

from . import counting
from .discrete import (
    GridSpec,
    build_hamiltonian,
    check_separable,
    fourier_block,
    mode_wavenumbers,
    separable_split,
    translation_invariant,
)
from .fields import FieldData, make_field
from .geometry import classify_point, intensities_at
from .measure import DegenerateFitError, PowerLawRegressor
from .params import SemiclassicalParams
from .weyl import integrate_density

SCHEMA_VERSION = 1
LIMIT_FACTOR = 5.0
MIN_FIT_ROWS = 4
METHODS = ("auto", "separable", "pilot2d", "dense", "inertia", "kpm")


class SweepError(ValueError):
    pass


# ---------------------------------------------------------------------------
# cutoffs


def _bump1(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    m = np.abs(t) < 1
    out[m] = np.exp(1.0 - 1.0 / (1.0 - t[m] ** 2))
    return out


@dataclass(frozen=True)
class Cutoff:
    """Product cutoff ``psi(x) = scale * prod_j phi_j(x_j)``.

    ``kind`` is ``"one"``, ``"zero"`` or ``"bump"``. A bump uses
    ``exp(1 - 1/(1 - t^2))`` in ``t = (x_j - center_j) / radius_j`` on the
    axes listed in ``axes`` (all axes by default) and is constant elsewhere.
    """

    kind: str = "one"
    center: tuple | None = None
    radius: tuple | None = None
    axes: tuple | None = None
    scale: float = 1.0

    @classmethod
    def from_dict(cls, data) -> "Cutoff":
        data = dict(data or {})
        for key in ("center", "radius", "axes"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        c = cls(**data)
        if c.kind not in ("one", "zero", "bump"):
            raise SweepError(f"unknown cutoff kind {c.kind!r}")
        if c.kind == "bump" and (c.center is None or c.radius is None):
            raise SweepError("bump cutoff needs center and radius")
        return c

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    def _bump_axes(self, dim):
        return tuple(range(dim)) if self.axes is None else self.axes

    def factor(self, j, x):
        """The 1-D factor along axis ``j`` (without ``scale``)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "one" or j not in self._bump_axes(len(self.center)):
            return np.ones_like(x)
        return _bump1((x - self.center[j]) / self.radius[j])

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        out = np.full(X.shape[:-1], float(self.scale))
        for j in range(X.shape[-1]):
            out = out * self.factor(j, X[..., j])
        return out

    def box(self, grid: GridSpec):
        lo = np.array(grid.origin, dtype=float)
        hi = lo + np.array(grid.lengths)
        if self.kind == "bump":
            for j in self._bump_axes(grid.ndim):
                lo[j] = max(lo[j], self.center[j] - self.radius[j])
                hi[j] = min(hi[j], self.center[j] + self.radius[j])
        return lo, hi


# ---------------------------------------------------------------------------
# sweep specification


@dataclass
class SweepSpec:
    """Declarative description of a sweep.

    ``points`` lists explicit ``(mu, h)`` pairs; ``ladder`` adds the pairs
    ``mu = c * h^-kappa`` for each ``h`` in ``ladder["h"]``. ``grid`` holds
    ``lengths``, ``boundary`` and either ``dims`` or ``step_per_h`` (grid step
    ``s = step_per_h * h``, rounded so that it divides each length).
    """

    family: str
    family_params: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    points: list = field(default_factory=list)
    ladder: dict | None = None
    tau: float = 0.0
    psi: dict = field(default_factory=lambda: {"kind": "one"})
    method: str = "auto"
    seed: int = 0
    moments: int = counting.DEFAULT_MOMENTS
    probes: int = 32
    weyl_nodes: list | int = 16
    omega: float | None = None
    mu_h_cap: float = 1.0
    n_jobs: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise SweepError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not self.grid.get("lengths"):
            raise SweepError("grid.lengths is required")
        if ("dims" in self.grid) == ("step_per_h" in self.grid):
            raise SweepError("grid needs exactly one of dims or step_per_h")
        for mu, h in self.pairs():
            SemiclassicalParams(mu, h, self.tau, self.mu_h_cap)

    @classmethod
    def from_dict(cls, data) -> "SweepSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise SweepError(f"unknown sweep keys: {sorted(extra)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def pairs(self):
        out = [(float(m), float(h)) for m, h in self.points]
        if self.ladder:
            c = float(self.ladder.get("c", 1.0))
            kappa = float(self.ladder["kappa"])
            out += [(c * float(h) ** (-kappa), float(h)) for h in self.ladder["h"]]
        return out

    def fields(self) -> FieldData:
        return make_field(self.family, **self.family_params)

    def cutoff(self) -> Cutoff:
        return Cutoff.from_dict(self.psi)

    def grid_for(self, h, refine=1) -> GridSpec:
        g = self.grid
        lengths = tuple(float(L) for L in g["lengths"])
        if "dims" in g:
            dims = tuple(int(n) * refine for n in g["dims"])
        else:
            step = float(g["step_per_h"]) * h / refine
            dims = tuple(max(2, int(round(L / step))) for L in lengths)
        return GridSpec(dims, lengths, tuple(g.get("boundary", "dirichlet")) if not isinstance(
            g.get("boundary", "dirichlet"), str) else g["boundary"], g.get("origin"))


# ---------------------------------------------------------------------------
# per-point evaluation


def resolvability(fields: FieldData, grid: GridSpec, params: SemiclassicalParams, c=1.0) -> dict:
    """Grid step against ``h / (c p_max)`` and an eighth of the cyclotron radius."""
    pts = grid.points().reshape(-1, grid.ndim)
    sample = pts[:: max(1, len(pts) // 4096)]
    E = np.maximum(2.0 * params.tau + fields.v(sample), 0.0)
    p_max = float(np.sqrt(np.max(E))) if E.size else 0.0
    f1, _ = intensities_at(fields, sample)
    fmin = float(np.min(f1))
    step = float(np.max(grid.steps))
    wave = params.h / (c * p_max) if p_max > 0 else math.inf
    radius = p_max / (params.mu * fmin) if fmin > 0 and p_max > 0 else math.inf
    limit = min(wave, radius / 8.0)
    return {"step": step, "p_max": p_max, "wave_limit": wave, "cyclotron_radius": radius,
            "resolved": bool(step <= limit)}


def _weighted_or_signed(count_fn, weights):
    """Signed weights counted as a difference of two non-negative traces."""
    pos = np.maximum(weights, 0.0)
    neg = np.maximum(-weights, 0.0)
    total = count_fn(pos) if np.any(pos) else 0.0
    if np.any(neg):
        total = total - count_fn(neg)
    return total


def _count_separable(spec, fields, grid, params, psi):
    if psi.kind == "zero":
        return 0.0, {}
    H12, H34 = separable_split(fields, grid, params)
    curves = []
    for H, axes in ((H12, (0, 1)), (H34, (2, 3))):
        sub = H.grid
        if psi.kind == "one":
            curves.append(counting.dense_count(H, [0.0]))
        else:
            X = sub.points()
            w = np.ones(sub.dims)
            for k, j in enumerate(axes):
                w = w * psi.factor(j, X[..., k])
            curves.append(counting.weighted_dense_count(H, [0.0], w.ravel()))
    curve = counting.convolve_counts(curves[0], curves[1], [params.tau])
    return float(psi.scale) * float(curve.counts[0]), {
        "plane_dims": [H12.shape[0], H34.shape[0]],
    }


def _pilot_operator(fields, grid, params):
    if grid.ndim != 2 or grid.periodic(0) or not grid.periodic(1):
        raise SweepError("pilot2d needs a 2-D grid: Dirichlet along x1, periodic along x2")
    s2 = grid.steps[1]
    slab = GridSpec((grid.dims[0], 2), (grid.lengths[0], 2 * s2), grid.boundary, grid.origin)
    H = build_hamiltonian(fields, slab, params)
    if not translation_invariant(H, 1):
        raise SweepError("pilot2d needs fields invariant along the periodic axis")
    return H


def _count_pilot(fields, grid, params, psi):
    if psi.kind == "zero":
        return 0.0
    H = _pilot_operator(fields, grid, params)
    x1 = grid.coordinate(0, np.arange(grid.dims[0]))
    w = psi.factor(0, x1) * float(psi.scale)
    # every Fourier mode is spread uniformly along x2, so a factor in x2 enters by its mean
    x2 = grid.coordinate(1, np.arange(grid.dims[1]))
    w2 = float(np.mean(psi.factor(1, x2)))
    tau = params.tau
    parts = []
    for k in mode_wavenumbers(grid.dims[1], grid.steps[1]):
        B = fourier_block(H, 1, k)
        d = B.diagonal().real
        e = np.abs(B.diagonal(1))
        if B.nnz > d.size + 2 * e.size:
            raise SweepError("Fourier blocks are not tridiagonal (off-diagonal metric?)")
        scale = float(np.max(np.abs(d))) + 2.0 * float(np.max(e, initial=0.0))
        hi = tau + counting.CLOSED_RTOL * max(scale, 1.0)
        ev, vec = eigh_tridiagonal(d, e, select="v", select_range=(-np.inf, hi))
        if ev.size:
            parts.append(float(np.sum(w @ (vec**2))))
    return w2 * math.fsum(parts)


def _count_full(method, spec, fields, grid, params, psi):
    if psi.kind == "zero":
        return 0.0, None
    H = build_hamiltonian(fields, grid, params)
    weights = psi(grid.points()).ravel()
    tau = [params.tau]
    if method == "dense":
        if psi.kind == "one":
            return float(psi.scale) * float(counting.dense_count(H, tau).counts[0]), None
        return float(counting.weighted_dense_count(H, tau, weights).counts[0]), None
    if method == "inertia":
        if psi.kind != "one":
            raise SweepError("inertia counting supports psi = 1 only")
        return float(psi.scale) * float(counting.inertia_count(H, params.tau)), None
    bounds = counting.spectral_bounds(H, seed=spec.seed)
    errs = []

    def one(w):
        c = counting.kpm_count(H, tau, spec.moments, spec.probes, spec.seed, bounds=bounds,
                               weights=w if psi.kind != "one" else None)
        errs.append(float(c.stderr[0]))
        return float(c.counts[0])

    if psi.kind == "one":
        val = one(None) * float(psi.scale)
    else:
        val = _weighted_or_signed(one, weights)
    return val, float(math.sqrt(sum(e * e for e in errs)))


def _auto_method(spec, fields, grid):
    if fields.dim == 2 and grid.ndim == 2 and not grid.periodic(0) and grid.periodic(1):
        return "pilot2d"
    if fields.dim == 4:
        try:
            check_separable(fields, grid)
            return "separable"
        except ValueError:
            pass
    return "dense" if grid.size <= counting.DENSE_CAP else "kpm"


def _main_terms(spec, fields, grid, params, psi):
    periodic = tuple(j for j in range(grid.ndim) if grid.periodic(j))
    if psi.kind == "zero":
        return 0.0, 0.0, (0.0 if spec.omega is not None else None)
    box = psi.box(grid)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        main = integrate_density("magnetic_weyl", fields, params, psi, box, spec.weyl_nodes,
                                 periodic_axes=periodic)
        corr = None
        if spec.omega is not None:
            corr = integrate_density("corrected", fields, params, psi, box, spec.weyl_nodes,
                                     omega=spec.omega, periodic_axes=periodic).value
    return main.value, main.quadrature_error_estimate, corr


def point_key(spec: SweepSpec, mu, h) -> str:
    payload = spec.to_dict()
    for k in ("points", "ladder", "n_jobs"):
        payload.pop(k, None)
    payload.update({"mu": repr(float(mu)), "h": repr(float(h)), "schema_version": SCHEMA_VERSION})
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def evaluate_point(spec: SweepSpec, mu, h) -> dict:
    """One row of the sweep table (never raises for numerical failures)."""
    record = {"schema_version": SCHEMA_VERSION, "key": point_key(spec, mu, h), "mu": mu, "h": h,
              "tau": spec.tau, "status": "ok"}
    try:
        params = SemiclassicalParams(mu, h, spec.tau, spec.mu_h_cap)
        fields = spec.fields()
        psi = spec.cutoff()
        grid = spec.grid_for(h)
        method = spec.method if spec.method != "auto" else _auto_method(spec, fields, grid)
        record["method"] = method
        record["grid"] = grid.to_dict()
        record["resolvability"] = resolvability(fields, grid, params)
        disc_err = None
        coarse = None
        stderr = None
        if method == "separable":
            N, extra = _count_separable(spec, fields, grid, params, psi)
            record.update(extra)
        elif method == "pilot2d":
            N = _count_pilot(fields, grid, params, psi)
            if "step_per_h" in spec.grid:
                cg = GridSpec(tuple(max(2, n // 2) for n in grid.dims), grid.lengths, grid.boundary,
                              grid.origin)
                coarse = _count_pilot(fields, cg, params, psi)
                # second-order scheme: err(s) ~ |N(2s) - N(s)| / 3
                disc_err = abs(coarse - N) / 3.0
        else:
            N, stderr = _count_full(method, spec, fields, grid, params, psi)
        main, main_err, corr = _main_terms(spec, fields, grid, params, psi)
        record.update(
            N_disc=N,
            N_coarse=coarse,
            disc_error=disc_err,
            kpm_stderr=stderr,
            main_term=main,
            main_quadrature_error=main_err,
            corrected_term=corr,
            remainder=abs(N - main),
            corrected_remainder=None if corr is None else abs(N - main - corr),
        )
    except Exception as exc:  # a failed point must not stop the sweep
        record["status"] = "failed"
        record["error"] = f"{type(exc).__name__}: {exc}"
    return record


# ---------------------------------------------------------------------------
# fitting


@dataclass
class RemainderFit:
    rows: list
    exponents: dict
    stderr: dict
    residuals: list
    n_points: int
    limited: bool
    reason: str = ""

    def summary(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "exponents": self.exponents,
            "stderr": self.stderr,
            "n_points": self.n_points,
            "limited_flag": self.limited,
            "reason": self.reason,
            "residuals": self.residuals,
        }

    def to_csv(self) -> str:
        cols = ["mu", "h", "tau", "method", "status", "N_disc", "N_coarse", "disc_error",
                "main_term", "corrected_term", "remainder", "corrected_remainder", "used"]
        lines = [",".join(cols)]
        for r in self.rows:
            vals = []
            for c in cols:
                v = r.get(c)
                vals.append("" if v is None else (repr(float(v)) if isinstance(v, float) else str(v)))
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"


def fit_remainder(rows, key="remainder", factor=LIMIT_FACTOR, min_rows=MIN_FIT_ROWS) -> RemainderFit:
    """Fit ``R ~ C mu^a h^b`` on rows whose remainder clears ``factor`` x the discretization error.

    Rows without a discretization estimate cannot clear the bar. If all
    used rows lie on one ladder the exponents are not separately
    identifiable and only the effective ``h`` exponent is reported.
    """
    used = []
    for r in rows:
        ok = (
            r.get("status") == "ok"
            and r.get(key) is not None
            and r.get("disc_error") is not None
            and r[key] > 0
            and r[key] > factor * r["disc_error"]
        )
        r["used"] = bool(ok)
        if ok:
            used.append(r)
    if len(used) < min_rows:
        return RemainderFit(rows, {}, {}, [], len(used), True,
                            f"discretization-limited: {len(used)} of {len(rows)} rows clear "
                            f"{factor:g}x the discretization error (need {min_rows})")
    mu = np.array([r["mu"] for r in used])
    h = np.array([r["h"] for r in used])
    R = np.array([r[key] for r in used])
    try:
        fit = PowerLawRegressor().fit(np.column_stack([mu, h]), R)
        exps = {"mu": float(fit.coef_[0]), "h": float(fit.coef_[1])}
        errs = {"mu": float(fit.stderr_[0]), "h": float(fit.stderr_[1])}
    except DegenerateFitError:
        fit = PowerLawRegressor().fit(h, R)
        exps = {"h": float(fit.coef_[0])}
        errs = {"h": float(fit.stderr_[0])}
    return RemainderFit(rows, exps, errs, fit.residuals_.tolist(), len(used), False)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    spec: SweepSpec
    records: list
    fit: RemainderFit
    corrected_fit: RemainderFit | None = None

    def write(self, outdir) -> dict:
        """Per-point JSON, aggregate CSV and fit summary; returns the paths."""
        out = Path(outdir)
        (out / "points").mkdir(parents=True, exist_ok=True)
        paths = {}
        for r in self.records:
            p = out / "points" / f"{r['key']}.json"
            p.write_text(_dumps(r))
        paths["csv"] = out / "sweep.csv"
        paths["csv"].write_text(self.fit.to_csv())
        summary = {"spec": self.spec.to_dict(), "fit": self.fit.summary()}
        if self.corrected_fit is not None:
            summary["corrected_fit"] = self.corrected_fit.summary()
        paths["fit"] = out / "fit.json"
        paths["fit"].write_text(_dumps(summary))
        return paths


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def run_sweep(spec: SweepSpec, cache_dir=None, n_jobs=None) -> SweepResult:
    """Evaluate every ``(mu, h)`` of ``spec`` and fit the remainder.

    Completed points are stored under ``cache_dir`` by content hash and
    reused on reruns. Points are independent and may run on ``n_jobs``
    threads; the record order follows the sweep specification.
    """
    pairs = spec.pairs()
    if not pairs:
        raise SweepError("sweep has no (mu, h) points")
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)

    def one(pair):
        mu, h = pair
        if cache is not None:
            p = cache / f"{point_key(spec, mu, h)}.json"
            if p.exists():
                return json.loads(p.read_text())
        rec = evaluate_point(spec, mu, h)
        # round-trip so fresh and cached records are identical
        rec = json.loads(_dumps(rec))
        if cache is not None and rec["status"] == "ok":
            p.write_text(_dumps(rec))
        return rec

    jobs = spec.n_jobs if n_jobs is None else n_jobs
    if jobs == 1:
        records = [one(p) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(one, pairs))
    fit = fit_remainder([dict(r) for r in records])
    cfit = None
    if spec.omega is not None:
        cfit = fit_remainder([dict(r) for r in records], key="corrected_remainder")
    return SweepResult(spec, records, fit, cfit)


# ---------------------------------------------------------------------------
# classification atlas


@dataclass
class Atlas:
    axes: list
    cells: list
    summary: dict

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "axes": self.axes, "summary": self.summary,
                "cells": self.cells}


def _ratio_log_gradient(fields, X):
    eta = fields.eta

    def logratio(Y):
        f1, f2 = intensities_at(fields, Y)
        with np.errstate(divide="ignore"):
            return np.log(f1) - np.log(f2)

    d = X.shape[-1]
    G = np.empty(X.shape)
    for j in range(d):
        e = np.zeros(d)
        e[j] = eta
        G[..., j] = (logratio(X + e) - logratio(X - e)) / (2 * eta)
    return G


def classify_domain(fields: FieldData, box, params: SemiclassicalParams, points_per_axis=9,
                    eps=1e-2, max_order=5, resonance_eps=1e-6) -> Atlas:
    """Grid atlas of pointwise classifications over ``box``.

    The summary locates the cells where the gradient of ``log(f1/f2)`` is
    smallest, i.e. candidate critical points of the intensity ratio.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    n = np.broadcast_to(np.asarray(points_per_axis, dtype=int), lo.shape)
    axes = [np.linspace(lo[j], hi[j], n[j]) for j in range(lo.size)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
    cells = []
    for x in X:
        c = classify_point(fields, x, params, eps, max_order, resonance_eps)
        cells.append(c.to_dict())
    f1 = np.array([c["intensities"]["f1"] for c in cells])
    f2 = np.array([c["intensities"]["f2"] for c in cells])
    summary = {
        "points": len(cells),
        "sigma_points": int(np.sum(np.isclose(f1, f2, rtol=0, atol=resonance_eps))),
        "resonant_points": int(sum(bool(c["resonances"]) for c in cells)),
        "elliptic_points": int(sum(bool(c["elliptic"]) for c in cells)),
    }
    margins = [c["microhyperbolicity_margin"] for c in cells if c["microhyperbolicity_margin"] is not None]
    summary["min_margin"] = float(min(margins)) if margins else None
    if np.all(f2 > 0):
        G = _ratio_log_gradient(fields, X)
        gn = np.linalg.norm(G, axis=-1)
        for c, g in zip(cells, gn):
            c["ratio_gradient_norm"] = float(g)
        grid_shape = tuple(int(k) for k in n)
        gn_grid = gn.reshape(grid_shape)
        # interior local minima of |grad log(f1/f2)|
        crit = []
        for idx in np.ndindex(grid_shape):
            if any(i in (0, s - 1) for i, s in zip(idx, grid_shape)):
                continue
            nb = gn_grid[tuple(slice(i - 1, i + 2) for i in idx)]
            if gn_grid[idx] <= nb.min() and gn_grid[idx] < 0.5 * np.median(gn):
                crit.append({"point": [float(axes[j][i]) for j, i in enumerate(idx)],
                             "gradient_norm": float(gn_grid[idx])})
        summary["ratio_critical_cells"] = crit
        summary["cell_size"] = [float((hi[j] - lo[j]) / max(n[j] - 1, 1)) for j in range(lo.size)]
    return Atlas([a.tolist() for a in axes], cells, summary)


def atlas_for_spec(spec: SweepSpec, points_per_axis=5) -> Atlas:
    mu, h = spec.pairs()[0]
    params = SemiclassicalParams(mu, h, spec.tau, spec.mu_h_cap)
    grid = spec.grid_for(h)
    lo = np.array(grid.origin)
    return classify_domain(spec.fields(), (lo, lo + np.array(grid.lengths)), params, points_per_axis)
