"""Classical flow of ``a(x, xi) = 1/2 (sum p_j g^{jk} p_k - V)``, ``p = xi - mu V_j``.

Cyclotron motion has frequency ``~ mu f`` and the guiding centre
``x' = x - mu^-1 F^-1 p`` drifts with speed ``O(1/mu)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .fields import DomainError, FieldData
from .geometry import magnetic_matrix
from .measure import PowerLawRegressor
from .params import SemiclassicalParams

GUIDING_EPS = 1e-8
RETRIES = 3
MIN_RTOL = 1e-14


class ConditioningError(ValueError):
    pass


@dataclass
class PhaseState:
    x: np.ndarray
    xi: np.ndarray

    @classmethod
    def from_momentum(cls, fields: FieldData, params: SemiclassicalParams, x, p):
        x = np.asarray(x, dtype=float)
        return cls(x, np.asarray(p, dtype=float) + params.mu * fields.a(x))

    def momentum(self, fields, params):
        return self.xi - params.mu * fields.a(self.x)

    def as_array(self):
        return np.concatenate([self.x, self.xi])


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    energy: np.ndarray
    success: bool
    message: str
    nfev: int = 0

    @property
    def energy_drift(self) -> float:
        e0 = self.energy[0]
        return float(np.max(np.abs(self.energy - e0)) / max(abs(e0), 1e-300))

    def to_csv(self, extra=None) -> str:
        d = self.x.shape[1]
        cols = ["t"] + [f"x{i + 1}" for i in range(d)] + [f"xi{i + 1}" for i in range(d)]
        data = [self.t[:, None], self.x, self.xi]
        if extra:
            for name, arr in extra.items():
                arr = np.asarray(arr)
                arr = arr[:, None] if arr.ndim == 1 else arr
                cols += [name] if arr.shape[1] == 1 else [f"{name}{i + 1}" for i in range(arr.shape[1])]
                data.append(arr)
        body = np.hstack(data)
        lines = [",".join(cols)] + [",".join(f"{v:.17g}" for v in row) for row in body]
        return "\n".join(lines) + "\n"


def symbol(fields: FieldData, params: SemiclassicalParams, x, xi):
    x = np.asarray(x, dtype=float)
    return _kinetic_symbol(fields, x, np.asarray(xi) - params.mu * fields.a(x))


def _kinetic_symbol(fields, x, p):
    g = fields.g(x)
    return 0.5 * (np.einsum("...j,...jk,...k->...", p, g, p) - fields.v(x))


def hamiltonian_rhs(fields: FieldData, params: SemiclassicalParams, state):
    """``(dx/dt, dxi/dt)`` of the Hamiltonian flow."""
    if isinstance(state, PhaseState):
        x, xi = state.x, state.xi
    else:
        state = np.asarray(state, dtype=float)
        d = fields.dim
        x, xi = state[..., :d], state[..., d:]
    mu = params.mu
    p = xi - mu * fields.a(x)
    g = fields.g(x)
    gp = np.einsum("...jk,...k->...j", g, p)
    dg = fields.d_metric(x)
    J = fields.d_gauge(x)
    dV = fields.d_potential(x)
    dxi = (
        -0.5 * np.einsum("...jkm,...k,...m->...j", dg, p, p)
        + mu * np.einsum("...jk,...k->...j", J, gp)
        + 0.5 * dV
    )
    if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(dxi))):
        raise DomainError("non-finite right-hand side")
    return gp, dxi


def integrate(fields: FieldData, params: SemiclassicalParams, state0: PhaseState, T, tol=1e-10,
              t_eval=None, max_step=np.inf) -> Trajectory:
    """Adaptive 8th-order (Dormand-Prince) integration over ``[0, T]``."""
    if T == 0:
        raise ValueError("T must be non-zero")
    if not 1e-12 <= tol <= 1e-4:
        raise ValueError("tol must lie in [1e-12, 1e-4]")
    d = fields.dim
    mu = params.mu
    # Integrate in (x, p): xi carries the large offset mu*V_j(x), which would
    # otherwise dominate the error control and spoil energy conservation.
    y0 = np.concatenate([state0.x, state0.momentum(fields, params)])

    def rhs(t, y):
        x, p = y[:d], y[d:]
        dx, dxi = hamiltonian_rhs(fields, params, PhaseState(x, p + mu * fields.a(x)))
        dp = dxi - mu * fields.d_gauge(x).T @ dx
        return np.concatenate([dx, dp])

    if t_eval is None:
        t_eval = np.linspace(0.0, T, 201)
    scale = max(1.0, float(np.max(np.abs(y0))))
    rtol = tol
    for _ in range(RETRIES + 1):
        sol = solve_ivp(rhs, (0.0, T), y0, method="DOP853", rtol=rtol, atol=rtol * scale,
                        t_eval=t_eval, max_step=max_step)
        x = sol.y[:d].T
        p = sol.y[d:].T
        energy = _kinetic_symbol(fields, x, p) if len(sol.t) else np.zeros(0)
        if not sol.success or len(sol.t) == 0:
            break
        drift = np.max(np.abs(energy - energy[0])) / max(abs(energy[0]), 1e-300)
        # the energy budget is enforced directly: tighten and retry
        if drift <= 10 * tol or rtol <= MIN_RTOL:
            break
        rtol = max(rtol / 10, MIN_RTOL)
    xi = p + mu * fields.a(x) if len(sol.t) else p
    msg = sol.message if sol.success else f"partial trajectory: {sol.message}"
    return Trajectory(sol.t, x, xi, energy, bool(sol.success), msg, int(sol.nfev))


def guiding_center(fields: FieldData, params: SemiclassicalParams, x, xi, eps=GUIDING_EPS):
    """``x' = x - mu^-1 F^-1 p``; vectorised over leading axes."""
    x = np.asarray(x, dtype=float)
    F, M = magnetic_matrix(fields, x)
    detM = np.linalg.det(M)
    # det M = (f1 f2)^2 in 4-D and f^2 in 2-D
    if np.any(np.sqrt(np.abs(detM)) < eps):
        raise ConditioningError(
            f"magnetic matrix nearly singular: f1*f2 = {np.sqrt(np.min(np.abs(detM))):.3e}"
        )
    p = np.asarray(xi) - params.mu * fields.a(x)
    corr = np.linalg.solve(F, p[..., None])[..., 0]
    return x - corr / params.mu


def _block_intensities(fields, x, blocks):
    out = []
    _, M = magnetic_matrix(fields, x)
    for b in blocks:
        Mb = M[..., b, :][..., :, b]
        out.append(np.sqrt(np.abs(np.linalg.det(Mb))))
    return out


def _is_block_aligned(fields, X, blocks, tol=1e-10):
    g = fields.g(X)
    F, _ = magnetic_matrix(fields, X)
    d = fields.dim
    mask = np.ones((d, d), dtype=bool)
    for b in blocks:
        mask[np.ix_(b, b)] = False
    return np.max(np.abs(g[..., mask]), initial=0.0) < tol and np.max(np.abs(F[..., mask]), initial=0.0) < tol


@dataclass
class DriftReport:
    mu: float
    T: float
    steps: int
    t: np.ndarray
    guiding: np.ndarray
    drift_velocity: np.ndarray
    drift_speed: float
    cyclotron_amplitude: float
    cyclotron_speed: float
    invariants: np.ndarray | None
    invariant_oscillation: list | None
    energy_drift: float
    notes: list = field(default_factory=list)
    trajectory: Trajectory | None = field(default=None, repr=False)

    def to_csv(self) -> str:
        extra = {"xg": self.guiding}
        if self.invariants is not None:
            extra["I"] = self.invariants
        return self.trajectory.to_csv(extra)

    def summary(self) -> dict:
        return {
            "mu": self.mu,
            "T": self.T,
            "steps": self.steps,
            "drift_velocity": self.drift_velocity.tolist(),
            "drift_speed": self.drift_speed,
            "cyclotron_amplitude": self.cyclotron_amplitude,
            "cyclotron_speed": self.cyclotron_speed,
            "invariant_oscillation": self.invariant_oscillation,
            "energy_drift": self.energy_drift,
            "notes": self.notes,
        }


def drift_report(fields: FieldData, params: SemiclassicalParams, state0: PhaseState, T, tol=1e-10,
                 samples=801) -> DriftReport:
    """Integrate, track the guiding centre and the per-plane action proxies."""
    t_eval = np.linspace(0.0, T, samples)
    traj = integrate(fields, params, state0, T, tol, t_eval=t_eval)
    notes = [] if traj.success else [traj.message]
    xg = guiding_center(fields, params, traj.x, traj.xi)
    A = np.column_stack([np.ones_like(traj.t), traj.t])
    coef, *_ = np.linalg.lstsq(A, xg, rcond=None)
    vel = coef[1]
    p = traj.xi - params.mu * fields.a(traj.x)
    g = fields.g(traj.x)
    xdot = np.einsum("...jk,...k->...j", g, p)
    d = fields.dim
    blocks = [[0, 1], [2, 3]] if d == 4 else [[0, 1]]
    inv = osc = None
    if _is_block_aligned(fields, traj.x, blocks):
        fb = _block_intensities(fields, traj.x, blocks)
        cols = []
        for b, f in zip(blocks, fb):
            pb = p[:, b]
            gb = g[:, b, :][:, :, b]
            cols.append(0.5 * np.einsum("ij,ijk,ik->i", pb, gb, pb) / f)
        inv = np.column_stack(cols)
        osc = []
        for col in inv.T:
            m = float(np.mean(col))
            osc.append(float((col.max() - col.min()) / m) if m > 0 else None)
    else:
        notes.append("action proxies omitted: (g, F) not aligned with the (1,2)/(3,4) planes")
    return DriftReport(
        mu=params.mu,
        T=float(T),
        steps=traj.nfev,
        t=traj.t,
        guiding=xg,
        drift_velocity=vel,
        drift_speed=float(np.linalg.norm(vel)),
        cyclotron_amplitude=float(np.max(np.linalg.norm(traj.x - xg, axis=1))),
        cyclotron_speed=float(np.mean(np.linalg.norm(xdot, axis=1))),
        invariants=inv,
        invariant_oscillation=osc,
        energy_drift=traj.energy_drift,
        notes=notes,
        trajectory=traj,
    )


@dataclass
class DriftSweep:
    reports: list
    exponent: float
    exponent_stderr: float
    invariant_exponents: list | None

    def summary(self) -> dict:
        return {
            "schema_version": 1,
            "mu": [r.mu for r in self.reports],
            "drift_speed": [r.drift_speed for r in self.reports],
            "exponent": self.exponent,
            "exponent_stderr": self.exponent_stderr,
            "invariant_exponents": self.invariant_exponents,
        }


def drift_sweep(fields: FieldData, mus, h, x0, p0, periods=20.0, tol=1e-10, samples=801) -> DriftSweep:
    """Drift reports over a list of ``mu`` and the fitted exponent of the drift speed.

    Each run starts from position ``x0`` with kinetic momentum ``p0`` and
    lasts ``periods`` cyclotron periods of the largest intensity.
    """
    reports = []
    for mu in mus:
        params = SemiclassicalParams(mu, h, validate=False)
        state = PhaseState.from_momentum(fields, params, x0, p0)
        _, M = magnetic_matrix(fields, np.asarray(x0, dtype=float))
        fmax = float(np.max(np.abs(np.linalg.eigvals(M))))
        T = periods * 2 * np.pi / (mu * fmax)
        reports.append(drift_report(fields, params, state, T, tol, samples))
    speeds = np.array([r.drift_speed for r in reports])
    fit = PowerLawRegressor().fit(np.asarray(mus, dtype=float), speeds)
    inv_exp = None
    if all(r.invariant_oscillation for r in reports):
        inv_exp = []
        for j in range(len(reports[0].invariant_oscillation)):
            vals = [r.invariant_oscillation[j] for r in reports]
            if all(v is not None and v > 0 for v in vals):
                inv_exp.append(float(PowerLawRegressor().fit(np.asarray(mus, float), vals).coef_[0]))
            else:
                inv_exp.append(None)
    return DriftSweep(reports, float(fit.coef_[0]), float(fit.stderr_[0]), inv_exp)
