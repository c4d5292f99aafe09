"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` (lines are also printed
without ``-s``) or directly with ``python tests/test_acceptance.py``.
"""

import itertools
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from magweyl.counting import dense_count, inertia_curve, kpm_count
from magweyl.discrete import GridSpec, build_hamiltonian, separable_split
from magweyl.dynamics import PhaseState, drift_report, drift_sweep
from magweyl.experiments import SweepSpec, evaluate_point, run_sweep
from magweyl.fields import (
    Polynomial,
    constant_family,
    polynomial_family,
    trigonometric_family,
    with_gauge_transform,
)
from magweyl.geometry import intensity_pair, microhyperbolicity_margin, phi_alpha_gradient
from magweyl.measure import nu_estimate
from magweyl.params import SemiclassicalParams
from magweyl.weyl import DensityQuery, corrected_density, density_quantum, magnetic_weyl_density, weyl_density

SEED = 20240611

pytestmark = pytest.mark.slow


def report(n, passed, detail):
    line = f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}"
    sys.__stdout__.write(line + "\n")
    sys.__stdout__.flush()
    return line


def lattice_count(E, a, b):
    """Brute enumeration of (2m+1) a + (2n+1) b <= E."""
    top = int(E / a) + 2
    return sum(1 for m, n in itertools.product(range(top), repeat=2)
               if (2 * m + 1) * a + (2 * n + 1) * b <= E)


# ---------------------------------------------------------------------------
# 1. Landau exactness on a flux-quantized torus


def check_1():
    h, V, dims = 0.1, 0.3, 24
    mu = 2 * math.pi * h * 4  # flux integers 8 (f1 = 2) and 4 (f2 = 1) on the unit torus
    mh = mu * h
    phi12, phi34 = 8, 4
    f = constant_family(2.0, 1.0, v0=V, gauge="landau")
    grid = GridSpec((dims,) * 4, (1.0,) * 4, "periodic")
    H12, H34 = separable_split(f, grid, SemiclassicalParams(mu, h))
    e12 = np.linalg.eigvalsh(H12.to_dense())
    e34 = np.linalg.eigvalsh(H34.to_dense())
    ev = np.sort((e12[:, None] + e34[None, :]).ravel())
    problems = []
    # level values in units of mu h: 2(2m+1) + (2n+1) = 3, 5, 7, ...
    clusters = 6
    start = 0
    for k in range(clusters):
        value = 3 + 2 * k
        # pairs (m, n) with 2(2m+1) + (2n+1) = value
        mult = phi12 * phi34 * sum(1 for m in range(k + 1) if value - 2 * (2 * m + 1) >= 1)
        level = 0.5 * (value * mh - V)
        block = ev[start:start + mult]
        if np.max(np.abs(block - level)) >= 0.5 * mh:
            problems.append(f"cluster {k} strays from {level:.4f}")
        if start + mult < ev.size and ev[start + mult] - level <= 0.5 * mh:
            problems.append(f"cluster {k} has more than {mult} states")
        start += mult
        # integer equality strictly between clusters
        tau = 0.5 * ((value + 1) * mh - V)
        spec = SweepSpec(family="constant",
                         family_params={"f1": 2.0, "f2": 1.0, "v0": V, "gauge": "landau"},
                         grid={"lengths": [1, 1, 1, 1], "boundary": "periodic", "dims": [dims] * 4},
                         points=[[mu, h]], tau=tau, method="separable")
        rec = evaluate_point(spec, mu, h)
        exact = phi12 * phi34 * lattice_count(2 * tau + V, 2 * mh, mh)
        main = rec["main_term"]
        if rec["status"] != "ok" or rec["N_disc"] != exact:
            problems.append(f"count {rec.get('N_disc')} != {exact} at tau={tau:.4f}")
        if round(main) != exact or abs(main - exact) > 1e-9 * exact:
            problems.append(f"integrated density {main!r} != {exact}")
    ok = not problems
    return ok, (f"{clusters} clusters, counts equal the lattice count x {phi12 * phi34}"
                if ok else "; ".join(problems))


# ---------------------------------------------------------------------------
# 2. classical limit of the magnetic Weyl density


def check_2():
    f = constant_family(math.sqrt(2), 1.0, v0=1.0, grad_v=[0.3, 0.1, 0.0, 0.0])
    X = np.random.default_rng(SEED).uniform(-0.5, 0.5, size=(10, 4))
    errs = []
    for mh in (1e-2, 1e-3, 1e-4):
        q = DensityQuery(f, SemiclassicalParams(1.0, mh, 0.5), X)
        errs.append(float(np.max(np.abs(magnetic_weyl_density(q) / weyl_density(q) - 1))))
    ok = errs[0] > errs[1] > errs[2] and all(e <= b for e, b in zip(errs, (0.5, 0.05, 0.005)))
    return ok, "max |E^MW/E^W - 1| = " + ", ".join(f"{e:.2e}" for e in errs)


# ---------------------------------------------------------------------------
# 3. intensity identities


def check_3():
    rng = np.random.default_rng(SEED)
    worst = [0.0, 0.0, 0.0]
    for _ in range(1000):
        A = rng.normal(size=(4, 4))
        g = A @ A.T + 0.5 * np.eye(4)
        B = rng.normal(size=(4, 4))
        F = B - B.T
        M = g @ F
        p = intensity_pair(M)
        s = -0.5 * np.trace(M @ M)
        d = np.linalg.det(M)
        im = np.sort(np.abs(np.linalg.eigvals(M).imag))[::-1]
        worst[0] = max(worst[0], abs(p.f1**2 + p.f2**2 - s) / s)
        worst[1] = max(worst[1], abs((p.f1 * p.f2) ** 2 - d) / d)
        worst[2] = max(worst[2], abs(p.f1 - im[0]) / im[0], abs(p.f2 - im[2]) / im[0])
    ok = max(worst) <= 1e-9
    return ok, "worst relative errors (sum, product, eigensolver) = " + ", ".join(f"{w:.1e}" for w in worst)


# ---------------------------------------------------------------------------
# 4. microhyperbolicity closed form


def _smooth_field(rng):
    X = [Polynomial.variable(i, 4) for i in range(4)]
    zero = Polynomial.constant(0.0, 4)
    c = rng.normal(scale=0.3, size=6)
    gauge = [zero, (2.0 + c[0] * X[2]) * X[0], zero, (1.0 + c[1] * X[0] * X[0]) * X[2]]
    pot = Polynomial.constant(1.0, 4) + c[2] * X[0] + c[3] * X[1] + c[4] * X[3] + c[5] * X[2] * X[2]
    return polynomial_family(gauge, pot)


def check_4():
    rng = np.random.default_rng(SEED)
    alphas = np.linspace(0.0, 1.0, 10_000)
    worst = 0.0
    for _ in range(100):
        f = _smooth_field(rng)
        x = rng.uniform(-0.3, 0.3, size=4)
        m, _ = microhyperbolicity_margin(f, x)
        g0 = phi_alpha_gradient(f, x, 0.0)
        g1 = phi_alpha_gradient(f, x, 1.0)
        brute = np.min(np.linalg.norm(g0[None] + alphas[:, None] * (g1 - g0)[None], axis=1))
        worst = max(worst, abs(m - brute))
    # Lipschitz check of alpha_bar on a segment where the margin stays above eps0 = 1e-2
    f = _smooth_field(np.random.default_rng(SEED + 1))
    a, b = np.full(4, -0.2), np.full(4, 0.2)
    quotients = []
    for n in (200, 400):
        ts = np.linspace(0.0, 1.0, n + 1)
        pts = a[None] + ts[:, None] * (b - a)[None]
        res = np.array([microhyperbolicity_margin(f, p) for p in pts])
        margins, ab = res[:, 0], res[:, 1]
        if margins.min() < 1e-2:
            return False, f"segment leaves the microhyperbolic region (margin {margins.min():.2e})"
        step = np.linalg.norm(b - a) / n
        quotients.append(float(np.max(np.abs(np.diff(ab))) / step))
    # a jump would double the difference quotient when the step halves
    lipschitz = quotients[1] <= 1.1 * quotients[0] + 1e-9
    ok = worst <= 1e-6 and lipschitz
    return ok, (f"max |closed - grid| = {worst:.1e}; alpha_bar difference quotients "
                f"{quotients[0]:.3f} -> {quotients[1]:.3f}")


# ---------------------------------------------------------------------------
# 5. dense / inertia / KPM agreement


def _method_operators():
    yield "trig 6^4", build_hamiltonian(
        trigonometric_family(2.0, 1.0, v0=2.0, lengths=(1.0,) * 4, gauge_amp=0.2, pot_amp=0.3),
        GridSpec((6,) * 4, (1.0,) * 4), SemiclassicalParams(3.0, 0.2))
    yield "slab 40x40", build_hamiltonian(
        constant_family(3.0, dim=2, v0=1.0, gauge="landau", grad_v=[0.5, 0.0]),
        GridSpec((40, 40), (1.0, 1.0), ("dirichlet", "periodic")), SemiclassicalParams(4.0, 0.05))
    yield "box 24x24", build_hamiltonian(
        constant_family(2.0, dim=2, v0=1.0, grad_v=[0.3, 0.2]),
        GridSpec((24, 24), (1.0, 1.0)), SemiclassicalParams(5.0, 0.1))


def check_5():
    parts = []
    ok = True
    for name, H in _method_operators():
        ev = np.linalg.eigvalsh(H.to_dense())
        taus = np.linspace(ev[0], ev[-1], 23)[1:-1]
        dense = dense_count(H, taus).counts
        inertia = inertia_curve(H, taus).counts
        kpm = kpm_count(H, taus, moments=1024, probes=32, seed=SEED)
        frac = float(np.mean(np.abs(kpm.counts - dense) <= 3 * kpm.stderr))
        exact = bool(np.array_equal(dense, inertia))
        ok &= exact and frac >= 0.95 and 500 <= H.shape[0] <= 2000
        parts.append(f"{name} (n={H.shape[0]}): inertia {'==' if exact else '!='} dense, "
                     f"kpm within 3 sigma at {frac:.0%}")
    return ok, "; ".join(parts)


# ---------------------------------------------------------------------------
# 6. gauge invariance


def check_6():
    f = trigonometric_family(2.0, 1.0, v0=2.0, lengths=(1.0,) * 4, gauge_amp=0.2, pot_amp=0.3)

    def chi(x):
        return 0.7 * x[..., 0] ** 2 * x[..., 1] - 0.4 * x[..., 2] * x[..., 3] ** 3 + 0.3 * x[..., 1]

    def grad_chi(x):
        g = np.zeros(np.shape(x))
        g[..., 0] = 1.4 * x[..., 0] * x[..., 1]
        g[..., 1] = 0.7 * x[..., 0] ** 2 + 0.3
        g[..., 2] = -0.4 * x[..., 3] ** 3
        g[..., 3] = -1.2 * x[..., 2] * x[..., 3] ** 2
        return g

    fg = with_gauge_transform(f, chi, grad_chi)
    grid = GridSpec((6,) * 4, (1.0,) * 4)
    params = SemiclassicalParams(3.0, 0.2)
    e0 = np.linalg.eigvalsh(build_hamiltonian(f, grid, params).to_dense())
    e1 = np.linalg.eigvalsh(build_hamiltonian(fg, grid, params).to_dense())
    err = float(np.max(np.abs(e0 - e1)))
    return err <= 1e-9, f"max eigenvalue difference {err:.1e} on the 6^4 grid"


# ---------------------------------------------------------------------------
# 7. drift law


def check_7():
    b, v1 = 2.0, 0.5
    mus = [10.0, 30.0, 100.0, 300.0]
    x0, p0 = np.zeros(4), np.array([0.3, 0.4, 0.2, 0.1])
    f = constant_family(b, 1.0, v0=2.0, grad_v=[v1, 0.0, 0.0, 0.0])
    sweep = drift_sweep(f, mus, 1e-3, x0, p0, periods=20)
    rel = [abs(r.drift_speed / (v1 / (2 * r.mu * b)) - 1) for r in sweep.reports]
    control = constant_family(b, 1.0, v0=2.0)
    ratios = []
    for mu in mus:
        params = SemiclassicalParams(mu, 1e-3, validate=False)
        rep = drift_report(control, params, PhaseState.from_momentum(control, params, x0, p0),
                           20 * 2 * math.pi / (mu * b))
        ratios.append(rep.drift_speed / rep.cyclotron_speed)
    ok = max(rel) <= 0.05 and abs(sweep.exponent + 1) <= 0.15 and max(ratios) <= 1e-6
    return ok, (f"max speed error {max(rel):.1e}, exponent {sweep.exponent:.4f}, "
                f"control drift/cyclotron {max(ratios):.1e}")


# ---------------------------------------------------------------------------
# 8. correction-term window average


def check_8():
    f = constant_family(math.sqrt(2), 1.0, v0=0.0)
    mu, h = 100.0, 1e-4
    spacing = mu * h  # tau units; levels are 2 mu h f2 apart in energy
    omega = 0.1 * 2 * mu * h * mu**2  # threshold shift of a tenth of a spacing
    x = np.zeros(4)
    tau0, n = 0.1, 20_000
    q = density_quantum(DensityQuery(f, SemiclassicalParams(mu, h, tau0), x))
    averages = []
    for spacings in (20, 40, 80):
        W = spacings * spacing
        taus = tau0 + (np.arange(n) + 0.5) * W / n
        vals = [corrected_density(DensityQuery(f, SemiclassicalParams(mu, h, t), x, omega)) for t in taus]
        averages.append(abs(math.fsum(vals) / n) / q)
    ok = averages[0] <= 0.05 and averages[0] > averages[1] > averages[2]
    return ok, "|window average| / quantum at 20, 40, 80 spacings = " + ", ".join(
        f"{a:.2e}" for a in averages)


# ---------------------------------------------------------------------------
# 9. 2-D pilot remainder exponent

PREDICTED_H_EXPONENT = -0.75  # mu^-1 h^-1 along mu = h^(-1/4)


def pilot_spec():
    return SweepSpec(
        family="constant",
        family_params={"f1": 2.0, "dim": 2, "v0": 1.0, "grad_v": [2.0, 0.0], "gauge": "landau"},
        grid={"lengths": [0.8, 0.5], "boundary": ["dirichlet", "periodic"], "step_per_h": 0.125},
        ladder={"c": 1.0, "kappa": 0.25, "h": [1 / 64, 1 / 128, 1 / 256, 1 / 512]},
        psi={"kind": "bump", "center": [0.0, 0.0], "radius": [0.25, 1.0], "axes": [0]},
        weyl_nodes=[65536, 8],
    )


def check_9():
    result = run_sweep(pilot_spec())
    fit = result.fit
    rows = ", ".join(f"h=1/{round(1 / r['h'])}: R={r['remainder']:.3g} disc={r['disc_error']:.3g}"
                     for r in fit.rows if r.get("status") == "ok")
    if fit.limited:
        return False, f"{fit.reason} [{rows}]"
    b = fit.exponents["h"]
    ok = abs(b - PREDICTED_H_EXPONENT) <= 0.3
    return ok, f"h-exponent {b:.3f} vs {PREDICTED_H_EXPONENT} from {fit.n_points} rows [{rows}]"


# ---------------------------------------------------------------------------
# 10. determinism across worker counts


def check_10():
    H = next(_method_operators())[1]
    taus = np.linspace(0.5, 8.0, 9)
    kpm = {j: kpm_count(H, taus, moments=256, probes=16, seed=SEED, n_jobs=j).to_csv() for j in (1, 4, 8)}

    def norm(X, alpha):
        return np.abs(X[:, 0] - alpha)

    box = (np.zeros(4), np.ones(4))
    nu = {j: nu_estimate(norm, box, [0.05, 0.1, 0.2], samples=40_000, seed=SEED, block_size=5000,
                         n_jobs=j) for j in (1, 4, 8)}
    nu_bytes = {j: (e.nu.tobytes(), e.hits.tobytes(), repr(e.q)) for j, e in nu.items()}
    spec = SweepSpec(
        family="constant",
        family_params={"f1": 2.0, "dim": 2, "v0": 1.0, "grad_v": [1.0, 0.0], "gauge": "landau"},
        grid={"lengths": [0.8, 0.5], "boundary": "dirichlet", "dims": [12, 8]},
        ladder={"c": 1.0, "kappa": 0.25, "h": [1 / 16, 1 / 32, 1 / 64]},
        tau=1.0, method="kpm", moments=128, probes=8, seed=SEED,
    )
    sweeps = {}
    with tempfile.TemporaryDirectory() as tmp:
        for j in (1, 4, 8):
            out = Path(tmp) / f"run{j}"
            run_sweep(spec, n_jobs=j).write(out)
            sweeps[j] = {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    same = [len(set(map(str, d.values()))) == 1 for d in (kpm, nu_bytes, sweeps)]
    return all(same), ("kpm, nu_estimate, run_sweep byte-identical over 1/4/8 threads: "
                       + ", ".join("yes" if s else "no" for s in same))


CHECKS = {n: globals()[f"check_{n}"] for n in range(1, 11)}


@pytest.mark.parametrize("n", list(CHECKS))
def test_criterion(n):
    start = time.perf_counter()
    passed, detail = CHECKS[n]()
    report(n, passed, f"{detail} ({time.perf_counter() - start:.1f} s)")
    assert passed, detail


if __name__ == "__main__":
    failures = 0
    for n, check in CHECKS.items():
        start = time.perf_counter()
        try:
            passed, detail = check()
        except Exception as exc:  # report and continue with the next criterion
            passed, detail = False, f"error: {type(exc).__name__}: {exc}"
        report(n, passed, f"{detail} ({time.perf_counter() - start:.1f} s)")
        failures += not passed
    sys.exit(1 if failures else 0)
