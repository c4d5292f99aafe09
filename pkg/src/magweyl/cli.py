"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
Data goes to standard output or files; diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import counting, dynamics, experiments, geometry, weyl
from .config import ConfigError, RunConfig
from .discrete import GridSpec, build_hamiltonian
from .fields import FAMILIES, make_field
from .params import SemiclassicalParams

log = logging.getLogger("magweyl")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _linspace(text):
    """``lo:hi:n`` or a comma list."""
    if ":" in text:
        try:
            lo, hi, n = text.split(":")
            return np.linspace(float(lo), float(hi), int(n)).tolist()
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected lo:hi:n, got {text!r}") from None
    return _floats(text)


def _keyval(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    try:
        return k, json.loads(v)
    except json.JSONDecodeError:
        return k, v


def build_parser() -> argparse.ArgumentParser:
    families = sorted(FAMILIES) + ["polynomial"]
    common = _Parser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--config", help="TOML run configuration; flags override its values")
    g.add_argument("--family", choices=families, help="field family (default: constant)")
    g.add_argument("--f1", type=float, help="first intensity parameter of the family")
    g.add_argument("--f2", type=float, help="second intensity parameter of the family")
    g.add_argument("--v0", type=float, help="potential offset of the family")
    g.add_argument("--dim", type=int, choices=(2, 4), help="dimension for families that support it")
    g.add_argument("--param", action="append", type=_keyval, default=[], metavar="KEY=JSON",
                   help="extra family parameter (repeatable)")
    g.add_argument("--mu", type=float, help="field strength mu >= 1")
    g.add_argument("--h", type=float, help="semiclassical parameter h in (0, 1]")
    g.add_argument("--tau", type=float, help="energy level (default 0)")
    g.add_argument("--mu-h-cap", type=float, help="constant c in mu <= c/h (default 1)")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("--out", help="output file or directory")
    g.add_argument("-v", "--verbose", action="count", default=None, help="more diagnostics")

    p = _Parser(prog="magweyl", description="Numerical lab for 4-D magnetic Schroedinger operators.")
    sub = p.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", parser_class=_Parser)

    c = sub.add_parser("classify", parents=[common], help="pointwise classification (JSON)")
    c.add_argument("--point", type=_floats, help="comma-separated coordinates (default origin)")
    c.add_argument("--eps", type=float, help="ellipticity margin (default 1e-2)")
    c.add_argument("--order", type=int, help="maximal resonance order (default 5)")

    w = sub.add_parser("weyl", parents=[common], help="Weyl-type densities at a point or integrated")
    w.add_argument("--point", type=_floats, help="evaluation point (default origin)")
    w.add_argument("--density", choices=sorted(weyl.DENSITIES), help="density for --box integration")
    w.add_argument("--box", type=_floats, help="lo1,...,lod,hi1,...,hid: integrate over this box")
    w.add_argument("--nodes", type=int, help="quadrature nodes per axis (default 16)")
    w.add_argument("--omega", type=float, help="constant omega for the corrected density")

    s = sub.add_parser("spectrum", parents=[common], help="counting curve of the discretized operator (CSV)")
    s.add_argument("--dims", type=_ints, help="grid points per axis")
    s.add_argument("--lengths", type=_floats, help="box lengths per axis")
    s.add_argument("--boundary", help="dirichlet or periodic, or a comma list per axis")
    s.add_argument("--method", choices=("dense", "inertia", "kpm"), help="counting method (default dense)")
    s.add_argument("--tau-grid", type=_linspace, help="lo:hi:n or comma list of energies (write --tau-grid=-1:1:5 for negative lo)")
    s.add_argument("--moments", type=int, help="Chebyshev moments for kpm")
    s.add_argument("--probes", type=int, help="probe vectors for kpm")
    s.add_argument("--jobs", type=int, help="worker threads for kpm probes")

    d = sub.add_parser("dynamics", parents=[common], help="classical trajectory and drift report")
    d.add_argument("--point", type=_floats, help="initial position (default origin)")
    d.add_argument("--momentum", type=_floats, help="initial kinetic momentum p")
    d.add_argument("--T", type=float, help="final time (default: --periods cyclotron periods)")
    d.add_argument("--periods", type=float, help="run length in cyclotron periods (default 20)")
    d.add_argument("--tol", type=float, help="integrator tolerance in [1e-12, 1e-4]")
    d.add_argument("--samples", type=int, help="output samples (default 801)")
    d.add_argument("--mu-sweep", type=_floats, help="comma list of mu values for the drift exponent fit")

    w2 = sub.add_parser("sweep", parents=[common], help="(mu, h) sweep from a configuration file")
    w2.add_argument("--cache", help="cache directory for completed points")
    w2.add_argument("--jobs", type=int, help="worker threads for sweep points")
    w2.add_argument("--atlas", action="store_true", default=None, help="also write a classification atlas")
    return p


_COMMON = {"family", "f1", "f2", "v0", "dim", "param", "mu", "h", "tau", "mu_h_cap", "seed", "out",
           "verbose", "config", "subcommand"}


def config_from_args(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
        if cfg.subcommand != args.subcommand:
            raise ConfigError(
                f"configuration is for {cfg.subcommand!r}, not {args.subcommand!r}"
            )
    else:
        cfg = RunConfig(subcommand=args.subcommand)
    if args.family is not None and args.family != cfg.family:
        cfg.family = args.family
        cfg.family_params = {}
    for key in ("f1", "f2", "v0", "dim"):
        if getattr(args, key) is not None:
            cfg.family_params[key] = getattr(args, key)
    for k, v in args.param:
        cfg.family_params[k] = v
    for key in ("mu", "h", "tau", "mu_h_cap"):
        if getattr(args, key) is not None:
            cfg.params[key] = getattr(args, key)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.verbose is not None:
        cfg.verbosity = args.verbose
    if args.out is not None:
        cfg.output["path"] = args.out
    for key, val in vars(args).items():
        if key not in _COMMON and val is not None:
            cfg.options[key] = val
    return cfg


def _fields(cfg):
    try:
        return make_field(cfg.family, **cfg.family_params)
    except TypeError as exc:
        raise UsageError(f"bad parameters for family {cfg.family!r}: {exc}") from None


def _params(cfg, default_mu=1.0, default_h=1.0):
    p = cfg.params
    return SemiclassicalParams(
        p.get("mu", default_mu), p.get("h", default_h), p.get("tau", 0.0), p.get("mu_h_cap", 1.0)
    )


def _point(cfg, fields):
    x = cfg.options.get("point") or [0.0] * fields.dim
    if len(x) != fields.dim:
        raise UsageError(f"--point needs {fields.dim} coordinates, got {len(x)}")
    return np.asarray(x, dtype=float)


def _emit(cfg, text):
    path = cfg.output.get("path")
    if path:
        Path(path).write_text(text)
        log.info("wrote %s", path)
    else:
        sys.stdout.write(text)


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def run_classify(cfg):
    fields = _fields(cfg)
    params = _params(cfg)
    x = _point(cfg, fields)
    c = geometry.classify_point(
        fields, x, params, cfg.options.get("eps", geometry.DEFAULT_EPS0),
        cfg.options.get("order", geometry.MAX_RESONANCE_ORDER),
    )
    _emit(cfg, _json({"schema_version": 1, **c.to_dict()}))


def run_weyl(cfg):
    fields = _fields(cfg)
    params = _params(cfg)
    opts = cfg.options
    omega = opts.get("omega", 0.0)
    if opts.get("box"):
        b = opts["box"]
        if len(b) != 2 * fields.dim:
            raise UsageError(f"--box needs {2 * fields.dim} numbers")
        # psi = 1 never vanishes on the box; the JSON carries support_warning instead
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = weyl.integrate_density(opts.get("density", "magnetic_weyl"), fields, params,
                                         lambda X: np.ones(X.shape[:-1]),
                                         (b[: fields.dim], b[fields.dim:]), opts.get("nodes", 16),
                                         omega=omega)
        out = {"schema_version": 1, "density": opts.get("density", "magnetic_weyl"), **res.to_dict()}
    else:
        x = _point(cfg, fields)
        q = weyl.DensityQuery(fields, params, x, omega)
        out = {"schema_version": 1, "point": x.tolist(), "weyl": weyl.weyl_density(q)}
        try:
            out["density"] = weyl.magnetic_weyl_density(q)
            out["magnetic_weyl"] = out["density"]
            out["quantum"] = weyl.density_quantum(q)
            out["corrected"] = weyl.corrected_density(q)
        except geometry.PreconditionError as exc:
            out["density"] = None
            out["note"] = str(exc)
    _emit(cfg, _json(out))


def run_spectrum(cfg):
    fields = _fields(cfg)
    params = _params(cfg)
    opts = cfg.options
    dims = opts.get("dims") or [6] * fields.dim
    lengths = opts.get("lengths") or [1.0] * fields.dim
    bnd = opts.get("boundary", "dirichlet")
    bnd = bnd.split(",") if "," in bnd else bnd
    grid = GridSpec(tuple(dims), tuple(lengths), bnd)
    H = build_hamiltonian(fields, grid, params)
    tau = opts.get("tau_grid") or [params.tau]
    method = opts.get("method", "dense")
    if method == "kpm":
        curve = counting.kpm_count(H, tau, opts.get("moments", counting.DEFAULT_MOMENTS),
                                   opts.get("probes", 32), cfg.seed, n_jobs=opts.get("jobs", 1))
    else:
        curve = counting.SpectralCounter(method=method, seed=cfg.seed).fit(H).count_curve(tau)
    log.info("operator dimension %d, method %s", H.shape[0], method)
    _emit(cfg, curve.to_csv())


def run_dynamics(cfg):
    fields = _fields(cfg)
    opts = cfg.options
    x0 = _point(cfg, fields)
    p0 = np.asarray(opts.get("momentum") or [1.0] + [0.0] * (fields.dim - 1), dtype=float)
    tol = opts.get("tol", 1e-10)
    samples = opts.get("samples", 801)
    periods = opts.get("periods", 20.0)
    if opts.get("mu_sweep"):
        sw = dynamics.drift_sweep(fields, opts["mu_sweep"], cfg.params.get("h", 1e-3), x0, p0,
                                  periods=periods, tol=tol, samples=samples)
        _emit(cfg, _json(sw.summary()))
        return
    params = _params(cfg, default_h=1e-3)
    state = dynamics.PhaseState.from_momentum(fields, params, x0, p0)
    T = opts.get("T")
    if T is None:
        _, M = geometry.magnetic_matrix(fields, x0)
        fmax = float(np.max(np.abs(np.linalg.eigvals(M))))
        if fmax == 0:
            raise UsageError("zero field at the start point: give --T explicitly")
        T = periods * 2 * np.pi / (params.mu * fmax)
    try:
        rep = dynamics.drift_report(fields, params, state, T, tol, samples)
    except dynamics.ConditioningError as exc:
        log.warning("%s; writing the bare trajectory", exc)
        traj = dynamics.integrate(fields, params, state, T, tol,
                                  t_eval=np.linspace(0.0, T, samples))
        _emit(cfg, traj.to_csv())
        return
    path = cfg.output.get("path")
    if path:
        Path(path).write_text(rep.to_csv())
        log.info("wrote %s", path)
    sys.stdout.write(_json({"schema_version": 1, **rep.summary()}))


def run_sweep(cfg):
    spec_data = {k: v for k, v in cfg.options.items() if k not in ("cache", "jobs", "atlas")}
    spec_data.setdefault("family", cfg.family)
    if cfg.family_params:
        spec_data.setdefault("family_params", cfg.family_params)
    spec_data.setdefault("seed", cfg.seed)
    try:
        spec = experiments.SweepSpec.from_dict(spec_data)
    except TypeError as exc:
        raise UsageError(f"bad sweep specification: {exc}") from None
    out = Path(cfg.output.get("path") or cfg.output.get("dir") or "sweep_out")
    res = experiments.run_sweep(spec, cache_dir=cfg.options.get("cache") or cfg.output.get("cache"),
                                n_jobs=cfg.options.get("jobs"))
    res.write(out)
    if cfg.options.get("atlas"):
        (out / "atlas.json").write_text(_json(experiments.atlas_for_spec(spec).to_dict()))
    failed = [r for r in res.records if r["status"] != "ok"]
    for r in failed:
        log.warning("point mu=%g h=%g failed: %s", r["mu"], r["h"], r.get("error"))
    sys.stdout.write(_json(res.fit.summary()))
    if len(failed) == len(res.records):
        raise RuntimeError("every sweep point failed")


RUNNERS = {
    "classify": run_classify,
    "weyl": run_weyl,
    "spectrum": run_spectrum,
    "dynamics": run_dynamics,
    "sweep": run_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.subcommand is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = config_from_args(args)
        logging.basicConfig(level=logging.WARNING - 10 * min(cfg.verbosity, 2),
                            format="%(levelname)s: %(message)s", stream=sys.stderr)
        RUNNERS[cfg.subcommand](cfg)
    except (UsageError, ConfigError, experiments.SweepError, OSError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
