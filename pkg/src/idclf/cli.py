"""Experiment harness and command-line entry point.

Verbs: ``simulate``, ``compare``, ``clf-report``, ``validate-config`` and
``dump-qp``. Exit codes are 0 on success, 2 for configuration errors, 3 for
simulation failures and 4 for solver failures. ``IDCLF_OUTPUT_DIR`` sets
the output directory when ``--out`` is not given.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

from .control import QP_VARIANTS, VARIANTS, ControllerConfig, controller_config_from_dict
from .errors import ConfigError, IdclfError, SimulationError, SolverError
from .gait import gait_from_dict, load_gait
from .model import load_model, model_from_dict
from .sim import (SimConfig, SimLog, Walker, initial_state, load_json, sim_config_from_dict,
                  stride_distances)

OUTPUT_ENV = "IDCLF_OUTPUT_DIR"
DEFAULT_OUTPUT = "idclf_out"
EXIT_OK, EXIT_CONFIG, EXIT_SIM, EXIT_SOLVER = 0, 2, 3, 4
COMPARISON = ("IDCLFQP_Ff", "IDCLFQP_Fest", "IDCLFQP")
SCHEMA_VERSION = 1
STANCE = 0


# -- scenarios ----------------------------------------------------------------

@dataclass
class Scenario:
    """Everything one experiment needs: plant, reference, controller and run settings."""

    model: object
    gait: object
    controller: ControllerConfig
    sim: SimConfig
    variants: tuple = COMPARISON
    name: str = "scenario"


def _data_path(name):
    return Path(str(resources.files("idclf.data").joinpath(name)))


def _resolve(ref, base):
    p = Path(ref)
    return p if p.is_absolute() else base / p


def scenario_from_dict(cfg, base=Path(".")):
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported scenario schema_version {cfg.get('schema_version')!r}")
    extra = set(cfg) - {"schema_version", "name", "model", "gait", "controller", "sim",
                        "variants"}
    if extra:
        raise ConfigError(f"unknown scenario keys: {sorted(extra)}")
    model = load_model(None if cfg.get("model") is None else _resolve(cfg["model"], base))
    gait = load_gait(None if cfg.get("gait") is None else _resolve(cfg["gait"], base))
    ctrl = cfg.get("controller") or {}
    if isinstance(ctrl, str):
        ctrl = load_json(_resolve(ctrl, base))
    controller = controller_config_from_dict(ctrl)
    sim = sim_config_from_dict(cfg.get("sim") or {})
    variants = tuple(cfg.get("variants") or COMPARISON)
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}")
    return Scenario(model, gait, controller, sim, variants, cfg.get("name", "scenario"))


def load_scenario(path=None):
    """Load a scenario file; ``None`` loads the bundled three-way comparison."""
    path = _data_path("scenario_comparison.json") if path is None else Path(path)
    return scenario_from_dict(load_json(path), path.parent)


def output_dir(flag=None):
    """``--out`` beats ``IDCLF_OUTPUT_DIR``, which beats the default."""
    return Path(flag or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


# -- metrics ------------------------------------------------------------------

@dataclass
class VariantMetrics:
    variant: str
    status: str
    message: str
    steps: int
    ticks: int
    tracking_rms: dict
    max_abs_y: dict
    force_error_pct: list | None
    clf_violation_fraction: float
    clf_max_excess: float
    torque_energy: float

    @property
    def failed(self):
        return self.status != "ok"


def _rms(a, axis=0):
    return np.sqrt(np.mean(np.square(a), axis=axis))


def force_error_pct(log, rows=None):
    """Per-coordinate RMS error of the summed projected forces, in % of signal RMS."""
    est, true = log.cols("est_sum_"), log.cols("true_sum_")
    ok = np.all(np.isfinite(est), axis=1) & np.all(np.isfinite(true), axis=1)
    if rows is not None:
        ok &= rows
    if not ok.any():
        return None
    return 100.0 * _rms(est[ok] - true[ok]) / _rms(true[ok])


def torque_energy(log, names):
    """Integral of the squared prosthesis torques over the logged ticks."""
    d = log.data
    if len(d) < 2:
        return 0.0
    t = log.col("t")
    dt = np.diff(t)
    dt = np.r_[dt, np.median(dt)]
    u = np.column_stack([log.col(f"u_{n}") for n in names])
    return float(np.sum(np.sum(u ** 2, axis=1) * dt))


def metrics_from_log(log, variant, status="ok", message="", steps=0, tol=1e-8):
    """Stance-domain metrics; depends on the tabulated data only."""
    names = [c[2:] for c in log.columns if c.startswith("y_")]
    data = log.data
    stance = data[:, log.columns.index("domain")] == STANCE if len(data) else np.zeros(0, bool)
    if stance.any():
        y = log.cols("y_")[stance]
        rms = dict(zip(names, map(float, _rms(y))))
        ymax = dict(zip(names, map(float, np.max(np.abs(y), axis=0))))
    else:
        rms = {n: float("nan") for n in names}
        ymax = dict(rms)
    lhs, bound = log.col("clf_lhs"), log.col("clf_bound")
    qp = stance & np.isfinite(lhs) if len(data) else stance
    if qp.any():
        excess = lhs[qp] - bound[qp]
        frac = float(np.mean(excess > tol))
        worst = float(np.max(excess))
    else:
        frac, worst = float("nan"), float("nan")
    fe = force_error_pct(log, stance) if len(data) else None
    return VariantMetrics(variant, status, message, int(steps), len(data), rms, ymax,
                          None if fe is None else [float(v) for v in fe], frac, worst,
                          torque_energy(log, names) if len(data) else 0.0)


@dataclass
class ExperimentReport:
    scenario: str
    variants: dict = field(default_factory=dict)

    def ratio(self, num, den, output="pk"):
        a, b = self.variants.get(num), self.variants.get(den)
        if a is None or b is None:
            return float("nan")
        return a.tracking_rms[output] / b.tracking_rms[output]

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "scenario": self.scenario,
                "variants": {k: asdict(v) for k, v in self.variants.items()},
                "knee_rms_ratio_fest_over_ff": self.ratio("IDCLFQP_Fest", "IDCLFQP_Ff"),
                "knee_rms_ratio_plain_over_fest": self.ratio("IDCLFQP", "IDCLFQP_Fest")}

    @classmethod
    def from_dir(cls, directory):
        """Rebuild the report from the CSVs and run records written by ``compare``."""
        directory = Path(directory)
        summary = json.loads((directory / "summary.json").read_text())
        rep = cls(summary["scenario"])
        for name, rec in summary["variants"].items():
            log = SimLog.read_csv(directory / f"log_{name}.csv")
            rep.variants[name] = metrics_from_log(log, name, rec["status"], rec["message"],
                                                  rec["steps"])
        return rep


# -- running ------------------------------------------------------------------

def run_variant(scn, variant, state=None, max_ticks=None, **ctrl_overrides):
    cfg = replace(scn.controller, variant=variant, **ctrl_overrides)
    w = Walker(scn.model, scn.gait, cfg, scn.sim)
    return w.run(state, scn.sim.n_steps, max_ticks=max_ticks)


def _write_run(directory, name, log):
    directory.mkdir(parents=True, exist_ok=True)
    log.write_csv(directory / f"log_{name}.csv")


def run_comparison(scn, out=None):
    """Paired runs of every scenario variant from one start state and seed.

    Returns ``(report, logs)``. A failing variant is marked in the report and
    the others still run. With ``out`` set, per-tick CSVs and ``summary.json``
    are written there.
    """
    if scn.sim.n_steps == 0:
        raise ConfigError("scenario asks for zero steps")
    start = initial_state(scn.model, scn.gait, None, scn.sim)
    rep = ExperimentReport(scn.name)
    logs = {}
    for v in scn.variants:
        log = run_variant(scn, v, start)
        logs[v] = log
        rep.variants[v] = metrics_from_log(log, v, log.status, log.message, log.steps)
        if out is not None:
            _write_run(Path(out), v, log)
    if out is not None:
        write_summary(Path(out) / "summary.json", rep.to_dict())
    return rep, logs


def write_summary(path, d):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(d, indent=1, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


# -- CLF bound report ---------------------------------------------------------

@dataclass
class ClfReport:
    """Per-tick CLF rate against its bound on prosthesis-stance QP ticks."""

    t: np.ndarray
    vdot_numeric: np.ndarray
    vdot_model: np.ndarray
    vdot_optimizer: np.ndarray
    bound: np.ndarray
    smooth: np.ndarray
    optimizer_violations: int
    optimizer_max_excess: float
    numeric_violation_fraction: float
    fd_max_error: float
    slack_torque_rho: float
    slack_torque_fraction: float

    def summary(self):
        return {k: getattr(self, k) for k in
                ("optimizer_violations", "optimizer_max_excess", "numeric_violation_fraction",
                 "fd_max_error", "slack_torque_rho", "slack_torque_fraction")} | {
                    "ticks": int(self.t.size), "smooth_ticks": int(self.smooth.sum())}

    def write_csv(self, path):
        cols = np.column_stack([self.t, self.vdot_numeric, self.vdot_model, self.vdot_optimizer,
                                self.bound, self.smooth.astype(float)])
        np.savetxt(path, cols, delimiter=",", comments="",
                   header="t,vdot_numeric,vdot_model,vdot_optimizer,bound,smooth")


def clf_report(log, tol=1e-8, fd_tol=1e-3):
    """Compare the CLF rate with ``-(gamma/eps) V + delta`` tick by tick.

    ``vdot_numeric`` is the forward difference of the logged V over each hold
    interval. On smooth intervals (no domain change, tau and the normalized
    clock inside their open ranges at both ends) it is checked against Simpson's rule on the model rate at the start, middle and
    end of the interval. Optimizer violations use the QP's own accelerations.
    """
    t, V, dom, tau = log.col("t"), log.col("V"), log.col("domain"), log.col("tau")
    sig = log.col("sigma")
    lhs, bound = log.col("clf_lhs"), log.col("clf_bound")
    a, m, b = log.col("Vdot_model"), log.col("Vdot_mid"), log.col("Vdot_end")
    n = t.size
    num = np.full(n, np.nan)
    if n > 1:
        num[:-1] = np.diff(V) / np.diff(t)
    nxt = np.r_[dom[1:], np.nan] if n else dom
    tau1 = np.r_[tau[1:], np.nan] if n else tau
    sig1 = np.r_[sig[1:], np.nan] if n else sig
    keep = (dom == STANCE) & np.isfinite(lhs)
    # the references have kinks where tau or the normalized clock reach their clamps
    inside = (tau > 0) & (tau1 > 0) & (tau < 1) & (tau1 < 1) & (sig1 < 1)
    smooth = keep & (nxt == dom) & inside & np.isfinite(m) & np.isfinite(b) & np.isfinite(num)
    simpson = (a + 4 * m + b) / 6
    fd_err = np.abs(num - simpson)[smooth]
    excess = (lhs - bound)[keep]
    us = np.column_stack([log.col(c) for c in log.columns if c.startswith("u_p")])
    slack = (bound - a)[keep]
    mag = np.linalg.norm(us[keep], axis=1) if us.size else np.zeros(0)
    rho = frac = float("nan")
    if slack.size > 2:
        rho = float(stats.spearmanr(slack, mag)[0])
        hi = slack > 1.5 * np.median(slack)
        frac = float(np.mean(mag[hi] < np.median(mag))) if hi.any() else float("nan")
    sm = smooth[keep]
    viol = (num[keep] - bound[keep] > fd_tol) & sm
    return ClfReport(t[keep], num[keep], a[keep], lhs[keep], bound[keep], sm,
                     int(np.sum(excess > tol)), float(np.max(excess)) if excess.size else np.nan,
                     float(np.mean(viol[sm])) if sm.any() else float("nan"),
                     float(np.max(fd_err)) if fd_err.size else float("nan"), rho, frac)


# -- config validation --------------------------------------------------------

def config_kind(cfg):
    if "links" in cfg:
        return "model"
    if "domains" in cfg and "step_time" in cfg:
        return "gait"
    if "variants" in cfg or "sim" in cfg:
        return "scenario"
    return "controller"


def validate_config(path, kind=None):
    """Parse ``path`` as a model, gait, controller or scenario file; returns the kind."""
    path = Path(path)
    cfg = load_json(path)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    kind = kind or config_kind(cfg)
    if "schema_version" not in cfg:
        raise ConfigError(f"{path}: missing schema_version")
    if kind == "model":
        model_from_dict(cfg)
    elif kind == "gait":
        gait_from_dict(cfg)
    elif kind == "scenario":
        scenario_from_dict(cfg, path.parent)
    elif kind == "controller":
        controller_config_from_dict(cfg)
    else:
        raise ConfigError(f"unknown config kind {kind!r}")
    return kind


# -- command line -------------------------------------------------------------

def _scenario_from_args(args):
    scn = load_scenario(args.scenario)
    sim_kw = {}
    if args.dt is not None:
        sim_kw["dt"] = args.dt
    if args.rate is not None:
        sim_kw["control_rate"] = args.rate
    if args.steps is not None:
        sim_kw["n_steps"] = args.steps
    if args.seed is not None:
        sim_kw["seed"] = args.seed
    if sim_kw:
        try:
            scn.sim = replace(scn.sim, **sim_kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
    if getattr(args, "variant", None):
        if args.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {args.variant!r}")
        scn.variants = (args.variant,)
    return scn


def _status_code(status):
    if status == "ok":
        return EXIT_OK
    return EXIT_SOLVER if status == "solver" else EXIT_SIM


def _cmd_simulate(args):
    scn = _scenario_from_args(args)
    variant = args.variant or scn.controller.variant
    if scn.sim.n_steps == 0:
        raise ConfigError("zero-length run requested")
    out = output_dir(args.out)
    start = initial_state(scn.model, scn.gait, None, scn.sim)
    log = run_variant(scn, variant, start)
    _write_run(out, variant, log)
    met = metrics_from_log(log, variant, log.status, log.message, log.steps)
    rec = asdict(met)
    rec["stride_distances"] = stride_distances(log).tolist()
    write_summary(out / f"summary_{variant}.json", rec)
    print(f"{variant}: {log.status} after {log.steps} steps, knee RMS "
          f"{met.tracking_rms.get('pk', float('nan')):.3e} rad -> {out}")
    if log.message:
        print(f"  {log.message}", file=sys.stderr)
    return _status_code(log.status)


def _cmd_compare(args):
    scn = _scenario_from_args(args)
    out = output_dir(args.out)
    if scn.sim.n_steps == 0:
        write_summary(out / "summary.json", ExperimentReport(scn.name).to_dict())
        raise ConfigError("zero-length run requested; wrote an empty report")
    rep, _ = run_comparison(scn, out)
    for name, m in rep.variants.items():
        fe = "-" if m.force_error_pct is None else f"{max(m.force_error_pct):.2f}%"
        print(f"{name:14s} {m.status:8s} steps={m.steps:3d} knee_rms={m.tracking_rms['pk']:.3e} "
              f"force_err_max={fe} clf_viol={m.clf_violation_fraction:.3g}")
    d = rep.to_dict()
    print(f"Fest/Ff knee RMS ratio {d['knee_rms_ratio_fest_over_ff']:.3f}; "
          f"plain/Fest {d['knee_rms_ratio_plain_over_fest']:.3f}")
    return EXIT_OK


def _cmd_clf_report(args):
    log = SimLog.read_csv(args.log)
    rep = clf_report(log, fd_tol=args.fd_tol)
    out = output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.log).stem
    rep.write_csv(out / f"clf_{stem}.csv")
    write_summary(out / f"clf_{stem}.json", rep.summary())
    for k, v in rep.summary().items():
        print(f"{k}: {v}")
    return EXIT_OK


def _cmd_validate(args):
    code = EXIT_OK
    for p in args.files:
        try:
            kind = validate_config(p, args.kind)
            print(f"ok {kind} {p}")
        except ConfigError as exc:
            print(f"invalid {p}: {exc}", file=sys.stderr)
            code = EXIT_CONFIG
    return code


def _cmd_dump_qp(args):
    scn = _scenario_from_args(args)
    variant = args.variant or scn.controller.variant
    if variant not in QP_VARIANTS:
        raise ConfigError(f"{variant} does not solve a QP")
    out = output_dir(args.out)
    start = initial_state(scn.model, scn.gait, None, scn.sim)
    log = run_variant(scn, variant, start, max_ticks=args.ticks, dump_dir=str(out))
    print(f"wrote {len(list(out.glob('qp_*')))} QP dumps to {out}")
    return _status_code(log.status)


def build_parser():
    ap = argparse.ArgumentParser(prog="idclf", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p, variant=True):
        p.add_argument("--scenario", help="scenario JSON (default: bundled comparison)")
        p.add_argument("--dt", type=float, help="integrator step [s]")
        p.add_argument("--rate", type=float, help="control rate [Hz]")
        p.add_argument("--steps", type=int, help="domain transitions to walk")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output directory (env {OUTPUT_ENV})")
        if variant:
            p.add_argument("--variant", choices=VARIANTS)

    p = sub.add_parser("simulate", help="walk one controller variant")
    common(p)
    p.set_defaults(func=_cmd_simulate)
    p = sub.add_parser("compare", help="paired Ff / Fest / no-force comparison")
    common(p, variant=False)
    p.set_defaults(func=_cmd_compare)
    p = sub.add_parser("clf-report", help="CLF rate against its bound from a log CSV")
    p.add_argument("log")
    p.add_argument("--out")
    p.add_argument("--fd-tol", type=float, default=1e-3)
    p.set_defaults(func=_cmd_clf_report)
    p = sub.add_parser("validate-config", help="check model/gait/controller/scenario files")
    p.add_argument("files", nargs="+")
    p.add_argument("--kind", choices=("model", "gait", "controller", "scenario"))
    p.set_defaults(func=_cmd_validate)
    p = sub.add_parser("dump-qp", help="write the QPs of the first ticks as Matrix Market files")
    common(p)
    p.add_argument("--ticks", type=int, default=1)
    p.set_defaults(func=_cmd_dump_qp)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (SimulationError, IdclfError) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
