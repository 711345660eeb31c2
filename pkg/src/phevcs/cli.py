"""Command-line front end: validate / simulate / compare / design / batch.

Exit codes: 0 success, 1 validation or certificate failure, 2 solver
failure, 3 I/O error.
"""

import argparse
import json
import sys as _sys
import time
from pathlib import Path

import numpy as np

from . import control, evcs, switched
from .averaged import steady_state_from_theta
from .control import CertificateError, build_fixed_theta, build_ph_dae, build_ph_p, build_ph_pi
from .evcs import EvcsStateLayout as Layout
from .metrics import overshoot, settling_time, sup_distance
from .numerics import NumericalError, Trajectory, eigenvalues, integrate_ode
from .ph_core import ValidationError, validate
from .scenarios import Scenario, ScenarioError, load_scenario

SETTLING_BAND = 0.01      # default settling band: +-1% of the reference


# --------------------------------------------------------------------------
# scenario execution
# --------------------------------------------------------------------------

def build_setup(sc):
    """(params, system, equilibrium) the scenario resolves to."""
    p = sc.params()
    sys_, eq = evcs.solve_equilibrium(p, theta=np.asarray(sc.theta_bar))
    return p, sys_, eq


def build_closed_loop(sc, sys_, eq):
    if sc.controller == "fixed_theta":
        return build_fixed_theta(sys_, eq)
    if sc.controller == "ph_p":
        return build_ph_p(sys_, eq, sc.gamma)
    if sc.controller == "ph_dae":
        return build_ph_dae(sys_, eq, sc.gamma, sc.delta, delta_exponent=sc.delta_exponent)
    if sc.controller == "ph_pi":
        return build_ph_pi(sys_, eq, sc.gamma, sc.delta)
    if sc.controller == "bass":
        design = control.bass_design(sys_.d_matrix(eq.theta_bar), sys_.d_cal(eq.x_bar))
        return build_ph_p(sys_, eq, design.k_hat)
    return None       # cascaded_pi has no ClosedLoop form


def initial_plant_state(sc, sys_, eq):
    x0 = eq.x_bar.copy()
    for alias, amount in sc.initial_deviation:
        x0 += Layout.state_offset(alias, amount, sys_.H)
    return x0


def _disturbance_windows(sc, sys_):
    wins = []
    for d in sc.disturbances:
        i = Layout.index(d.quantity)
        factor = 2.0 if i == Layout.Q_BDC else 1.0
        wins.append((d.t0, d.t1, i, factor * d.value / sys_.H[i, i]))
    return sorted(wins)


def run_averaged(sc, p, sys_, eq, cl):
    """Averaged closed-loop run, segmented over disturbance windows."""
    wins = _disturbance_windows(sc, sys_)
    edges = sorted({0.0, sc.t_end, *(w[0] for w in wins), *(w[1] for w in wins)})
    dt_out = 1.0 / sc.sample_rate
    z = cl.initial_state(initial_plant_state(sc, sys_, eq))
    ts, zs = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        active = [(i, v) for (t0, t1, i, v) in wins if t0 <= a and b <= t1]
        if active:
            for i, v in active:
                z[i] = v

        def rhs(t, zz):
            dz = cl.rhs(zz, clamp=True)
            for i, _ in active:
                dz[i] = 0.0
            return dz

        t_eval = np.arange(a, b, dt_out)
        if t_eval.size == 0 or t_eval[-1] < b - 1e-12:
            t_eval = np.append(t_eval, b)
        traj = integrate_ode(rhs, z, (a, b), t_eval=t_eval)
        ts.append(traj.t if not ts else traj.t[1:])
        zs.append(traj.x if not zs else traj.x[1:])
        z = traj.x[-1].copy()
    t = np.concatenate(ts)
    Z = np.vstack(zs)
    theta = np.array([cl.theta_of(row) for row in Z])
    X = Z[:, :sys_.n]
    return Trajectory(t=t, x=X, meta={"theta": theta, "extended": Z,
                                      "variant": cl.variant})


def run_switched(sc, p, sys_, eq, cl):
    cfg = switched.PwmConfig(f_sw=sc.fsw, steps_per_period=sc.steps_per_period)
    if sc.controller == "cascaded_pi":
        ctrl = switched.SampledCascadedPi(sys_, eq, p)
    else:
        ctrl = switched.SampledPhController(cl, cfg.steps_per_period * cfg.dt)
    x0 = initial_plant_state(sc, sys_, eq)
    dist = _disturbance_windows(sc, sys_)
    traj = switched.simulate_switched(sys_, ctrl, x0, sc.t_end, cfg=cfg,
                                      disturbances=dist,
                                      sample_stride=sc.sample_stride)
    # align theta trace with the stored samples (one command per period)
    spp = cfg.steps_per_period // sc.sample_stride if sc.sample_stride else 1
    theta = np.repeat(traj.meta["theta_cmd"],
                      max(1, cfg.steps_per_period // max(1, sc.sample_stride)), axis=0)
    theta = np.vstack([theta[:1], theta])[: traj.x.shape[0]]
    traj.meta["theta"] = theta
    return traj


def run_scenario(sc):
    """Execute a validated scenario; returns (trajectory, context dict)."""
    sc.validate()
    p, sys_, eq = build_setup(sc)
    cl = build_closed_loop(sc, sys_, eq)
    t_start = time.perf_counter()
    if sc.model == "averaged":
        if cl is None:
            raise ScenarioError("cascaded_pi is only available for the switched model")
        traj = run_averaged(sc, p, sys_, eq, cl)
    else:
        traj = run_switched(sc, p, sys_, eq, cl)
    wall = time.perf_counter() - t_start
    refs = reference_values(sys_, eq, p)
    ctx = {"params": p, "system": sys_, "eq": eq, "closed_loop": cl,
           "wall_s": wall, "refs": refs}
    return traj, ctx


def reference_values(sys_, eq, p):
    g = sys_.H @ eq.x_bar
    refs = {}
    for i, name in enumerate(Layout.alias_names):
        refs[name] = float(g[i] / (2.0 if i == Layout.Q_BDC else 1.0))
    refs["i_bat"] = float((refs["v_bat"] - p.v_ev) * p.r_bat_inv)
    for j, name in enumerate(Layout.theta_names):
        refs[name] = float(eq.theta_bar[j])
    return refs


def resolve_outputs(sc, traj, sys_, p):
    cols = {}
    theta = traj.meta.get("theta")
    for name in sc.outputs:
        cols[name] = Layout.resolve(name, traj.x, sys_.H, params=p, theta=theta)
    return cols


# --------------------------------------------------------------------------
# CSV + run records
# --------------------------------------------------------------------------

def format_value(v):
    return f"{v:.12g}"


def write_csv(path, t, cols):
    header = ["time_s"] + [f"{name}_{Layout.unit(name)}" for name in cols]
    lines = [",".join(header)]
    arrays = [np.asarray(t)] + [np.asarray(c) for c in cols.values()]
    for i in range(len(t)):
        lines.append(",".join(format_value(a[i]) for a in arrays))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path):
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return header, data


def csv_roundtrip_text(path):
    """Re-emit a CSV from its parsed values (byte-identical for our files)."""
    header, data = read_csv(path)
    lines = [",".join(header)]
    for row in data:
        lines.append(",".join(format_value(v) for v in row))
    return "\n".join(lines) + "\n"


def write_run_record(path, sc, ctx, csv_path):
    cl = ctx["closed_loop"]
    record = {
        "scenario_hash": sc.hash(),
        "scenario": sc.canonical(),
        "csv": str(csv_path),
        "wall_s": ctx["wall_s"],
        "certificates": {
            "equilibrium_residual": ctx["eq"].residual,
            "closed_loop_max_re": (float(cl.spectrum.max_real_part)
                                   if cl is not None else None),
        },
        "references": ctx["refs"],
    }
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
    return record


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_validate(args):
    sc = load_scenario(args.scenario)
    p, sys_, eq = build_setup(sc)
    rng = np.random.default_rng(0)
    lo = np.array([b[0] for b in sys_.param_bounds])
    hi = np.array([b[1] for b in sys_.param_bounds])
    report_ok = True
    for _ in range(50):
        theta = lo + (hi - lo) * rng.random(sys_.k)
        rep = validate(sys_.at_theta(theta), [eq.x_bar * (1 + 0.3 * rng.standard_normal(sys_.n))
                                              for _ in range(4)])
        report_ok &= bool(rep)
    print(f"scenario {sc.hash()}  model={sc.model} controller={sc.controller}")
    print(f"structural validation at random states/parameters: {'PASS' if report_ok else 'FAIL'}")
    print(f"equilibrium residual: {eq.residual:.3e}")
    g = sys_.H @ eq.x_bar
    for i, name in enumerate(Layout.alias_names):
        val = g[i] / (2.0 if i == Layout.Q_BDC else 1.0)
        print(f"  {name:>6s} = {val:12.4f} {Layout.alias_units[i]}")
    if sc.controller == "cascaded_pi":
        from .numerics import finite_diff_jacobian
        rhs = evcs.cascaded_pi_rhs(sys_, eq, p)
        z0 = np.concatenate([eq.x_bar, evcs.cascaded_pi_fixed_point(sys_, eq, p).xi])
        spec = eigenvalues(finite_diff_jacobian(rhs, z0))
    else:
        cl = build_closed_loop(sc, sys_, eq)
        spec = cl.spectrum
    print("closed-loop spectrum (real parts):")
    for lam in sorted(spec.values, key=lambda v: -v.real):
        print(f"  {lam.real:14.6g} {'+' if lam.imag >= 0 else '-'} {abs(lam.imag):.6g}j")
    if not report_ok or spec.max_real_part >= 0:
        raise CertificateError(f"validation failed (max Re = {spec.max_real_part:.3e})")
    print(f"max real part: {spec.max_real_part:.6g}  -> Hurwitz")
    return 0


def cmd_simulate(args):
    sc = load_scenario(args.scenario)
    if args.fsw is not None:
        from dataclasses import replace as dc_replace
        sc = dc_replace(sc, fsw=float(args.fsw))
    if args.format != "csv":
        raise ScenarioError(f"unsupported output format {args.format!r}")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.scenario).stem

    traj, ctx = run_scenario(sc)
    if args.seedless:
        traj2, _ = run_scenario(sc)
        if not (np.array_equal(traj.t, traj2.t) and np.array_equal(traj.x, traj2.x)):
            raise NumericalError("determinism check failed: repeated run differs")
    cols = resolve_outputs(sc, traj, ctx["system"], ctx["params"])
    csv_path = outdir / f"{stem}.csv"
    write_csv(csv_path, traj.t, cols)
    record_path = outdir / f"{stem}.runrecord.json"
    write_run_record(record_path, sc, ctx, csv_path)
    print(f"wrote {csv_path} ({traj.t.size} samples) and {record_path}")
    print(f"wall time: {ctx['wall_s']:.2f} s")
    return 0


def _load_run(path):
    header, data = read_csv(path)
    record_path = Path(path).with_suffix("").with_suffix("")  # strip .csv
    record_path = Path(str(path).replace(".csv", ".runrecord.json"))
    refs = None
    if record_path.exists():
        refs = json.loads(record_path.read_text())["references"]
    names = [h.rsplit("_", 1)[0] for h in header]
    return names, data, refs


def cmd_compare(args):
    names_a, data_a, refs_a = _load_run(args.run_a)
    names_b, data_b, refs_b = _load_run(args.run_b)
    q = args.quantity
    for names, which in ((names_a, args.run_a), (names_b, args.run_b)):
        if q not in names:
            raise ScenarioError(f"quantity {q!r} not in {which}; columns: {names[1:]}")
    ia, ib = names_a.index(q), names_b.index(q)
    ta, ya = data_a[:, 0], data_a[:, ia]
    tb, yb = data_b[:, 0], data_b[:, ib]
    if args.metric == "supdist":
        val = sup_distance(ta, ya, tb, yb)
        print(f"supdist[{q}] = {val:.6g}")
    else:
        if refs_a is None or refs_b is None:
            raise ScenarioError("settling/overshoot need run records next to the CSVs")
        ref_a, ref_b = refs_a[q], refs_b[q]
        if args.metric == "settling":
            va = settling_time(ta, ya, ref_a, band_frac=args.band)
            vb = settling_time(tb, yb, ref_b, band_frac=args.band)
        else:
            va, vb = overshoot(ya, ref_a), overshoot(yb, ref_b)
        print(f"{args.metric}[{q}]: run_a = {va:.6g}, run_b = {vb:.6g}")
    return 0


def cmd_design(args):
    sc = load_scenario(args.scenario)
    _, sys_, eq = build_setup(sc)
    R_theta = sys_.R + sum(t * Rj for t, Rj in zip(eq.theta_bar, sys_.Rs))
    Dc = sys_.d_cal(eq.x_bar)
    rk = control.rank_condition(R_theta, Dc)
    print(f"rank condition rk[R(theta_bar), Dcal(x_bar)] = n: {rk}")
    spec = eigenvalues(sys_.d_matrix(eq.theta_bar))
    hurwitz = spec.max_real_part < 0
    print(f"D(theta_bar) Hurwitz: {hurwitz} (max Re = {spec.max_real_part:.6g})")
    if hurwitz:
        print("  -> any positive definite K_theta yields a Hurwitz closed loop")
    if not (rk or hurwitz):
        raise CertificateError("neither the rank condition nor D(theta_bar) Hurwitz holds")
    if args.bass:
        design = control.bass_design(sys_.d_matrix(eq.theta_bar), Dc)
        print(f"Bass alpha = {design.alpha:.6g}, Lyapunov residual = "
              f"{design.lyapunov_residual:.3e}")
        print("K_hat_theta =")
        for row in design.k_hat:
            print("  " + " ".join(f"{v:12.5g}" for v in row))
        print(f"Bass certificate max Re = {design.closed_loop_spectrum.max_real_part:.6g}")
    for gamma, delta in ((sc.gamma, sc.delta),):
        for name, builder in (("ph_p", lambda: build_ph_p(sys_, eq, gamma)),
                              ("ph_dae", lambda: build_ph_dae(sys_, eq, gamma, delta)),
                              ("ph_pi", lambda: build_ph_pi(sys_, eq, gamma, delta))):
            cl = builder()
            print(f"{name} (gamma={gamma:g}, delta={delta:g}): "
                  f"max Re = {cl.spectrum.max_real_part:.6g}")
    return 0


def run_scenario_file(path, outdir):
    """Worker for batch mode (module-level so it pickles)."""
    ns = argparse.Namespace(scenario=path, out=outdir, fsw=None, format="csv",
                            seedless=False)
    return cmd_simulate(ns)


def cmd_batch(args):
    paths = sorted(str(p) for p in Path(args.scenarios).glob("*.ini"))
    if not paths:
        raise ScenarioError(f"no *.ini scenarios under {args.scenarios}")
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            list(ex.map(run_scenario_file, paths, [args.out] * len(paths)))
    else:
        for p in paths:
            run_scenario_file(p, args.out)
    print(f"batch finished: {len(paths)} scenario(s)")
    return 0


def make_parser():
    ap = argparse.ArgumentParser(prog="phevcs",
                                 description="Averaged pH EV charging station toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="build the model and print certificates")
    p.add_argument("--scenario", required=True)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("simulate", help="run a scenario and write CSV output")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--fsw", type=float, default=None, help="override switching frequency")
    p.add_argument("--format", default="csv")
    p.add_argument("--seedless", action="store_true",
                   help="assert determinism by running twice")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("compare", help="settling/overshoot/supdist between two runs")
    p.add_argument("--run-a", required=True)
    p.add_argument("--run-b", required=True)
    p.add_argument("--quantity", required=True)
    p.add_argument("--metric", choices=("settling", "overshoot", "supdist"),
                   default="supdist")
    p.add_argument("--band", type=float, default=SETTLING_BAND)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("design", help="rank condition, Hurwitz report, Bass gain")
    p.add_argument("--scenario", required=True)
    p.add_argument("--bass", action="store_true")
    p.set_defaults(fn=cmd_design)

    p = sub.add_parser("batch", help="run every scenario in a directory")
    p.add_argument("--scenarios", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_batch)
    return ap


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ScenarioError, ValidationError, CertificateError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"solver failure: {exc}", file=_sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=_sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
