"""Command-line interface: tree, drive, wedge, hull, verify, superprocess, report.

Exit codes: 0 success/pass, 1 verification failure, 2 usage error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import sys
import time

import numpy as np

from . import driver, genealogy, hulls, loewner, manifest, superproc, svgout, wedge


class NumericalFailure(RuntimeError):
    pass


def _json_print(doc, out=None):
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if out:
        with open(out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _ensure_dir(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# subcommands

def cmd_tree(args) -> int:
    if args.conditioned_n is not None:
        tree = genealogy.sample_conditioned_tree(args.conditioned_n, args.rate, args.seed)
        genealogy.save_forest(tree, _ensure_dir(args.out))
    else:
        forest = genealogy.sample_gw_forest(
            args.initial, args.rate, args.seed, t_max=args.t_max,
            max_vertices=args.max_vertices,
        )
        genealogy.save_forest(forest, _ensure_dir(args.out))
    print(f"wrote {args.out}")
    return 0


def _load_angles(path):
    with open(path) as f:
        doc = json.load(f)
    return {(int(k.split(":")[0]), int(k.split(":")[1])): float(v)
            for k, v in doc.items()}


def cmd_drive(args) -> int:
    forest = genealogy.load_forest(args.tree)
    if args.angles:
        sched = driver.angle_schedule(forest, _load_angles(args.angles))
    elif args.angles_const is not None:
        sched = driver.angle_schedule(forest, args.angles_const)
    else:
        sched = driver.AlphaSchedule.constant(args.alpha_const)
    x0 = np.asarray([float(v) for v in args.x0.split(",")]) if args.x0 else \
        np.zeros(len(forest.trees))
    if args.mode == "coulomb" or args.beta == math.inf:
        path = driver.coulomb_flow(
            forest, sched, x0, args.dt, t_max=args.t_max,
            mass_per_atom=args.mass, record_dt=args.record_dt,
        )
    else:
        path = driver.dyson_flow(
            forest, sched, args.beta, x0, args.dt, args.seed,
            t_max=args.t_max, mass_per_atom=args.mass, record_dt=args.record_dt,
        )
    _ensure_dir(args.out + ".csv")
    csv_name, json_name = driver.save_path_csv(path, args.out)
    print(f"wrote {csv_name} and {json_name}")
    return 0


def cmd_wedge(args) -> int:
    spec = wedge.wedge_spec(args.theta1, args.theta2)
    doc = spec.as_dict()
    if args.json:
        _json_print(doc, args.out)
    else:
        for k, v in doc.items():
            print(f"{k} = {v}")
    return 0


def cmd_hull(args) -> int:
    path = driver.load_path_csv(args.path)
    cfg = loewner.SolverConfig(dt=args.dt, eps=args.eps, max_points=args.max_points)
    hull = hulls.trace_hull(path, cfg)
    out_csv = _ensure_dir(args.out + ".hull.csv")
    with open(out_csv, "w") as f:
        f.write("t,vertex_id,re,im\n")
        for v, c in sorted(hull.curves.items()):
            for t, p in zip(c.times, c.points):
                f.write(f"{t:.17g},{v[0]}:{v[1]},{p.real:.17g},{p.imag:.17g}\n")
    out_svg = args.out + ".svg"
    svgout.save_svg(hull, out_svg)
    print(f"wrote {out_csv} and {out_svg}")
    return 0


def _verify_angles(args) -> int:
    alpha = args.alpha
    target = math.pi / (alpha + 2.0)
    c = math.sqrt(alpha)
    angles = hulls.measure_wedge_angles(
        -c, c, mass=loewner.EMBEDDING_ATOM_MASS, dt=args.dt, eps=args.eps,
    )
    measured = angles[0]
    ok = abs(measured - target) <= args.tol and abs(angles[1] - (math.pi - target)) <= args.tol
    print(f"alpha={alpha}: measured theta = {measured:.6f}, target pi/(alpha+2) = {target:.6f}, "
          f"|error| = {abs(measured-target):.2e} (tolerance {args.tol})")
    return 0 if ok else 1


def _verify_embedding(args) -> int:
    path = driver.load_path_csv(args.path)
    cfg = loewner.SolverConfig(dt=args.dt, eps=args.eps, max_points=args.max_points)
    hull = hulls.trace_hull(path, cfg)
    rep = hulls.verify_embedding(None, hull)
    _json_print(rep.as_dict(), args.out)
    return 0 if rep.passed else 1


def _verify_capacity(args) -> int:
    path = driver.load_path_csv(args.path)
    cfg = loewner.SolverConfig(dt=args.dt)
    ts = np.linspace(path.t_end / 8, path.t_end, 8)
    worst = 0.0
    for t in ts:
        b = loewner.hcap(path, float(t), cfg)
        oracle = loewner.capacity_oracle(path, float(t))
        worst = max(worst, abs(b - oracle) / (1 + abs(b)))
    ok = worst <= args.tol
    print(f"capacity identity: worst relative deviation {worst:.2e} (tolerance {args.tol})")
    return 0 if ok else 1


def _verify_growth(args) -> int:
    path = driver.load_path_csv(args.path)
    rep = hulls.local_growth_check(path, args.t if args.t else path.t_end)
    _json_print(rep.as_dict(), args.out)
    return 0 if rep.passed else 1


def _verify_psi(args) -> int:
    rep = hulls.psi_calibration_report(args.theta1, args.theta2, dt=args.dt, eps=args.eps)
    _json_print(rep, args.out)
    return 0


def cmd_verify(args) -> int:
    return {
        "angles": _verify_angles,
        "embedding": _verify_embedding,
        "capacity": _verify_capacity,
        "growth": _verify_growth,
        "psi": _verify_psi,
    }[args.check](args)


def cmd_superprocess(args) -> int:
    if args.action == "mc":
        phis = []
        for spec in args.phi:
            phis.extend(superproc.TestFunction.parse(spec))
        cfg = superproc.MCConfig(
            n=args.n, replicas=args.replicas,
            t_list=tuple(float(v) for v in args.t.split(",")),
            phi_list=tuple(phis),
            beta=math.inf if args.beta == "inf" else float(args.beta),
            seed=args.seed, conditioned=args.conditioned,
            eps_prime=args.eps_prime, jobs=args.jobs,
            dt_max=args.dt, record_dt=args.record_dt,
        )
        t0 = time.time()
        rep = superproc.mc_martingale_test(cfg)
        doc = rep.as_dict()
        doc["wall_clock_omitted"] = True
        if args.out:
            _ensure_dir(args.out + ".report.json")
            _json_print(doc, args.out + ".report.json")
            manifest.write_manifest(
                os.path.dirname(os.path.abspath(args.out)) or ".",
                command="superprocess mc", config=doc["config"], seed=args.seed,
                outputs=[args.out + ".report.json"],
                wall_clock=(time.time() - t0) if args.timing else None,
            )
        else:
            _json_print(doc)
        return 0 if rep.passed else 1
    if args.action == "offspring":
        rep = superproc.offspring_frequency_test(args.n, args.replicas, args.seed)
        if args.out:
            _json_print(rep, args.out + ".offspring.json")
        else:
            print(json.dumps({k: v for k, v in rep.items() if k != "rows"}, indent=1))
        return 0 if rep["passed"] else 1
    if args.action == "supmass":
        sups = superproc.sup_mass_mc(args.n, args.replicas, args.seed)
        rep = superproc.sup_mass_test(sups, n=args.n, threshold=args.threshold)
        _json_print(rep.as_dict(), (args.out + ".supmass.json") if args.out else None)
        return 0 if rep.passed_quoted else 1
    raise NumericalFailure(f"unknown superprocess action {args.action}")


# ---------------------------------------------------------------------------
# pipeline runner (the `report` subcommand)

_SCHEMA = {
    "tree": {"initial", "rate", "seed", "conditioned_n", "t_max", "max_vertices"},
    "driver": {"mode", "alpha_const", "angles_const", "beta", "dt", "seed",
               "mass", "x0", "record_dt"},
    "loewner": {"dt", "eps", "max_points"},
    "superprocess": {"n", "replicas", "beta", "phi", "t", "seed", "conditioned",
                     "eps_prime", "jobs"},
    "output": {"dir", "svg", "timing"},
}


def run_pipeline(config_path: str) -> int:
    """Execute the staged pipeline described by a flat INI config."""
    cp = configparser.ConfigParser()
    read = cp.read(config_path)
    if not read or not cp.sections():
        print("usage: empty or unreadable config; sections: "
              + ", ".join(_SCHEMA), file=sys.stderr)
        return 2
    errors = []
    for sec in cp.sections():
        if sec not in _SCHEMA:
            errors.append(f"unknown section [{sec}]")
            continue
        for key in cp[sec]:
            if key not in _SCHEMA[sec]:
                errors.append(f"unknown key {key!r} in section [{sec}]")
    if errors:
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    if "output" not in cp or "dir" not in cp["output"]:
        print("config error: [output] dir is required", file=sys.stderr)
        return 2
    out_dir = cp["output"]["dir"]
    os.makedirs(out_dir, exist_ok=True)
    t_start = time.time()
    outputs = []
    config_echo = {s: dict(cp[s]) for s in cp.sections()}
    seed = cp.getint("tree", "seed", fallback=cp.getint("superprocess", "seed", fallback=0))
    steps = {}

    try:
        tree_file = None
        if "tree" in cp:
            sec = cp["tree"]
            tree_file = os.path.join(out_dir, "tree.json")
            if sec.get("conditioned_n"):
                t = genealogy.sample_conditioned_tree(
                    sec.getint("conditioned_n"), sec.getfloat("rate", 1.0),
                    sec.getint("seed", 0))
                genealogy.save_forest(t, tree_file)
                steps["tree_vertices"] = t.n_vertices
            else:
                f = genealogy.sample_gw_forest(
                    sec.getint("initial", 1), sec.getfloat("rate", 1.0),
                    sec.getint("seed", 0),
                    t_max=sec.getfloat("t_max", fallback=None),
                    max_vertices=sec.getint("max_vertices",
                                            genealogy.DEFAULT_MAX_VERTICES))
                genealogy.save_forest(f, tree_file)
                steps["tree_vertices"] = sum(t.n_vertices for t in f.trees)
            outputs.append(tree_file)

        path_prefix = None
        if "driver" in cp:
            if tree_file is None:
                print("pipeline error: [driver] requires [tree]", file=sys.stderr)
                return 2
            sec = cp["driver"]
            forest = genealogy.load_forest(tree_file)
            if sec.get("angles_const"):
                sched = driver.angle_schedule(forest, sec.getfloat("angles_const"))
            else:
                sched = driver.AlphaSchedule.constant(sec.getfloat("alpha_const", 1.0))
            x0 = (np.asarray([float(v) for v in sec.get("x0").split(",")])
                  if sec.get("x0") else np.zeros(len(forest.trees)))
            beta = sec.get("beta", "inf")
            beta = math.inf if beta == "inf" else float(beta)
            mode = sec.get("mode", "coulomb")
            if mode == "coulomb" or beta == math.inf:
                path = driver.coulomb_flow(
                    forest, sched, x0, sec.getfloat("dt", 1e-3),
                    mass_per_atom=sec.getfloat("mass", loewner.EMBEDDING_ATOM_MASS))
            else:
                path = driver.dyson_flow(
                    forest, sched, beta, x0, sec.getfloat("dt", 1e-3),
                    sec.getint("seed", 0),
                    mass_per_atom=sec.getfloat("mass", loewner.EMBEDDING_ATOM_MASS))
            path_prefix = os.path.join(out_dir, "path")
            csv_name, json_name = driver.save_path_csv(path, path_prefix)
            outputs += [csv_name, json_name]
            steps["drive_segments"] = len(path.segments)

        if "loewner" in cp:
            if path_prefix is None:
                print("pipeline error: [loewner] requires [driver]", file=sys.stderr)
                return 2
            sec = cp["loewner"]
            path = driver.load_path_csv(path_prefix)
            cfg = loewner.SolverConfig(
                dt=sec.getfloat("dt", 1e-3),
                eps=sec.getfloat("eps", fallback=None),
                max_points=sec.getint("max_points", 200))
            hull = hulls.trace_hull(path, cfg)
            hull_csv = os.path.join(out_dir, "hull.csv")
            with open(hull_csv, "w") as f:
                f.write("t,vertex_id,re,im\n")
                for v, c in sorted(hull.curves.items()):
                    for tt, p in zip(c.times, c.points):
                        f.write(f"{tt:.17g},{v[0]}:{v[1]},{p.real:.17g},{p.imag:.17g}\n")
            outputs.append(hull_csv)
            if cp.getboolean("output", "svg", fallback=True):
                svg_name = os.path.join(out_dir, "hull.svg")
                svgout.save_svg(hull, svg_name)
                outputs.append(svg_name)
            rep = hulls.verify_embedding(None, hull)
            rep_name = os.path.join(out_dir, "embedding.json")
            _json_print(rep.as_dict(), rep_name)
            outputs.append(rep_name)
            steps["hull_curves"] = len(hull.curves)

        if "superprocess" in cp:
            sec = cp["superprocess"]
            phis = []
            for spec in sec.get("phi", "bump:0,1").split():
                phis.extend(superproc.TestFunction.parse(spec))
            cfg = superproc.MCConfig(
                n=sec.getint("n"), replicas=sec.getint("replicas"),
                t_list=tuple(float(v) for v in sec.get("t", "0.25,0.5").split(",")),
                phi_list=tuple(phis),
                beta=math.inf if sec.get("beta", "inf") == "inf" else sec.getfloat("beta"),
                seed=sec.getint("seed", 0),
                conditioned=sec.getboolean("conditioned", False),
                eps_prime=sec.getfloat("eps_prime", 0.05),
                jobs=sec.getint("jobs", 1))
            rep = superproc.mc_martingale_test(cfg)
            rep_name = os.path.join(out_dir, "superprocess.json")
            _json_print(rep.as_dict(), rep_name)
            outputs.append(rep_name)
            if not rep.passed:
                manifest.write_manifest(out_dir, command="report run",
                                        config=config_echo, seed=seed,
                                        outputs=outputs, step_counts=steps)
                return 1
    except (driver.OrderingError, ArithmeticError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3

    manifest.write_manifest(
        out_dir, command="report run", config=config_echo, seed=seed,
        outputs=outputs, step_counts=steps,
        wall_clock=(time.time() - t_start)
        if cp.getboolean("output", "timing", fallback=False) else None,
    )
    return 0


def cmd_report(args) -> int:
    if args.action == "run":
        return run_pipeline(args.config)
    if args.action == "svg":
        path = driver.load_path_csv(args.path)
        cfg = loewner.SolverConfig(dt=args.dt, eps=args.eps, max_points=args.max_points)
        hull = hulls.trace_hull(path, cfg)
        svgout.save_svg(hull, _ensure_dir(args.out))
        print(f"wrote {args.out}")
        return 0
    if args.action == "manifest":
        bad = manifest.verify_manifest(args.dir)
        if bad:
            print("digest mismatches: " + ", ".join(bad))
            return 1
        print("manifest ok")
        return 0
    return 2


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="loewnertree",
        description="Branching Loewner evolutions: genealogies, particle drivers, "
                    "tree-shaped hulls, and superprocess-limit checks.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    pt = sub.add_parser("tree", help="sample genealogies")
    pts = pt.add_subparsers(dest="action", required=True)
    ps = pts.add_parser("sample")
    ps.add_argument("--initial", type=int, default=1)
    ps.add_argument("--rate", type=float, default=1.0)
    ps.add_argument("--seed", type=int, required=True)
    ps.add_argument("--conditioned-n", type=int, default=None)
    ps.add_argument("--t-max", type=float, default=None)
    ps.add_argument("--max-vertices", type=int, default=genealogy.DEFAULT_MAX_VERTICES)
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_tree)

    pd = sub.add_parser("drive", help="evolve driving-measure atoms")
    pd.add_argument("--tree", required=True)
    pd.add_argument("--mode", choices=("coulomb", "dyson"), default="coulomb")
    pd.add_argument("--alpha-const", type=float, default=1.0)
    pd.add_argument("--angles", default=None, help="JSON {'tree:vertex': theta}")
    pd.add_argument("--angles-const", type=float, default=None)
    pd.add_argument("--beta", type=lambda s: math.inf if s == "inf" else float(s),
                    default=math.inf)
    pd.add_argument("--dt", type=float, default=1e-3)
    pd.add_argument("--seed", type=int, default=0)
    pd.add_argument("--mass", type=float, default=loewner.EMBEDDING_ATOM_MASS)
    pd.add_argument("--x0", default=None, help="comma-separated initial positions")
    pd.add_argument("--t-max", type=float, default=None)
    pd.add_argument("--record-dt", type=float, default=None)
    pd.add_argument("--out", required=True)
    pd.set_defaults(func=cmd_drive)

    pw = sub.add_parser("wedge", help="closed-form two-slit driving data")
    pws = pw.add_subparsers(dest="action", required=True)
    pc = pws.add_parser("constants")
    pc.add_argument("--theta1", type=float, required=True)
    pc.add_argument("--theta2", type=float, required=True)
    pc.add_argument("--json", action="store_true")
    pc.add_argument("--out", default=None)
    pc.set_defaults(func=cmd_wedge)

    ph = sub.add_parser("hull", help="trace hulls from a driving path")
    phs = ph.add_subparsers(dest="action", required=True)
    pht = phs.add_parser("trace")
    pht.add_argument("--path", required=True)
    pht.add_argument("--dt", type=float, default=1e-3)
    pht.add_argument("--eps", type=float, default=None)
    pht.add_argument("--max-points", type=int, default=200)
    pht.add_argument("--out", required=True)
    pht.set_defaults(func=cmd_hull)

    pv = sub.add_parser("verify", help="geometric and statistical checks")
    pv.add_argument("check", choices=("angles", "embedding", "capacity", "growth", "psi"))
    pv.add_argument("--alpha", type=float, default=1.0)
    pv.add_argument("--theta1", type=float, default=math.pi / 4)
    pv.add_argument("--theta2", type=float, default=3 * math.pi / 4)
    pv.add_argument("--path", default=None)
    pv.add_argument("--t", type=float, default=None)
    pv.add_argument("--dt", type=float, default=1e-3)
    pv.add_argument("--eps", type=float, default=1e-3)
    pv.add_argument("--max-points", type=int, default=150)
    pv.add_argument("--tol", type=float, default=0.02)
    pv.add_argument("--out", default=None)
    pv.set_defaults(func=cmd_verify)

    pm = sub.add_parser("superprocess", help="Monte Carlo scaling-limit checks")
    pm.add_argument("action", choices=("mc", "offspring", "supmass"))
    pm.add_argument("--n", type=int, required=True)
    pm.add_argument("--replicas", type=int, required=True)
    pm.add_argument("--beta", default="inf")
    pm.add_argument("--phi", nargs="*", default=["bump:0,1"])
    pm.add_argument("--t", default="0.25,0.5")
    pm.add_argument("--seed", type=int, required=True)
    pm.add_argument("--conditioned", action="store_true")
    pm.add_argument("--eps-prime", type=float, default=0.05)
    pm.add_argument("--jobs", type=int, default=1)
    pm.add_argument("--dt", type=float, default=None)
    pm.add_argument("--record-dt", type=float, default=None)
    pm.add_argument("--threshold", type=float, default=0.08)
    pm.add_argument("--timing", action="store_true")
    pm.add_argument("--out", default=None)
    pm.set_defaults(func=cmd_superprocess)

    pr = sub.add_parser("report", help="pipeline runs, SVG rendering, manifests")
    pr.add_argument("action", choices=("run", "svg", "manifest"))
    pr.add_argument("--config", default=None)
    pr.add_argument("--path", default=None)
    pr.add_argument("--dir", default=None)
    pr.add_argument("--dt", type=float, default=1e-3)
    pr.add_argument("--eps", type=float, default=None)
    pr.add_argument("--max-points", type=int, default=200)
    pr.add_argument("--out", default=None)
    pr.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (driver.OrderingError, ArithmeticError, NumericalFailure) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
