"""Command line front end: ``kserver-lab <subcommand>``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import allocation as alloc
from . import composer as comp
from . import harness, hst, metric, oracle, rounding


def _out(args, name: str) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(harness.CSV_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([harness._fmt(v) for v in row])


def _read_csv(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _load_json(path):
    return json.loads(Path(path).read_text())


def cmd_embed(args) -> int:
    m = metric.load_metric(args.metric)
    rng = np.random.default_rng(args.seed)
    sigma = metric.as_fraction(args.sigma)
    tree = hst.sample_frt_embedding(m, sigma, rng)
    path = Path(args.out) if args.out else _out(args, "tree.json")
    hst.save_tree(tree, path)
    result = {"tree": str(path), "depth": tree.depth, "leaves": len(tree.leaf_labels)}
    if args.weighted:
        wt = hst.contract_to_weighted(tree)
        wpath = path.with_name(path.stem + "-weighted.json")
        hst.save_tree(wt, wpath)
        result.update(weighted=str(wpath), weighted_depth=wt.depth)
    if args.samples:
        aud = hst.audit_frt(m, sigma, np.random.default_rng(args.seed + 1), args.samples)
        result.update(dominated=aud.dominated, mean_distortion=aud.mean_distortion,
                      max_pair_mean=aud.max_pair_mean, bound=float(aud.bound))
        if args.strict and not aud.dominated:
            print(json.dumps(result, sort_keys=True))
            return 1
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_simulate_allocation(args) -> int:
    inst = alloc.load_instance(args.instance)
    run = alloc.run_allocation(inst, eps=args.eps)
    rows = []
    for t, (st, c) in enumerate(zip(inst.steps, run.costs), start=1):
        y = run.states[t].y
        rows.append([t, st.location, st.kappa, c.hit, c.movement, c.fix_movement, c.movement_abs,
                     c.event_count, " ".join(format(v, ".12g") for v in y.ravel())])
    trace = Path(args.trace) if args.trace else _out(args, "allocation.csv")
    _write_csv(trace, ["t", "location", "kappa", "hit", "movement", "fix_movement",
                       "movement_abs", "events", "y"], rows)
    summary = {"trace": str(trace), **run.totals(), "invariants": run.diag.violations()}
    bad = len(summary["invariants"])
    try:
        opt = oracle.brute_force_allocation_opt(inst)
    except oracle.StateSpaceTooLarge:
        opt = None
    if opt is not None:
        rep = alloc.check_step_inequalities(run, opt, tol=args.tol)
        th = alloc.cost_bound_report(run, opt)
        summary.update(opt=opt.cost, min_slack=rep.min_slack, inequality_violations=rep.violations,
                       end_to_end_ok=th.ok(args.tol))
        bad += len(rep.violations) + (0 if th.ok(args.tol) else 1)
    print(json.dumps(summary, sort_keys=True, default=str))
    return 1 if (args.strict and bad) else 0


def cmd_simulate_kserver(args) -> int:
    tree = hst.load_tree(args.tree)
    reqs = [int(v) for v in _load_json(args.requests)]
    labels = sorted(tree.leaf_labels)
    start = [int(v) for v in _load_json(args.start)] if args.start else labels[:args.k]
    st = comp.init_ensembles(tree, args.k, args.eps, start)
    zcols = [f"z_{q}" for q in labels]
    rows = []
    first = comp.fractional_state(st)
    x0 = comp.leaf_mass_vector(tree, first)
    rows.append([0, "", "x", 0.0, 0.0] + [x0[q] for q in labels])
    bad = 0
    for t, r in enumerate(reqs, start=1):
        frac, led = comp.step(st, r)
        for node, nl in sorted(led.nodes.items()):
            rows.append([t, r, node, nl.hit, nl.movement_abs] + [frac.z[q] for q in labels])
        x = comp.leaf_mass_vector(tree, frac)
        rows.append([t, r, "x", led.ensemble_hit, led.kserver_movement] + [x[q] for q in labels])
        if not comp.ensemble_weights_audit(st).ok(args.tol):
            bad += 1
    trace = Path(args.trace) if args.trace else _out(args, "kserver.csv")
    _write_csv(trace, ["t", "request", "node", "hit", "movement"] + zcols, rows)
    bad += len(st.diag.violations())
    print(json.dumps({"trace": str(trace), "steps": len(reqs), "violations": bad}, sort_keys=True))
    return 1 if (args.strict and bad) else 0


def cmd_round(args) -> int:
    tree = hst.load_tree(args.tree)
    rows = [r for r in _read_csv(args.fractional_trace) if r.get("node", "x") == "x"]
    labels = sorted(tree.leaf_labels)
    rng = np.random.default_rng(args.seed)
    states = []
    for r in rows:
        x = {q: float(r[f"z_{q}"]) for q in labels}
        pin = int(r["request"]) if r.get("request") not in (None, "") else None
        states.append((int(r["t"]), x, pin))
    k = round(sum(states[0][1].values()))
    d = None
    out_rows = []
    total = frac_total = Fraction(0)
    bad = 0
    for t, x, pin in states:
        xq = rounding.quantize_state(x, k, pin=pin)
        if d is None:
            d = rounding.init_distribution(tree, xq, k)
            cost = Fraction(0)
        else:
            d, cost, rs = rounding.round_step(d, xq)
            frac_total += rs.fractional_cost
            bad += rs.elementary.bound_violations
        total += cost
        if not (d.is_consistent() and d.is_balanced()):
            bad += 1
        sample = rounding.sample_configuration(d, rng)
        for conf, m in d.support():
            out_rows.append([t, " ".join(map(str, conf)), str(m), float(cost),
                             int(conf == sample)])
    out = Path(args.out) if args.out else _out(args, "configs.csv")
    _write_csv(out, ["t", "config", "mass", "step_cost", "sampled"], out_rows)
    print(json.dumps({"out": str(out), "rounding_cost": float(total),
                      "fractional_cost": float(frac_total), "violations": bad}, sort_keys=True))
    return 1 if (args.strict and bad) else 0


def cmd_oracle(args) -> int:
    tree = hst.load_tree(args.tree)
    reqs = [int(v) for v in _load_json(args.requests)]
    rows = []
    if args.quota:
        kappa = [int(v) for v in _load_json(args.quota)]
        header = ["node", "optcost"]
        for v in tree.preorder:
            c = oracle.optcost_varying(tree, v, kappa, reqs)
            rows.append([v, "inf" if oracle.is_inf(c) else str(c)])
    else:
        header = ["node", "j", "t", "optcost"]
        for v in tree.preorder:
            for j in range(args.k + 1):
                for t, c in enumerate(oracle.optcost_fixed(tree, v, j, reqs)):
                    rows.append([v, j, t, "inf" if oracle.is_inf(c) else str(c)])
    out = _out(args, "oracle.csv")
    _write_csv(out, header, rows)
    print(json.dumps({"out": str(out), "rows": len(rows)}))
    return 0


def cmd_gap_demo(args) -> int:
    inst = harness.gen_gap_instance(args.k, args.T)
    opt = oracle.brute_force_allocation_opt(inst)
    hit, move = harness.evaluate_fractional(inst, harness.gap_witness_exact(args.k))
    run = alloc.run_allocation(inst)
    rep = alloc.check_step_inequalities(run, opt, tol=args.tol)
    tot = run.totals()
    result = {"k": args.k, "T": args.T, "integral_opt": opt.cost, "witness_cost": str(hit + move),
              "online_hit": tot["hit"], "online_movement": tot["movement"],
              "inequality_violations": len(rep.violations)}
    print(json.dumps(result, sort_keys=True))
    return 1 if (args.strict and rep.violations) else 0


def load_config(path) -> harness.PipelineConfig:
    data = _load_json(path)
    m = None
    tree = None
    if "metric" in data:
        n, dist = int(data["metric"]["n"]), data["metric"]["dist"]
        if dist == "uniform":
            m = metric.uniform_metric(n)
        elif dist == "random":
            m = metric.random_metric(n, np.random.default_rng(int(data.get("seed", 0))))
        else:
            m = metric.build_metric(n, dist)
    elif "metric_file" in data:
        m = metric.load_metric(data["metric_file"])
    elif "tree_file" in data:
        tree = hst.load_tree(data["tree_file"])
    else:
        raise ValueError("config needs metric, metric_file or tree_file")
    return harness.PipelineConfig(
        k=int(data["k"]), T=int(data.get("T", 0)), seed=int(data.get("seed", 0)), metric=m,
        tree=tree, sigma=metric.as_fraction(data["sigma"]) if data.get("sigma") else None,
        eps=data.get("eps"), kind=data.get("kind", "random-leaf"),
        request_params=data.get("request_params", {}), requests=data.get("requests"),
        start=data.get("start"), samples=int(data.get("samples", 0)))


def cmd_report(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None and args.override_seed:
        cfg.seed = args.seed
    cfg.tol = args.tol
    rep = harness.run_pipeline(cfg)
    path, side = harness.emit_report(rep, _out(args, args.name + ".csv"))
    print(json.dumps({"csv": str(path), "json": str(side), "violations": rep.violation_count,
                      "ratios": rep.ratios}, sort_keys=True))
    return 1 if (args.strict and rep.violation_count) else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--tol", type=float, default=1e-6)
    common.add_argument("--strict", action="store_true", help="exit 1 on any invariant violation")
    common.add_argument("--out-dir", default=".")

    p = argparse.ArgumentParser(prog="kserver-lab", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("embed", parents=[common], help="sample a tree embedding of a metric")
    s.add_argument("--metric", required=True)
    s.add_argument("--sigma", default="16")
    s.add_argument("--samples", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--weighted", action="store_true", help="also write the contracted tree")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("simulate-allocation", parents=[common], help="run the allocation algorithm")
    s.add_argument("--instance", required=True)
    s.add_argument("--eps", type=float)
    s.add_argument("--trace")
    s.set_defaults(func=cmd_simulate_allocation)

    s = sub.add_parser("simulate-kserver", parents=[common], help="fractional k-server on a tree")
    s.add_argument("--tree", required=True)
    s.add_argument("--requests", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--eps", type=float)
    s.add_argument("--start")
    s.add_argument("--trace")
    s.set_defaults(func=cmd_simulate_kserver)

    s = sub.add_parser("round", parents=[common], help="round a fractional trace")
    s.add_argument("--tree", required=True)
    s.add_argument("--fractional-trace", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_round)

    s = sub.add_parser("oracle", parents=[common], help="offline optimum tables")
    s.add_argument("--tree", required=True)
    s.add_argument("--requests", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--quota")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("gap-demo", parents=[common], help="integral vs fractional allocation gap")
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--T", type=int, default=20)
    s.set_defaults(func=cmd_gap_demo)

    s = sub.add_parser("report", parents=[common], help="end-to-end pipeline report")
    s.add_argument("--config", required=True)
    s.add_argument("--name", default="report")
    s.add_argument("--override-seed", action="store_true", help="use --seed instead of the config seed")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
