"""Command-line entry point: ``egoplan <subcommand> ...``.

Exit codes: 0 success, 1 partial failure (some inputs failed), 2 bad
arguments or configuration.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evalkit, io, svg
from .bevgrid import BevGrid, ReferenceLine, line_from_trajectory, response_target
from .config import ConfigError, build, dump_config, load_config
from .denoise import denoise_recover, noise_trajectory, write_denoise_csv
from .errors import EgoplanError, SchemaError
from .netlet import (ResponseRegressor, TrainConfig, evaluate_response, read_loss_csv, train_response,
                     write_loss_csv)
from .planner import (PipelineParams, PlanContext, iterate_refine, plan_from_dict, plan_to_dict,
                      predict_motion_joint)
from .scene import TEMPLATES, gen_scenario, perturb_perception

log = logging.getLogger("egoplan")

STUDY_TEMPLATES = {"divergence": evalkit.divergence_scenario, "clearance": evalkit.clearance_scenario}


class UsageError(Exception):
    pass


def _out_dir(path):
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {p}: {exc.strerror or exc}") from None
    return p


def _expand(paths, suffix=".json", exclude=".plan.json"):
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.glob(f"*{suffix}") if not q.name.endswith(exclude)))
        else:
            out.append(p)
    return out


# ---------------------------------------------------------------- gen

def cmd_gen(args):
    if args.template not in TEMPLATES and args.template not in STUDY_TEMPLATES:
        raise UsageError(f"unknown template {args.template!r}; known: "
                         f"{sorted(TEMPLATES) + sorted(STUDY_TEMPLATES)}")
    if args.count < 0:
        raise UsageError("count must be >= 0")
    out = _out_dir(args.out)
    for seed in range(args.seed, args.seed + args.count):
        if args.template in STUDY_TEMPLATES:
            scen = STUDY_TEMPLATES[args.template](seed)[0]
        else:
            scen = gen_scenario(args.template, seed)
        io.save_scenario(scen, out / f"{args.template}_{seed:06d}.json")
    print(f"wrote {args.count} scenario(s) to {out}")
    return 0


# ---------------------------------------------------------------- run

_WORKER = {}


def _worker_state(cfg):
    key = dump_config(cfg)
    if _WORKER.get("key") != key:
        objs = build(cfg)
        schedule = objs["schedule"]
        reg = ResponseRegressor.load(cfg["checkpoint"]) if cfg["checkpoint"] else None
        _WORKER.update(key=key, objs=objs, reg=reg,
                       params=PipelineParams.init(int(cfg["C"]), schedule.M, int(cfg["seed"])))
    return _WORKER


def _run_one(job):
    path, cfg = job
    st = _worker_state(cfg)
    objs = st["objs"]
    try:
        scen = io.load_scenario(path)
        perception = perturb_perception(scen, objs["perception"], int(cfg["seed"]) ^ scen.seed)
        res = iterate_refine(scen, objs["refine"], st["params"], objs["schedule"], perception,
                             objs["spec"], st["reg"])
        return path, io.dumps(plan_to_dict(res, scen)), None
    except (EgoplanError, ValueError, OSError) as exc:
        return path, None, f"{type(exc).__name__}: {exc}"


def _map_ordered(fn, jobs, workers):
    """Results in input order regardless of worker count."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def cmd_run(args, cfg):
    files = _expand(args.scenarios)
    if not files:
        raise UsageError("no scenario files given")
    out = _out_dir(cfg["out"])
    (out / "config.yaml").write_text(dump_config(cfg))
    results = _map_ordered(_run_one, [(str(f), cfg) for f in files], int(cfg["workers"]))
    failed = 0
    for path, text, err in results:
        if err is not None:
            failed += 1
            print(f"error: {path}: {err}", file=sys.stderr)
            continue
        (out / (Path(path).stem + ".plan.json")).write_text(text)
    print(f"planned {len(files) - failed}/{len(files)} scenario(s) into {out}")
    return 1 if failed else 0


# ---------------------------------------------------------------- eval

def _parse_methods(specs):
    methods = []
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).name or "plans", spec
        methods.append((name, path))
    return methods


def cmd_eval(args, cfg):
    scen_files = _expand(args.scenarios)
    scenarios = {}
    for f in scen_files:
        scenarios[f.stem] = io.load_scenario(f)
    if not scenarios:
        raise UsageError("no scenario files given")
    methods = _parse_methods(args.plans or [])
    if args.gt:
        methods.insert(0, ("ground-truth", None))
    if not methods:
        raise UsageError("give --plans NAME=DIR and/or --gt")
    ego_dims = build(cfg)["ego_dims"]
    partial = False
    reports = []
    for protocol in cfg["protocols"]:
        rows = []
        for name, path in methods:
            plans, scens = [], []
            if path is None:
                plans = [s.ego_gt_future for s in scenarios.values()]
                scens = list(scenarios.values())
            else:
                plan_files = _expand([path], ".plan.json", exclude="\0")
                for pf in plan_files:
                    stem = pf.name[: -len(".plan.json")]
                    if stem not in scenarios:
                        print(f"unmatched plan {pf} (no scenario {stem}.json); skipped", file=sys.stderr)
                        partial = True
                        continue
                    plans.append(plan_from_dict(io.read_json(pf)))
                    scens.append(scenarios[stem])
                if not plans:
                    print(f"method {name}: no plans matched", file=sys.stderr)
                    partial = True
                    continue
            row, _ = evalkit.evaluate_method(name, plans, scens, protocol, ego_dims)
            rows.append(row)
        baseline = args.baseline if args.baseline else (0 if len(rows) > 1 else None)
        try:
            reports.extend(evalkit.aggregate_report(rows, baseline, protocol))
        except StopIteration:
            raise UsageError(f"baseline {args.baseline!r} is not among the methods") from None
    out = _out_dir(cfg["out"])
    evalkit.write_report_csv(reports, out / "report.csv")
    evalkit.write_report_json(reports, out / "report.json")
    print(evalkit.format_table(reports))
    return 1 if partial else 0


# ---------------------------------------------------------------- train-response

def _training_scenarios(args, seed):
    if args.scenarios:
        return [io.load_scenario(f) for f in _expand(args.scenarios)]
    names = sorted(TEMPLATES)
    return [gen_scenario(names[i % len(names)], seed + i) for i in range(args.synthetic)]


def cmd_train_response(args, cfg):
    seed = int(cfg["seed"])
    scens = _training_scenarios(args, seed)
    if not scens:
        raise UsageError("no training scenarios")
    spec = build(cfg)["spec"]
    tc = TrainConfig(lr=args.lr, steps=args.steps, batch_size=args.batch_size, seed=seed,
                     C=int(cfg["C"]))
    model, curve = train_response(scens, spec, tc)
    out = _out_dir(cfg["out"])
    model.save(out / "response.netlet.json")
    write_loss_csv(curve, out / "loss.csv")
    msg = f"trained {tc.steps} steps: total {curve[0].total:.5f} -> {curve[-1].total:.5f}"
    if args.holdout:
        names = sorted(TEMPLATES)
        held = [gen_scenario(names[i % len(names)], 10_000 + seed + i) for i in range(args.holdout)]
        rec = evaluate_response(model, held, spec)
        msg += f"; held-out l2 {rec.l2:.5f}"
    print(msg)
    return 0


# ---------------------------------------------------------------- denoise

def cmd_denoise(args, cfg):
    objs = build(cfg)
    spec = objs["spec"]
    rows = []
    for t in range(args.trials):
        seed = int(cfg["seed"]) + t
        scen = gen_scenario(args.template, seed)
        gt = scen.ego_gt_future
        line = line_from_trajectory(gt, spec)
        if line is None:
            continue
        bounds = tuple(m.points for m in scen.maps if m.kind == "boundary")
        ctx = PlanContext(line, np.stack([a.gt_future.waypoints for a in scen.agents])
                          if scen.agents else np.zeros((0, len(gt), 2)), bounds)
        for g, noised in enumerate(noise_trajectory(gt, objs["noise"].G, seed)):
            rec = denoise_recover(noised, ctx, objs["refine"], gt)
            rows.append((seed, g, rec.residual_before, rec.residual_after))
    out = _out_dir(cfg["out"])
    write_denoise_csv(rows, out / "denoise.csv")
    better = sum(1 for r in rows if r[3] < r[2])
    print(f"{len(rows)} recoveries, residual reduced in {better}")
    return 0


# ---------------------------------------------------------------- plot

def cmd_plot(args, cfg):
    src = Path(args.input)
    if args.kind == "bev":
        d = io.read_json(src)
        if d.get("schema") == "grid/1":
            grid = BevGrid.from_dict(d)
        elif d.get("schema") == "scenario/1":
            grid = response_target(build(cfg)["spec"], io.scenario_from_dict(d).ego_gt_future)
        else:
            raise SchemaError(f"{src}: bev plots read grid/1 or scenario/1 files")
        text = svg.heatmap_svg(grid)
    elif args.kind == "curve":
        curve = read_loss_csv(src)
        xs = [r.step for r in curve]
        text = svg.curve_svg(xs, {"total": [r.total for r in curve], "l2": [r.l2 for r in curve],
                                  "bce": [r.bce for r in curve]}, log_y=True)
    else:
        scen = io.load_scenario(src)
        plan, selected, modes = None, (), None
        if args.plan:
            pd = io.read_json(args.plan)
            plan = plan_from_dict(pd)
            selected = pd["stages"][-1]["selected_agents"] if pd.get("stages") else ()
            chosen = [a for a in scen.agents if a.id in set(selected)]
            # agent modes are scored against their own paths, so no line is needed here
            sets, _ = predict_motion_joint(chosen, scen.ego_intent, ReferenceLine((), np.zeros((0, 2))))
            modes = {i: [s.modes[k] for k in np.argsort(-s.scores, kind="stable")[:3]]
                     for i, s in sets.items()}
        text = svg.scene_svg(scen, plan, selected, modes)
    out = Path(args.output)
    if out.parent:
        _out_dir(out.parent)
    out.write_text(text)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------- report

def cmd_report(args, cfg):
    """Aggregate per-horizon rows (CSV: method,l2_1s,l2_2s,l2_3s,col_1s,col_2s,col_3s)."""
    rows = []
    with open(args.input, newline="") as fh:
        for rec in csv.DictReader(fh):
            try:
                rows.append(evalkit.MethodRow(
                    rec["method"], tuple(float(rec[f"l2_{h}s"]) for h in (1, 2, 3)),
                    tuple(float(rec[f"col_{h}s"]) for h in (1, 2, 3))))
            except (KeyError, ValueError) as exc:
                raise SchemaError(f"{args.input}: bad row {rec}: {exc}") from None
    baseline = args.baseline if args.baseline else 0
    try:
        reports = evalkit.aggregate_report(rows, baseline, args.report_protocol)
    except StopIteration:
        raise UsageError(f"baseline {args.baseline!r} is not among the rows") from None
    out = _out_dir(cfg["out"])
    evalkit.write_report_csv(reports, out / "report.csv")
    evalkit.write_report_json(reports, out / "report.json")
    print(evalkit.format_table(reports))
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="egoplan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--out", help="output directory (default: $EGOPLAN_OUT or ./out)")
        sp.add_argument("--seed", type=int, help="root seed")
        return sp

    g = sub.add_parser("gen", help="generate scenario files")
    g.add_argument("template")
    g.add_argument("count", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="scenarios")

    r = common(sub.add_parser("run", help="plan scenario files"))
    r.add_argument("scenarios", nargs="+", help="scenario files or directories")
    r.add_argument("--stages", type=int, help="refinement stages N")
    r.add_argument("--workers", type=int, help="worker processes")
    r.add_argument("--checkpoint", help="response regressor (netlet/1) for the stage-1 line")
    r.add_argument("--agent-futures", choices=["predicted", "gt"])

    e = common(sub.add_parser("eval", help="score plans against scenarios"))
    e.add_argument("--scenarios", nargs="+", required=True)
    e.add_argument("--plans", action="append", help="NAME=DIR of plan files (repeatable)")
    e.add_argument("--gt", action="store_true", help="also score the GT futures as a method")
    e.add_argument("--protocol", action="append", choices=["obb", "grid"])
    e.add_argument("--baseline", help="method name the others are compared with")

    t = common(sub.add_parser("train-response", help="fit the response-map regressor"))
    t.add_argument("scenarios", nargs="*")
    t.add_argument("--synthetic", type=int, default=20, help="generated scenarios when no files given")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--lr", type=float, default=2.0)
    t.add_argument("--batch-size", type=int, default=0)
    t.add_argument("--C", type=int, dest="C")
    t.add_argument("--holdout", type=int, default=0, help="held-out scenarios to report l2 on")

    d = common(sub.add_parser("denoise", help="trajectory noise and recovery experiment"))
    d.add_argument("--trials", type=int, default=200)
    d.add_argument("--template", default="empty", choices=sorted(TEMPLATES))

    pl = common(sub.add_parser("plot", help="emit an SVG"))
    pl.add_argument("kind", choices=["bev", "curve", "scene"])
    pl.add_argument("input")
    pl.add_argument("output")
    pl.add_argument("--plan", help="plan/1 file to overlay on a scene")

    rp = common(sub.add_parser("report", help="aggregate per-horizon metric rows"))
    rp.add_argument("input", help="CSV with method,l2_1s,l2_2s,l2_3s,col_1s,col_2s,col_3s")
    rp.add_argument("--baseline")
    rp.add_argument("--protocol", dest="report_protocol", default="obb", choices=["obb", "grid"])
    return p


def _config_for(args):
    ov = {"out": getattr(args, "out", None), "seed": getattr(args, "seed", None),
          "refine.N": getattr(args, "stages", None), "workers": getattr(args, "workers", None),
          "checkpoint": getattr(args, "checkpoint", None),
          "refine.agent_futures": getattr(args, "agent_futures", None),
          "C": getattr(args, "C", None), "protocols": getattr(args, "protocol", None)}
    return load_config(getattr(args, "config", None), ov)


HANDLERS = {"run": cmd_run, "eval": cmd_eval, "train-response": cmd_train_response,
            "denoise": cmd_denoise, "plot": cmd_plot, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen":
            return cmd_gen(args)
        cfg = _config_for(args)
        return HANDLERS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"egoplan: {exc}", file=sys.stderr)
        return 2
    except (EgoplanError, ValueError, OSError) as exc:
        print(f"egoplan: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
