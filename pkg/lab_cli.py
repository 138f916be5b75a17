"""
Command-line front end: bound sweeps, contraction plans, toy FNO training and the frequency/placement
experiments. Every run writes its data files plus manifest.json into --out.

    python lab_cli.py bounds --d 1,2,3 --m 4,8,16 --fn product --sys half
    python lab_cli.py plan --equation "bixy,ioxy->boxy" --shapes 2x4x8x8,4x4x8x8
    python lab_cli.py train --mode mixed:half --stabilizer tanh --steps 500 --seed 1
    python lab_cli.py spectrum --seeds 20
    python lab_cli.py modes --modes 4,8,16,32 --precisions "full;mixed:half"
    python lab_cli.py placement --sys half

Exit codes: 0 on completion (divergence and bound violations are findings in the data), 1 on invalid
input, unwritable output or a non-finite value outside a training run, 2 on command-line usage errors.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

import contract_plan
import error_lab
import fno_toy
from grid_field import build_grid
from precision_sim import NonFiniteError, parse_token, relative_epsilon
from utils import StageTimer, json_safe, parse_list, parse_shapes, sha256_file, write_rows

logger = logging.getLogger(__name__)

__version__ = "0.1.0"

FORMATS = ("csv", "json")
NOMINAL_HALF_EPSILON = 1e-4  # the float16 epsilon quoted alongside the bound, next to the true 2^-11


@dataclass
class RunManifest:
    version: str
    command: str
    seed: int
    config: dict
    stage_times: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)  # file name -> sha256
    results: dict = field(default_factory=dict)
    created: float = field(default_factory=time.time)

    def write(self, path):
        with open(path, "w") as f:
            json.dump(json_safe(asdict(self)), f, indent=1, sort_keys=True)
            f.write("\n")
        return path


def _output(args, name):
    return os.path.join(args.out, "%s.%s" % (name, args.format))


def _data_rows(rows, columns):
    return [[row[c] for c in columns] for row in rows]


def cmd_bounds(args, timer):
    config = error_lab.SweepConfig(d_values=tuple(parse_list(args.d, int)),
                                   m_values=tuple(parse_list(args.m, int)),
                                   omegas=tuple(parse_list(args.omega, int)),
                                   systems=tuple(parse_list(args.sys, str, sep=";")),
                                   functions=tuple(parse_list(args.fn)),
                                   consts=error_lab.BoundConstants(c2=args.c2),
                                   constant_y=args.constant_y,
                                   tones=args.tones,
                                   seed=args.seed)
    with timer.stage("sweep"):
        reports = error_lab.bounds_sweep(config, args.workers)
    violations = [r for r in reports if r.violation]
    out_of_class = sum(not r.in_class for r in reports)
    with timer.stage("write"):
        paths = [write_rows(_output(args, "bounds"), error_lab.REPORT_COLUMNS, [r.row() for r in reports], args.format),
                 write_rows(_output(args, "violations"), error_lab.REPORT_COLUMNS, [r.row() for r in violations],
                            args.format)]
    epsilons = {token: relative_epsilon(parse_token(token)) for token in config.systems if token != "exact"}
    if "half" in epsilons:
        epsilons["half_nominal"] = NOMINAL_HALF_EPSILON
    print("Rows: %i." % len(reports), "Violations: %i." % len(violations), "Out of class: %i." % out_of_class)
    print("Relative epsilon: %s" % ", ".join("%s=%.4g" % kv for kv in epsilons.items()))
    return paths, {"rows": len(reports), "violations": len(violations), "out_of_class": out_of_class,
                   "relative_epsilon": epsilons}


def _check_plans(spec, plans, precision, mode, rng):
    """Max abs deviation of each plan's execution from the reference contraction, on random operands."""
    operands = [rng.standard_normal(s) + 1j * rng.standard_normal(s) for s in spec.operand_shapes]
    reference = contract_plan.reference_contract(spec, operands)
    return {name: float(np.max(np.abs(contract_plan.execute(plan, operands, precision, mode) - reference), initial=0.0))
            for name, plan in plans.items()}


def cmd_plan(args, timer):
    spec = contract_plan.parse(args.equation, parse_shapes(args.shapes))
    sys_ = parse_token(args.sys)
    mode = contract_plan.LoweringMode.parse(args.lowering)
    with timer.stage("plan"):
        plans = {"greedy": contract_plan.plan_greedy(spec), "flop_optimal": contract_plan.plan_flop_optimal(spec)}
    greedy, optimal = plans["greedy"], plans["flop_optimal"]
    identical = greedy.steps == optimal.steps
    results = {"greedy_peak": greedy.peak_intermediate_elems, "flop_optimal_peak": optimal.peak_intermediate_elems,
               "greedy_flops": greedy.total_flops, "flop_optimal_flops": optimal.total_flops, "identical": identical}
    if args.execute:
        with timer.stage("execute"):
            results["max_abs_err"] = _check_plans(spec, plans, sys_, mode, np.random.default_rng(args.seed))

    if args.json:
        doc = {name: plan.to_dict(mode) for name, plan in plans.items()}
        doc["identical"] = identical
        if args.bytes:
            doc["peak_bytes"] = {name: plan.peak_intermediate_bytes(sys_.itemsize) for name, plan in plans.items()}
        if args.execute:
            doc["max_abs_err"] = results["max_abs_err"]
        print(json.dumps(json_safe(doc), indent=1))
    else:
        print(greedy.format())
        print(optimal.format())
        if args.bytes:
            print("peak intermediate bytes (%s): greedy %i, flop-optimal %i"
                  % (sys_.token, greedy.peak_intermediate_bytes(sys_.itemsize),
                     optimal.peak_intermediate_bytes(sys_.itemsize)))
        else:
            print("peak intermediate elements: greedy %i, flop-optimal %i"
                  % (greedy.peak_intermediate_elems, optimal.peak_intermediate_elems))
        if identical:
            print("greedy and flop-optimal plans are identical")
        for name, err in results.get("max_abs_err", {}).items():
            print("%s execution under %s: max abs error %.3e" % (name, sys_.token, err))

    path = _output(args, "plan")
    with timer.stage("write"):
        if args.format == "json":
            with open(path, "w") as f:
                json.dump({name: plan.to_dict(mode) for name, plan in plans.items()}, f, indent=1)
                f.write("\n")
        else:
            rows = [[name, i, s.left, s.right, s.equation, "x".join(str(x) for x in s.shape), s.elems, s.flops]
                    for name, plan in plans.items() for i, s in enumerate(plan.steps)]
            write_rows(path, ["strategy", "step", "left", "right", "equation", "shape", "elems", "flops"], rows, "csv")
    return [path], results


def _task(args):
    return fno_toy.ToyTask.generate(d=args.d, m=args.m, n_train=args.n_train, n_test=args.n_test,
                                    max_freq=args.max_freq, input_scale=args.input_scale, seed=args.seed)


def cmd_train(args, timer):
    mode = fno_toy.PrecisionSchedule.parse(args.schedule) if args.schedule else fno_toy.PrecisionMode.parse(args.mode)
    stabilizer = fno_toy.Stabilizer.parse(args.stabilizer)
    with timer.stage("task"):
        task = _task(args)
        model = fno_toy.build_model(task.grid, modes=args.modes, width=args.width, layers=args.layers,
                                    stabilizer=stabilizer, seed=args.seed)
    with timer.stage("train"):
        trace = fno_toy.train(task, model, mode, args.steps, args.lr, args.momentum, args.seed,
                              batch_size=args.batch_size or None)
    paths = []
    with timer.stage("write"):
        path = _output(args, "trace")
        if args.format == "csv":
            trace.to_csv(path)
        else:
            write_rows(path, fno_toy.TRACE_COLUMNS, list(zip(*(trace.rows[c] for c in fno_toy.TRACE_COLUMNS))), "json")
        paths.append(path)
        if args.save_weights:
            paths.append(fno_toy.save_weights(model, os.path.join(args.out, args.save_weights)))

    losses = trace.losses
    phases = dict(trace.phase_counts())
    print("Steps: %i." % len(losses),
          "Final loss: %.5f." % (losses[-1] if len(losses) else float("nan")),
          "Test loss: %.5f." % trace.final_test_loss,
          "Phases: %s." % ", ".join("%s=%i" % kv for kv in phases.items()))
    if trace.nonfinite is not None:
        print("Diverged at stage %s: %s" % (trace.nonfinite.stage, trace.nonfinite))
    return paths, {"final_test_loss": trace.final_test_loss, "diverged": trace.diverged, "phases": phases,
                   "nonfinite_stage": trace.nonfinite.stage if trace.nonfinite is not None else None}


def cmd_spectrum(args, timer):
    if args.alias:
        grid = build_grid(1, args.m)
        with timer.stage("alias"):
            err = error_lab.aliasing_demo(args.M, args.omega, grid)
        print("aliasing disc_error (M=%g, omega=%i, m=%i): %.6f" % (args.M, args.omega, args.m, err))
        return [], {"alias_disc_error": err}

    sys_ = parse_token(args.sys)
    seeds = range(args.seed, args.seed + args.seeds)
    with timer.stage("experiment"):
        report = fno_toy.frequency_trend(seeds, args.max_freq, args.m, args.d, sys_, args.scale, args.workers)
    with timer.stage("write"):
        path = write_rows(_output(args, "spectrum"), fno_toy.FREQUENCY_COLUMNS, report.rows(), args.format)
    print("Seeds: %i." % args.seeds, "Mean rank correlation of frequency and %% error: %.3f." % report.spearman)
    return [path], {"spearman": report.spearman}


def cmd_modes(args, timer):
    task = _task(args)
    precisions = [fno_toy.PrecisionMode.parse(t) for t in parse_list(args.precisions, str, sep=";")]
    with timer.stage("ablation"):
        rows = fno_toy.mode_ablation(task, parse_list(args.modes, int), precisions, args.steps, args.lr,
                                     args.momentum, args.seed, fno_toy.Stabilizer.parse(args.stabilizer), args.workers)
    with timer.stage("write"):
        path = write_rows(_output(args, "modes"), fno_toy.ABLATION_COLUMNS,
                          _data_rows(rows, fno_toy.ABLATION_COLUMNS), args.format)
    for row in rows:
        print("K: %i." % row["K"], "Precision: %s." % row["precision"], "Test loss: %.5f." % row["final_test_loss"])
    return [path], {"wall_times": ["%s K=%i: %.3f" % (r["precision"], r["K"], r["wall_time"]) for r in rows]}


def cmd_placement(args, timer):
    task = _task(args)
    with timer.stage("ablation"):
        rows = fno_toy.placement_ablation(task, parse_token(args.sys), args.modes, args.steps, args.lr, args.momentum,
                                          args.seed, fno_toy.Stabilizer.parse(args.stabilizer), args.workers)
    with timer.stage("write"):
        path = write_rows(_output(args, "placement"), fno_toy.PLACEMENT_COLUMNS,
                          _data_rows(rows, fno_toy.PLACEMENT_COLUMNS), args.format)
    for row in rows:
        print("Placement: %s." % row["precision"], "Test loss: %.5f." % row["final_test_loss"])
    return [path], {"wall_times": ["%s: %.3f" % (r["precision"], r["wall_time"]) for r in rows]}


COMMANDS = {"bounds": cmd_bounds, "plan": cmd_plan, "train": cmd_train, "spectrum": cmd_spectrum,
            "modes": cmd_modes, "placement": cmd_placement}


def _add_task_args(p, steps=500):
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--n-train", type=int, default=32)
    p.add_argument("--n-test", type=int, default=16)
    p.add_argument("--max-freq", type=int, default=10)
    p.add_argument("--input-scale", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--lr", type=float, default=fno_toy.LEARNING_RATE)
    p.add_argument("--momentum", type=float, default=fno_toy.MOMENTUM)
    p.add_argument("--stabilizer", type=str, default="none", help='"none", "tanh", "hardclip[:c]" or "twosigma"')


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=str, default=".", help="output directory")
    common.add_argument("--format", type=str, default="csv", choices=FORMATS)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--config", type=str, default=None, help="flat JSON file of flag values")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lab_cli", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    p = sub.add_parser("bounds", parents=[common], help="error functionals against their bounds")
    p.add_argument("--d", type=str, default="1,2,3")
    p.add_argument("--m", type=str, default="4,8,16")
    p.add_argument("--omega", type=str, default="1")
    p.add_argument("--sys", type=str, default="half", help='";"-separated precision tokens')
    p.add_argument("--fn", type=str, default="product", help=", ".join(error_lab.FUNCTIONS))
    p.add_argument("--c2", type=float, default=4.0)
    p.add_argument("--constant-y", type=float, default=0.7)
    p.add_argument("--tones", type=int, default=5)
    subparsers["bounds"] = p

    p = sub.add_parser("plan", parents=[common], help="greedy and FLOP-optimal contraction plans")
    p.add_argument("--equation", type=str, default="bixy,ioxy->boxy")
    p.add_argument("--shapes", type=str, default="2x4x8x8,4x4x8x8")
    p.add_argument("--sys", type=str, default="exact")
    p.add_argument("--lowering", type=str, default="hybrid:%i" % contract_plan.DEFAULT_HYBRID_THRESHOLD)
    p.add_argument("--bytes", action="store_true", help="report peak memory in bytes of the --sys format")
    p.add_argument("--execute", action="store_true", help="run both plans on random operands")
    p.add_argument("--json", action="store_true", help="print both plans as one JSON document on stdout")
    subparsers["plan"] = p

    p = sub.add_parser("train", parents=[common], help="train the toy FNO")
    _add_task_args(p)
    p.add_argument("--mode", type=str, default="full", help='"full", "mixed:<sys>" or "amp:<sys>"')
    p.add_argument("--schedule", type=str, default=None, help='"default[:<sys>]" or "f_mixed,f_amp,f_full[:<sys>]"')
    p.add_argument("--modes", type=int, default=fno_toy.DEFAULT_MODES)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=0, help="0 trains on the full batch")
    p.add_argument("--save-weights", type=str, default=None, help="weights file name inside --out")
    subparsers["train"] = p

    p = sub.add_parser("spectrum", parents=[common], help="per-frequency precision error of a decaying signal")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--max-freq", type=int, default=10)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--m", type=int, default=256)
    p.add_argument("--sys", type=str, default="half")
    p.add_argument("--scale", type=float, default=1.0, help="amplitude scale (0 gives the zero signal)")
    p.add_argument("--alias", action="store_true", help="run the aliasing demo instead")
    p.add_argument("--M", type=float, default=1.0)
    p.add_argument("--omega", type=int, default=1)
    subparsers["spectrum"] = p

    p = sub.add_parser("modes", parents=[common], help="test loss against the number of kept modes")
    _add_task_args(p)
    p.add_argument("--modes", type=str, default="4,8,16,32")
    p.add_argument("--precisions", type=str, default="full;mixed:half", help='";"-separated precision modes')
    subparsers["modes"] = p

    p = sub.add_parser("placement", parents=[common], help="which complex operations run in low precision")
    _add_task_args(p)
    p.add_argument("--sys", type=str, default="half")
    p.add_argument("--modes", type=int, default=fno_toy.DEFAULT_MODES)
    subparsers["placement"] = p

    return parser, subparsers


def load_config(path, subparser):
    """Flat JSON object keyed by flag names (dashes or underscores); unknown keys are rejected."""
    with open(path) as f:
        config = json.load(f)
    if not isinstance(config, dict):
        raise ValueError("config %s must hold a JSON object" % path)
    known = {a.dest for a in subparser._actions} - {"help", "config"}
    config = {k.replace("-", "_"): v for k, v in config.items()}
    unknown = sorted(set(config) - known)
    if unknown:
        raise ValueError("unknown config keys in %s: %s" % (path, ", ".join(unknown)))
    return config


def main(argv=None):
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)-8s %(message)s")
    try:
        if args.config:
            subparsers[args.command].set_defaults(**load_config(args.config, subparsers[args.command]))
            args = parser.parse_args(argv)
        if args.workers < 1:
            raise ValueError("--workers must be >= 1, got %i" % args.workers)
        os.makedirs(args.out, exist_ok=True)
        timer = StageTimer()
        paths, results = COMMANDS[args.command](args, timer)
        manifest = RunManifest(__version__, args.command, args.seed, dict(vars(args)), dict(timer.times),
                               {os.path.basename(p): sha256_file(p) for p in paths}, results)
        manifest.write(os.path.join(args.out, "manifest.json"))
    except NonFiniteError as e:
        logger.error("%s aborted on a non-finite value: stage=%s omega=%s step=%s",
                     args.command, e.stage, e.omega, e.step)
        print("error: %s" % e, file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
