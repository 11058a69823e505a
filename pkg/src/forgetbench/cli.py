"""``forgetbench`` command line: the whole workflow over declarative configs.

Exit codes: 0 success, 1 domain error (bad values, numerical failure, I/O),
2 usage error (bad flags, missing config file).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from forgetbench import config as cfgmod
from forgetbench.attack import StatMatrix, estimate_epsilons
from forgetbench.data import save_csv
from forgetbench.harness import (
    ModelPoolStore,
    Setup,
    build_problem,
    emit_report,
    load_report,
    run_bootstrap,
    run_experiment,
)
from forgetbench.harness.experiment import pool_seeds
from forgetbench.harness.store import default_store_dir
from forgetbench.nn_core import NumericalError, save_checkpoint
from forgetbench.scoring import make_scorecard
from forgetbench.seeding import derive_seed
from forgetbench.unlearn import make_preset, preset_names, run_pipeline, stitch

log = logging.getLogger("forgetbench")

COMMANDS = ("gen-data", "train-pool", "unlearn", "evaluate", "bootstrap", "stitch", "report", "presets")
STORE_ENV = "FORGETBENCH_STORE"


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forgetbench", description="Evaluate machine unlearning algorithms.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="YAML experiment config")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override applied after the file, e.g. epsilon.delta=0.01")
        p.add_argument("--output", help="output path (defaults to the config's 'output')")
        p.add_argument("--store", help=f"model pool directory (default: ${STORE_ENV} or ./forgetbench-store)")
        return p

    common(sub.add_parser("gen-data", help="write the problem's dataset CSV and split indices"))
    common(sub.add_parser("train-pool", help="train the original and retrained pools an experiment needs"))
    common(sub.add_parser("unlearn", help="unlearn the first N original models and save the results"))
    ev = common(sub.add_parser("evaluate", help="score the configured algorithms and write a report"))
    ev.add_argument("--stats", nargs=2, metavar=("UNLEARNED_CSV", "RETRAINED_CSV"),
                    help="score two precomputed statistic matrices instead of running models")
    common(sub.add_parser("bootstrap", help="like evaluate, with the bootstrap setup"))
    st = common(sub.add_parser("stitch", help="combine the erase phases of one preset with the repair phases of another"))
    st.add_argument("--erase", required=True, help="preset contributing erase phases")
    st.add_argument("--repair", required=True, help="preset contributing repair phases")
    common(sub.add_parser("report", help="print the summary of an existing report"))
    pr = sub.add_parser("presets", help="list the available unlearning presets")
    pr.add_argument("--all", action="store_true", help="include the identity and retrain reference pipelines")
    pr.add_argument("--show", metavar="NAME", help="print one preset's phase list as YAML")
    return parser


def parse(argv) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def _load(args) -> dict:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    return cfgmod.load_config(path, args.override)


def _store(args, cfg) -> ModelPoolStore:
    root = args.store or cfg.get("store") or default_store_dir()
    return ModelPoolStore(root, workers=cfg["experiment"]["workers"])


def _output(args, cfg, default=None) -> Path:
    return Path(args.output or cfg.get("output") or default)


def _report_config(cfg, pipelines) -> dict:
    out = dict(cfg)
    out["pipelines"] = [p.to_dict() for p in pipelines]
    return out


def cmd_gen_data(args, cfg):
    problem = build_problem(cfgmod.experiment_config(cfg).problem)
    out = _output(args, {}, "data.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(problem.ds, out)
    splits_path = out.with_suffix(".splits.json")
    splits_path.write_text(json.dumps(problem.splits.to_dict()))
    print(out)
    return 0


def cmd_train_pool(args, cfg):
    ex = cfgmod.experiment_config(cfg)
    problem = build_problem(ex.problem)
    store = _store(args, cfg)
    o_seeds, r_seeds = pool_seeds(ex)
    store.build_pool("original", o_seeds, problem, ex.train)
    store.build_pool("retrained", r_seeds, problem, ex.train)
    print(store.root)
    return 0


def cmd_unlearn(args, cfg):
    ex = cfgmod.experiment_config(cfg)
    problem = build_problem(ex.problem)
    store = _store(args, cfg)
    seeds = [ex.base_seed + i for i in range(ex.n_models)]
    store.build_pool("original", seeds, problem, ex.train)
    out_root = _output(args, {}, "unlearned")
    for spec in cfgmod.pipelines(cfg):
        out = out_root / spec.name
        out.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(seeds):
            run = run_pipeline(spec, store.load("original", s), problem.splits, problem.ds,
                               derive_seed(ex.base_seed, "unlearn", 0, i))
            save_checkpoint(run.params, out / f"{s}.ckpt")
    print(out_root)
    return 0


def _evaluate_stats(args, cfg):
    ex = cfgmod.experiment_config(cfg)
    u = StatMatrix.load_csv(args.stats[0], "unlearned")
    r = StatMatrix.load_csv(args.stats[1], "retrained")
    eps, discarded = estimate_epsilons(u, r, ex.epsilon)
    warnings = [f"{int(discarded.sum())} examples had every attack discarded (epsilon set to 0)"] if discarded.any() else []
    # accuracies are unknown here, so the utility ratios are neutral
    ones = {k: 1.0 for k in ("retain_u", "retain_r", "test_u", "test_r", "forget_u", "forget_r")}
    card = make_scorecard(eps, ones, ex.binning, ex.epsilon.eps_cap, None, warnings + ["statistics only: accuracies not measured"])
    out = _output(args, cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    report = {"version": 1, "delta": ex.epsilon.delta, "binning_mode": ex.binning.mode, "config": cfg,
              "scorecard": card.to_dict()}
    out.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(out)
    return 0


def _run(args, cfg, setup=None):
    if setup is not None:
        cfg = cfgmod.resolve({k: v for k, v in cfg.items() if k != "version"}, [f"experiment.setup={setup}"])
    specs = cfgmod.pipelines(cfg)
    store = _store(args, cfg)
    base = cfgmod.experiment_config(cfg, specs[0])
    problem = build_problem(base.problem)
    results = []
    for spec in specs:
        ex = base.replace(pipeline=spec)
        log.info("running %s (%s, N=%d, E=%d)", spec.name, ex.setup.value, ex.n_models, ex.n_experiments)
        run = run_bootstrap if ex.setup is Setup.BOOTSTRAP else run_experiment
        results.append(run(ex, store, problem))
    path = emit_report(results, _output(args, cfg), _report_config(cfg, specs), base.level)
    print(path)
    return 0


def cmd_evaluate(args, cfg):
    if args.stats:
        return _evaluate_stats(args, cfg)
    return _run(args, cfg)


def cmd_bootstrap(args, cfg):
    return _run(args, cfg, setup="BOOTSTRAP")


def cmd_stitch(args, cfg):
    train = cfgmod.experiment_config(cfg).train
    overrides = cfg["unlearn"].get("overrides") or {}
    spec = stitch(make_preset(args.erase, overrides.get(args.erase), train),
                  make_preset(args.repair, overrides.get(args.repair), train))
    text = spec.to_yaml()
    if args.output:
        Path(args.output).write_text(text)
        print(args.output)
    else:
        sys.stdout.write(text)
    return 0


def cmd_report(args, cfg):
    path = _output(args, cfg)
    report = load_report(path)
    print(f"report {path}  setup={report['setup']}  delta={report['delta']}  binning={report['binning_mode']}")
    print(f"{'algorithm':16s} {'F':>8s} {'F lo':>8s} {'F hi':>8s} {'final':>8s} {'fin lo':>8s} {'fin hi':>8s}")
    for name, entry in report["algorithms"].items():
        f, s = entry["summary"]["forgetting_quality"], entry["summary"]["final_score"]
        print(f"{name:16s} {f['mean']:8.4f} {f['lo']:8.4f} {f['hi']:8.4f} {s['mean']:8.4f} {s['lo']:8.4f} {s['hi']:8.4f}")
    print("ranking: " + " > ".join("=".join(group) for group in report["ranking"]))
    return 0


def cmd_presets(args):
    if args.show:
        sys.stdout.write(make_preset(args.show).to_yaml())
        return 0
    for name in preset_names(include_references=args.all):
        print(name)
    return 0


_DISPATCH = {
    "gen-data": cmd_gen_data,
    "train-pool": cmd_train_pool,
    "unlearn": cmd_unlearn,
    "evaluate": cmd_evaluate,
    "bootstrap": cmd_bootstrap,
    "stitch": cmd_stitch,
    "report": cmd_report,
}


def execute(args: argparse.Namespace) -> int:
    try:
        if args.command == "presets":
            return cmd_presets(args)
        cfg = _load(args)
        return _DISPATCH[args.command](args, cfg)
    except UsageError as exc:
        print(f"forgetbench: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, NumericalError, OSError, KeyError) as exc:
        print(f"forgetbench: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    try:
        args = parse(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return execute(args)


if __name__ == "__main__":
    sys.exit(main())
