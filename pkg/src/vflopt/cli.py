"""Command-line entry point: ``vflopt <subcommand> [flags]``.

Every subcommand writes its artifacts plus ``config.json`` (the resolved
flags) into ``--out``. A JSON file passed with ``--config`` supplies flag
values under flat keys such as ``"theta-p"`` or ``"constraints.phi-p"``;
explicit flags win over the file.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import cmosb, moo
from .attack import instance_clustering_attack
from .data import DataError, gen_synthetic, load_csv, load_dataset, save_dataset
from .moo import Constraints, ObjectiveTriple, VariationParams
from .secureboost import CostModel, Hyperparameters, LeafTrace, TreeParams, train

log = logging.getLogger("vflopt")

_NOT_SAVED = {"command", "config", "handler"}
_IGNORED_KEYS = {"run_config"}


class CliError(Exception):
    """User-facing failure; reported without a traceback."""


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=42, help="master seed (default 42)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--config", help="JSON file with flat flag keys; flags given on the command line win")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset CSV (with a .json manifest from gen-data, or see --label-column)")
    p.add_argument("--label-column", help="label column for a CSV without manifest")
    p.add_argument("--passive-columns", help="comma-separated passive-party columns for a CSV without manifest")
    p.add_argument("--id-column")
    p.add_argument("--train-fraction", type=float, default=2 / 3)
    p.add_argument("--probe-per-class", type=int, default=100)


def _add_eval(p: argparse.ArgumentParser) -> None:
    p.add_argument("--known-per-class", type=int, default=1)
    p.add_argument("--attack-stride", type=int, default=1)
    p.add_argument("--n-bins", type=int, default=32)
    p.add_argument("--t-enc", type=float, default=CostModel.t_enc)
    p.add_argument("--t-dec", type=float, default=CostModel.t_dec)
    p.add_argument("--t-add", type=float, default=CostModel.t_add)


def _add_hp(p: argparse.ArgumentParser, base: Hyperparameters) -> None:
    p.add_argument("--n-federated", "--n-f", dest="n_federated", type=int, default=base.n_f)
    p.add_argument("--n-local", "--n-l", dest="n_local", type=int, default=base.n_l)
    p.add_argument("--depth", type=int, default=base.d)
    p.add_argument("--sample-rate", "--r", dest="sample_rate", type=float, default=base.r)
    p.add_argument("--theta-p", type=float, default=base.theta_p)
    p.add_argument("--eta", type=float, default=base.eta)


def _add_jobs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="parallel evaluations (default: all cores)")


UNDEFENDED = Hyperparameters(n_f=20, n_l=0, d=7, r=0.8, theta_p=1.0, eta=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vflopt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="write a synthetic two-party dataset")
    _add_common(p)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--active", type=int, default=5)
    p.add_argument("--passive", type=int, default=5)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--separation", type=float, default=2.0)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train once, attack, print (eps_u, eps_c, eps_p)")
    _add_common(p)
    _add_data(p)
    _add_eval(p)
    _add_hp(p, cmosb.ES_PRESETS["Average"])
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("attack", help="run the clustering attack on a saved leaf trace")
    _add_common(p)
    _add_data(p)
    p.add_argument("--trace", help="trace.csv written by train")
    p.add_argument("--known-per-class", type=int, default=1)
    p.add_argument("--rounds", type=int, help="only use trees of the first ROUNDS federated rounds")
    p.set_defaults(handler=cmd_attack)

    p = sub.add_parser("optimize", help="constrained multi-objective search")
    _add_common(p)
    _add_data(p)
    _add_eval(p)
    _add_jobs(p)
    p.add_argument("--generations", type=int, default=40)
    p.add_argument("--population", type=int, default=20)
    p.add_argument("--phi-p", type=float)
    p.add_argument("--phi-c", type=float)
    p.add_argument("--phi-u", type=float)
    p.add_argument("--alpha", type=float, default=20.0)
    p.add_argument("--penalize-utility", action="store_true", help="also penalize eps_u above --phi-u")
    p.add_argument("--inject-presets", action="store_true", help="seed the population with the ES presets")
    p.set_defaults(handler=cmd_optimize)

    p = sub.add_parser("grid", help="grid-search baseline")
    _add_common(p)
    _add_data(p)
    _add_eval(p)
    _add_jobs(p)
    p.add_argument("--budget", type=int, help="evaluate a seeded random subset of this many grid points")
    p.set_defaults(handler=cmd_grid)

    p = sub.add_parser("baselines", help="evaluate the empirical-selection presets")
    _add_common(p)
    _add_data(p)
    _add_eval(p)
    p.set_defaults(handler=cmd_baselines)

    p = sub.add_parser("hv", help="normalized hypervolume of front CSV files on a shared scale")
    _add_common(p)
    p.add_argument("fronts", nargs="+", help="front.csv files")
    p.add_argument("--feasible-phi-p", type=float, help="only count points with eps_p at most this")
    p.add_argument("--feasible-phi-c", type=float, help="only count points with eps_c at most this")
    p.set_defaults(handler=cmd_hv)

    p = sub.add_parser("defense-sweep", help="eps_p and eps_u while varying n_l or theta_p")
    _add_common(p)
    _add_data(p)
    _add_eval(p)
    _add_hp(p, UNDEFENDED)
    p.add_argument("--param", choices=("n_l", "theta_p"), default="n_l")
    p.add_argument("--values", help="comma-separated values (default 0,2,4,6,8,10 or 1.0,0.9,0.8,0.7)")
    p.add_argument("--repeats", type=int, default=1, help="training seeds averaged per value")
    p.set_defaults(handler=cmd_defense_sweep)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:  # type: ignore[union-attr]
        if name in action.choices:
            return action.choices[name]
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    path = Path(args.config)
    try:
        values = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(values, dict):
        raise CliError(f"{path}:1: expected a JSON object of flag values")
    sub = _subparser(parser, args.command)
    dests = {a.dest for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        dest = key.split(".")[-1].lstrip("-").replace("-", "_")
        if dest in _NOT_SAVED or key in _IGNORED_KEYS:
            continue
        if dest not in dests:
            raise CliError(f"{path}: unknown key {key!r} for {args.command}")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _resolved(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_SAVED}


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    if not args.data:
        raise CliError("--data is required (on the command line or in --config)")
    path = Path(args.data)
    if args.label_column:
        passive = [c.strip() for c in (args.passive_columns or "").split(",") if c.strip()]
        if not passive:
            raise CliError("--passive-columns is required with --label-column")
        return load_csv(path, args.label_column, passive, id_column=args.id_column)
    if not path.exists():
        raise CliError(f"{path}: no such file")
    return load_dataset(path)


def _experiment(args):
    ds = _load(args)
    return cmosb.prepare_experiment(ds, args.seed, args.train_fraction, args.probe_per_class)


def _settings(args) -> cmosb.EvalSettings:
    return cmosb.EvalSettings(
        tree=TreeParams(n_bins=args.n_bins),
        cost=CostModel(args.t_enc, args.t_dec, args.t_add),
        attack_stride=args.attack_stride,
        known_per_class=args.known_per_class,
    )


def _hp(args) -> Hyperparameters:
    return Hyperparameters(
        n_f=args.n_federated, n_l=args.n_local, d=args.depth, r=args.sample_rate, theta_p=args.theta_p, eta=args.eta
    )


def _front_rows(records, pen=None):
    F = np.array([r.objectives for r in records], dtype=float).reshape(-1, 3)
    P = F if pen is None else pen
    rank = moo.ranks_from_fronts(moo.non_dominated_sort(P), len(P)) if len(P) else []
    rows = []
    for i, r in enumerate(records):
        t = ObjectiveTriple(r.objectives, tuple(map(float, P[i])), tuple(bool(a > b) for a, b in zip(P[i], F[i])))
        rows.append((r.solution_id, r.hp, t, int(rank[i])))
    return rows


def cmd_gen_data(args) -> None:
    ds = gen_synthetic(args.samples, args.active, args.passive, args.classes, args.noise, args.seed, args.separation)
    out = _out_dir(args)
    save_dataset(ds, out / "data.csv", args.seed)
    print(f"wrote {out / 'data.csv'} ({len(ds)} rows, {ds.num_active}+{ds.num_passive} features, {ds.num_classes} classes)")


def cmd_train(args) -> None:
    train_set, test_set, probe = _experiment(args)
    hp = _hp(args)
    settings = _settings(args)
    rec = cmosb.sbo(hp, train_set, test_set, probe, args.seed, settings)
    model, ledger, trace = train(hp, train_set, args.seed, settings.tree, settings.cost)
    report = instance_clustering_attack(trace, probe, args.seed, args.known_per_class)
    out = _out_dir(args)
    model.save(out / "model.json")
    trace.to_csv(out / "trace.csv")
    report.save(out / "attack_report.json")
    cmosb.write_config(out / "ledger.json", ledger.to_dict())
    cmosb.write_records(out / "record.jsonl", [rec])
    print(f"eps_u={rec.eps_u:.6f} eps_c={rec.eps_c:.6f} eps_p={rec.eps_p:.6f}")


def cmd_attack(args) -> None:
    if not args.trace:
        raise CliError("--trace is required (on the command line or in --config)")
    _, _, probe = _experiment(args)
    trace = LeafTrace.from_csv(args.trace)
    if args.rounds is not None:
        trace = trace.up_to_round(args.rounds)
    unknown = trace.instance_ids() - set(np.asarray(_load(args).instance_ids).tolist())
    if unknown:
        raise CliError(f"{args.trace}: {len(unknown)} instance ids are not in {args.data}")
    report = instance_clustering_attack(trace, probe, args.seed, args.known_per_class)
    out = _out_dir(args)
    report.save(out / "attack_report.json")
    print(f"eps_p={report.epsilon_p:.6f} trees={report.n_trees}")


def cmd_optimize(args) -> None:
    train_set, test_set, probe = _experiment(args)
    constraints = Constraints.uniform(args.phi_u, args.phi_c, args.phi_p, args.alpha, args.penalize_utility)
    config = cmosb.RunConfig(
        generations=args.generations,
        population=args.population,
        constraints=constraints,
        seed=args.seed,
        variation=VariationParams(),
        settings=_settings(args),
        inject_presets=args.inject_presets,
        jobs=args.jobs,
        dataset={"path": str(args.data), "train_fraction": args.train_fraction, "probe_per_class": args.probe_per_class},
    )
    result = cmosb.cmosb_run(config, train_set, test_set, probe)
    out = _out_dir(args)
    cmosb.write_run_artifacts(out, result, config, _resolved(args))
    print(f"{len(result.pareto_set)} rank-0 solutions; final hv={result.hv_series[-1]:.6f}")
    return True


def cmd_grid(args) -> None:
    train_set, test_set, probe = _experiment(args)
    settings = _settings(args)
    with cmosb.Evaluator(train_set, test_set, probe, settings, args.jobs) as ev:
        res = cmosb.grid_search(train_set, test_set, probe, args.seed, args.budget, settings=settings, evaluator=ev)
    out = _out_dir(args)
    moo.write_front_csv(out / "front.csv", _front_rows(res.front_records))
    cmosb.write_records(out / "records.jsonl", res.records)
    print(f"{len(res.records)} grid points evaluated, {len(res.front_records)} non-dominated")


def cmd_baselines(args) -> None:
    train_set, test_set, probe = _experiment(args)
    records = cmosb.empirical_baseline(train_set, test_set, probe, args.seed, _settings(args))
    out = _out_dir(args)
    moo.write_front_csv(out / "front.csv", _front_rows(records))
    cmosb.write_records(out / "records.jsonl", records)
    for name, r in zip(cmosb.ES_PRESETS, records):
        print(f"{name}: eps_u={r.eps_u:.6f} eps_c={r.eps_c:.6f} eps_p={r.eps_p:.6f}")


def cmd_hv(args) -> None:
    fronts = {}
    bounds = Constraints(phi_c=args.feasible_phi_c, phi_p=args.feasible_phi_p)
    for name in args.fronts:
        rows = moo.read_front_csv(name)
        F = np.array([t.raw for _, _, t, _ in rows], dtype=float).reshape(-1, 3)
        fronts[name] = cmosb.feasible_points(F, bounds)
    if not any(len(F) for F in fronts.values()):
        raise CliError("no (feasible) points in the given fronts")
    values = cmosb.compare_hypervolumes(fronts)
    out = _out_dir(args)
    with (out / "hv.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["front", "points", "hv"])
        for name in args.fronts:
            w.writerow([name, len(fronts[name]), repr(values[name])])
            print(f"{name}\t{values[name]:.6f}")


def cmd_defense_sweep(args) -> None:
    train_set, test_set, probe = _experiment(args)
    if args.values:
        try:
            values = [float(v) for v in args.values.split(",")]
        except ValueError:
            raise CliError(f"--values: cannot parse {args.values!r}") from None
    else:
        values = [0, 2, 4, 6, 8, 10] if args.param == "n_l" else [1.0, 0.9, 0.8, 0.7]
    if args.repeats < 1:
        raise CliError("--repeats must be >= 1")
    base = _hp(args)
    settings = _settings(args)
    sums = np.zeros((len(values), 2))
    for k in range(args.repeats):
        rows = cmosb.defense_sweep(args.param, values, base, train_set, test_set, probe, args.seed + k, settings)
        sums += np.array([[p, u] for _, p, u in rows])
    means = sums / args.repeats
    out = _out_dir(args)
    with (out / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([args.param, "eps_p", "eps_u"])
        for v, (p, u) in zip(values, means):
            w.writerow([int(v) if args.param == "n_l" else repr(float(v)), repr(float(p)), repr(float(u))])
            print(f"{args.param}={v}: eps_p={p:.4f} eps_u={u:.4f}")


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config_file(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except CliError as exc:
        _subparser(parser, argv[0] if argv else "").print_usage(sys.stderr)
        print(f"vflopt: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if not args.handler(args):
            cmosb.write_config(_out_dir(args) / "config.json", _resolved(args))
    except (CliError, DataError, ValueError, OSError) as exc:
        _subparser(parser, args.command).print_usage(sys.stderr)
        print(f"vflopt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
