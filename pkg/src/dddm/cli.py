"""``dddm`` command-line interface.

Every subcommand resolves an :class:`~dddm.config.ExperimentConfig` from
built-in defaults, then ``--config FILE``, then ``--set key=value``
overrides, then the named flags (``--seed``, ``--a``, ``--b`` ...), and
writes its CSV outputs plus ``manifest.json`` into ``--out``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 numerical.
"""
import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .attacks import AttackConfig, run_attack, save_adversarial
from .classifier import load_checkpoint, save_checkpoint
from .config import load_config
from .dataio import load_dataset
from .ddm import (DdmParams, RaceParams, hit_probability_analytic, mean_rt_analytic,
                  race_drift, save_paths_csv, simulate_ddm_path, simulate_ddm_paths,
                  simulate_race)
from .evidence import LikelihoodTable
from .exceptions import ConfigError, IdxParseError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("dddm")


# -- argument parsing --------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. dddm.threshold=0.999 (repeatable)")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--threads", type=int, help="worker threads for grid cells")
    p.add_argument("--data-dir", help="MNIST directory (default: $DDDM_DATA_DIR or data/mnist)")
    p.add_argument("-v", "--verbose", action="store_true")


def _dddm_flags(p):
    p.add_argument("--threshold-A", type=float, dest="threshold_A")
    p.add_argument("--trials", type=int)
    p.add_argument("--trial-length", type=int)
    p.add_argument("--predictions", type=int)


def _rate_flags(p, a=True, b=True):
    if a:
        p.add_argument("--a", type=float, help="train-phase dropout rate")
    if b:
        p.add_argument("--b", type=float, help="test-phase dropout rate")


def _attack_flags(p):
    p.add_argument("--attack", choices=("fgsm", "pgd", "uniform", "salt_pepper"))
    p.add_argument("--epsilon", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="dddm", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one dropout MLP")
    _common(p)
    _rate_flags(p, b=False)

    p = sub.add_parser("build-table", help="estimate a likelihood table")
    _common(p)
    _rate_flags(p)
    _dddm_flags(p)
    p.add_argument("--checkpoint", help="trained network (default: train one)")

    p = sub.add_parser("attack", help="generate adversarial examples")
    _common(p)
    _rate_flags(p)
    _attack_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--gradient", choices=("stochastic", "deterministic"))

    p = sub.add_parser("eval", help="evaluate undefended, one-shot and accumulator")
    _common(p)
    _rate_flags(p)
    _dddm_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--table")
    p.add_argument("--inputs", help="dataset container (.npz) to evaluate, e.g. from `attack`")

    p = sub.add_parser("sweep", help="accuracy and response time versus epsilon")
    _common(p)
    _rate_flags(p)
    _dddm_flags(p)
    p.add_argument("--attack", choices=("fgsm", "pgd", "uniform"))
    p.add_argument("--epsilons", help="comma-separated list")
    p.add_argument("--checkpoint")

    p = sub.add_parser("grid", help="full (a, b) grid with cell selection")
    _common(p)
    _dddm_flags(p)
    _attack_flags(p)

    p = sub.add_parser("ddm-sim", help="simulate the drift-diffusion model or the race")
    _common(p)
    p.add_argument("--mu", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--A", type=float, dest="bound")
    p.add_argument("--dt", type=float)
    p.add_argument("--t-max", type=float)
    p.add_argument("--paths", type=int)
    p.add_argument("--race", help="comma-separated race means; simulates X_k instead")
    p.add_argument("--save-path", action="store_true", help="also write one trajectory")

    p = sub.add_parser("diagnose-layers", help="per-layer clean/adversarial sensitivity")
    _common(p)
    _rate_flags(p, b=False)
    _attack_flags(p)
    p.add_argument("--checkpoint")
    return parser


def _overrides(args):
    """Named flags as override dicts, applied after ``--set``."""
    ov = {}

    def put(path, value):
        if value is None:
            return
        d = ov
        for part in path[:-1]:
            d = d.setdefault(part, {})
        d[path[-1]] = value

    g = vars(args)
    put(("seed",), g.get("seed"))
    put(("threads",), g.get("threads"))
    put(("data", "data_dir"), g.get("data_dir"))
    put(("model", "a"), g.get("a"))
    put(("model", "b"), g.get("b"))
    put(("dddm", "threshold"), g.get("threshold_A"))
    put(("dddm", "n_trials"), g.get("trials"))
    put(("dddm", "trial_length"), g.get("trial_length"))
    put(("dddm", "n_predictions"), g.get("predictions"))
    put(("attack", "kind"), g.get("attack"))
    put(("attack", "epsilon"), g.get("epsilon"))
    put(("ddm", "mu"), g.get("mu"))
    put(("ddm", "sigma"), g.get("sigma"))
    put(("ddm", "tau"), g.get("tau"))
    put(("ddm", "A"), g.get("bound"))
    put(("ddm", "dt"), g.get("dt"))
    put(("ddm", "t_max"), g.get("t_max"))
    put(("ddm", "paths"), g.get("paths"))
    if g.get("attack"):
        put(("sweep", "attack"), g["attack"])
    if g.get("epsilons"):
        try:
            put(("sweep", "epsilons"), [float(e) for e in g["epsilons"].split(",")])
        except ValueError as exc:
            raise ConfigError(f"bad --epsilons: {exc}") from exc
    if g.get("gradient"):
        put(("grid", "attack_gradient"), g["gradient"])
    return ov


def resolve_config(args):
    return load_config(args.config, list(args.set) + [_overrides(args)])


# -- helpers -----------------------------------------------------------------

def _network(config, args, train_data):
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint)
    return harness.train_model(config, train_data, config.model.a)


def _table(config, args, net, train_data):
    if getattr(args, "table", None):
        return LikelihoodTable.load(args.table)
    return harness.build_table_for(
        net, config.model.b, train_data, config.dddm, config.table_passes,
        harness.derive_seed(config.seed, "table", float(config.model.a), float(config.model.b)),
        config.table_inputs)


def _attack_config(config):
    return dataclasses.replace(config.attack, seed=harness.derive_seed(
        config.seed, "attack", config.attack.kind, float(config.model.a), float(config.model.b)))


# -- subcommands -------------------------------------------------------------

def cmd_train(config, args, out):
    tr, _, te = harness.prepare_data(config)
    net = harness.train_model(config, tr, config.model.a)
    save_checkpoint(out / "model.json", net)
    rows = [dict(epoch=i, loss=l) for i, l in enumerate(net.meta["loss_history"], start=1)]
    harness.write_csv(out / "train.csv", ("epoch", "loss"), rows)
    acc = harness.evaluate_undefended(net, te)
    harness.write_csv(out / "eval.csv", ("a", "acc_undefended"),
                      [dict(a=config.model.a, acc_undefended=acc)])
    print(f"trained a={config.model.a}: deterministic eval accuracy {acc:.4f}")
    return ["model.json", "train.csv", "eval.csv"], {"acc_undefended": acc}


def cmd_build_table(config, args, out):
    tr, _, _ = harness.prepare_data(config)
    net = _network(config, args, tr)
    table = _table(config, args, net, tr)
    table.save(out / "table.json")
    doc = table.to_dict()
    rows = [dict(cls=c, total=doc["totals"][str(c)], distinct=len(doc["counts"][str(c)]))
            for c in range(table.C)]
    harness.write_csv(out / "table.csv", ("cls", "total", "distinct"), rows)
    print(f"table: {len(table.observed_signatures)} observed signatures over {table.C} classes")
    return ["table.json", "table.csv"], None


def cmd_attack(config, args, out):
    tr, _, te = harness.prepare_data(config)
    net = _network(config, args, tr)
    cfg = _attack_config(config)
    gb = config.model.b if config.grid.attack_gradient == "stochastic" else 0.0
    ex = run_attack(net, te.features, te.labels, cfg, b=gb)
    save_adversarial(out / "adversarial.npz", te, cfg, ex)
    rows = [dict(index=i, label=int(te.labels[i]), success=int(ex.success[i]),
                 queries=int(ex.queries[i]),
                 linf=float(np.abs(ex.x_adv[i] - te.features[i]).max()))
            for i in range(len(te))]
    harness.write_csv(out / "attack.csv", ("index", "label", "success", "queries", "linf"), rows)
    rate = float(np.mean(ex.success))
    print(f"{cfg.kind} eps={cfg.epsilon}: success rate {rate:.4f}")
    return ["adversarial.npz", "adversarial.attack.json", "attack.csv"], {"success_rate": rate}


def cmd_eval(config, args, out):
    tr, _, te = harness.prepare_data(config)
    if args.inputs:
        te = load_dataset(args.inputs)
    net = _network(config, args, tr)
    table = _table(config, args, net, tr)
    a, b = float(config.model.a), float(config.model.b)
    acc_h = harness.evaluate_dropout_classifier(net, b, te, harness.derive_seed(
        config.seed, "oneshot", "eval", a, b))
    ev = harness.evaluate_dddm(net, b, table, te, config.dddm, harness.derive_seed(
        config.seed, "dddm", "eval", a, b))
    row = dict(a=a, b=b, acc_undefended=harness.evaluate_undefended(net, te), acc_h=acc_h,
               acc_H=ev.accuracy, acc_H_trial=ev.trial_accuracy, mean_rt=ev.mean_rt)
    cols = ("a", "b", "acc_undefended", "acc_h", "acc_H", "acc_H_trial", "mean_rt")
    harness.write_csv(out / "eval.csv", cols, [row])
    res = ev.outcomes
    per = [dict(index=i, label=int(te.labels[i]), prediction=int(res.predictions[i]),
                mean_rt=float(res.mean_rt[i]), forced=int(res.forced[i].sum()))
           for i in range(len(te))]
    harness.write_csv(out / "outcomes.csv", ("index", "label", "prediction", "mean_rt", "forced"),
                      per)
    print(" ".join(f"{k}={_short(v)}" for k, v in row.items()))
    return ["eval.csv", "outcomes.csv"], row


def _short(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_sweep(config, args, out):
    tr, _, te = harness.prepare_data(config)
    net = _network(config, args, tr)
    table = _table(config, args, net, tr)
    baseline = net if float(config.model.a) == 0.0 else harness.train_model(config, tr, 0.0)
    template = dataclasses.replace(AttackConfig.paper_default(config.sweep.attack),
                                   steps=config.attack.steps)
    rows = harness.epsilon_sweep(net, config.model.b, table, config.sweep.attack,
                                 config.sweep.epsilons, te, config.dddm,
                                 harness.derive_seed(config.seed, "sweep"), baseline, template,
                                 config.grid.attack_gradient)
    harness.write_csv(out / "curve.csv", harness.CURVE_COLUMNS, rows)
    rho = harness.rt_trend(rows)
    for r in rows:
        print(" ".join(f"{k}={_short(v)}" for k, v in r.items()))
    print(f"spearman(eps, mean_rt) = {rho:.3f}")
    return ["curve.csv"], {"spearman_rt": rho}


def cmd_grid(config, args, out):
    if args.attack or args.epsilon is not None:
        kinds = [args.attack] if args.attack else [a.kind for a in config.grid.attacks]
        attacks = []
        for kind in kinds:
            base = next((a for a in config.grid.attacks if a.kind == kind),
                        AttackConfig.paper_default(kind))
            if args.epsilon is not None:
                base = dataclasses.replace(base, epsilon=args.epsilon)
            attacks.append(base)
        config = config.replace(grid=dataclasses.replace(config.grid, attacks=tuple(attacks)))
    result = harness.run_grid(config)
    harness.write_csv(out / "results.csv", harness.RESULT_COLUMNS, result.rows(config.seed))
    failures = [dict(a=c.a, b=c.b, error=c.error) for c in result.cells if not c.ok]
    outputs = ["results.csv"]
    if failures:
        harness.write_csv(out / "failures.csv", ("a", "b", "error"), failures)
        outputs.append("failures.csv")
    sel = result.cell(*result.selected)
    print(f"selected (a*, b*) = {result.selected}")
    for kind, r in sel.attacks.items():
        print(f"  {kind}: H={r['acc_H']:.4f} h={r['acc_h']:.4f} "
              f"undefended={result.undefended[kind]:.4f} rt={r['mean_rt']:.2f}")
    return outputs, {"selected": list(result.selected), "undefended": result.undefended,
                     "failed_cells": len(failures)}


def cmd_ddm_sim(config, args, out):
    d = config.ddm
    if args.race:
        try:
            means = tuple(float(m) for m in args.race.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad --race: {exc}") from exc
        t_max = d.t_max if d.t_max is not None else 1.0
        rp = RaceParams(means, d.sigma, d.dt, t_max)
        t, X = simulate_race(rp, harness.derive_seed(config.seed, "race"), d.paths)
        inc = np.diff(X, axis=1).reshape(-1, X.shape[2]) / rp.dt
        drift = race_drift(means)
        rows = [dict(k=k + 1, drift_empirical=float(inc[:, k].mean()),
                     se=float(inc[:, k].std(ddof=1) / np.sqrt(len(inc))),
                     drift_expected=float(drift[k])) for k in range(X.shape[2])]
        harness.write_csv(out / "race.csv", ("k", "drift_empirical", "se", "drift_expected"), rows)
        outputs = ["race.csv"]
        if args.save_path:
            save_paths_csv(out / "race_path.csv", t, X[0])
            outputs.append("race_path.csv")
        for r in rows:
            print(" ".join(f"{k}={_short(v)}" for k, v in r.items()))
        return outputs, None
    params = DdmParams(d.mu, d.sigma, d.tau, d.A, d.dt, d.t_max)
    seed = harness.derive_seed(config.seed, "ddm")
    choices, rts = simulate_ddm_paths(params, d.paths, seed)
    hit = choices != 0
    p_up = float((choices == 1).sum() / max(hit.sum(), 1))
    row = dict(mu=d.mu, sigma=d.sigma, tau=d.tau, A=d.A, dt=d.dt, paths=d.paths,
               p_upper=p_up, p_upper_se=float(np.sqrt(p_up * (1 - p_up) / max(hit.sum(), 1))),
               p_upper_analytic=hit_probability_analytic(params),
               mean_rt=float(np.nanmean(rts)) if hit.any() else float("nan"),
               mean_rt_analytic=float(mean_rt_analytic(params)), undecided=int((~hit).sum()))
    cols = tuple(row)
    harness.write_csv(out / "ddm.csv", cols, [row])
    outputs = ["ddm.csv"]
    if args.save_path:
        res = simulate_ddm_path(params, seed, record_path=True)
        save_paths_csv(out / "ddm_path.csv", np.arange(len(res.path)) * params.dt, res.path)
        outputs.append("ddm_path.csv")
    print(" ".join(f"{k}={_short(v)}" for k, v in row.items()))
    return outputs, row


def cmd_diagnose_layers(config, args, out):
    tr, _, te = harness.prepare_data(config)
    net = _network(config, args, tr)
    cfg = _attack_config(config)
    x_adv = run_attack(net, te.features, te.labels, cfg, b=0.0).x_adv
    stats = harness.layer_sensitivity(net, te.features, x_adv)
    harness.write_csv(out / "layers.csv", harness.LAYER_COLUMNS, stats)
    for s in stats:
        print(f"layer {s['layer']} ({s['width']}): cos {s['cos_mean']:.4f}±{s['cos_std']:.4f} "
              f"L2 {s['l2_mean']:.4f}±{s['l2_std']:.4f}")
    return ["layers.csv"], None


COMMANDS = {
    "train": cmd_train,
    "build-table": cmd_build_table,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "grid": cmd_grid,
    "ddm-sim": cmd_ddm_sim,
    "diagnose-layers": cmd_diagnose_layers,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        outputs, results = COMMANDS[args.command](config, args, out)
        harness.write_manifest(out, config, args.command, outputs, results)
    except ConfigError as exc:
        print(f"dddm: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IdxParseError) as exc:
        print(f"dddm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArithmeticError as exc:
        print(f"dddm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"dddm: invalid parameter: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
