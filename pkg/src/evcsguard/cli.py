"""Command-line entry points: synth, train, tune, eval, probe-1s, mitigate-demo.

Every subcommand takes --seed, --config (JSON file whose keys override the
defaults, command-line flags win) and --out (an existing directory).
Wall-clock figures always go to a separate timing.json.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from .errors import ConfigError, DataFault, EvcsGuardError

log = logging.getLogger("evcsguard")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_text(text, path):
    with open(path, "w") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")


def _out_dir(args):
    out = args.out
    if not os.path.isdir(out):
        raise ConfigError(f"output directory does not exist: {out}")
    return out


def _need_file(path, what):
    if not path or not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _load_checkpoint(path):
    from .nn import ModelCheckpoint
    return ModelCheckpoint.load(_need_file(path, "checkpoint"))


def _load_data(path):
    from .dataset import load_dataset
    return load_dataset(_need_file(path, "dataset"))


def _test_part(ds, args):
    from .dataset import split
    if args.split == "all":
        return ds
    tr, te = split(ds, 1.0 - args.test_fraction, np.random.default_rng([args.seed, 5]))
    return tr if args.split == "train" else te


# ---- synth ------------------------------------------------------------------

def cmd_synth(args):
    from .dataset import DatasetConfig, save_dataset, synthesize_dataset
    out = _out_dir(args)
    cfg = DatasetConfig(n_normal=args.normal, n_attack=args.attack, grid=args.grid, regime=args.regime,
                        seed=args.seed, charge_rate_kW=args.charge_rate, attack_tail=args.attack_tail)
    t0 = time.perf_counter()
    ds = synthesize_dataset(cfg)
    elapsed = time.perf_counter() - t0
    path = os.path.join(out, args.name)
    save_dataset(ds, path)
    summary = {"file": args.name, "windows": len(ds.labels), "labels": ds.class_counts,
               "scenario_classes": ds.scenario_class_counts(), "bounds": list(ds.bounds),
               "regime": int(cfg.regime), "seed": args.seed}
    _dump(summary, os.path.join(out, "synth_summary.json"))
    _dump({"synthesis_time_s": elapsed}, os.path.join(out, "timing.json"))
    print(f"wrote {path}: {summary['windows']} windows, labels {summary['labels']}")


# ---- train ------------------------------------------------------------------

HP_FLAGS = ("learning_rate", "dropout", "batch", "epochs", "units1", "units2", "units3",
            "filters1", "kernel1", "filters2", "kernel2")


def _hyperparameters(args):
    from .dataset import parse_regime
    from .tuning import REFERENCE_CONFIGS
    family = args.family
    if args.hparams:
        with open(_need_file(args.hparams, "hyperparameter file")) as fh:
            hp = json.load(fh)
        hp = hp.get("params", hp)
    else:
        hp = dict(REFERENCE_CONFIGS[(family, int(parse_regime(args.regime)))])
    for k in HP_FLAGS:
        v = getattr(args, k, None)
        if v is not None:
            hp[k] = v
    return hp


def cmd_train(args):
    from .tuning import fit, format_hyperparameters
    out = _out_dir(args)
    ds = _load_data(args.data)
    train_part = _test_part(ds, argparse.Namespace(split="train", seed=args.seed, test_fraction=args.test_fraction))
    hp = _hyperparameters(args)
    ck, hist = fit(args.family, hp, train_part, seed=args.seed, log=print)
    elapsed = ck.meta.pop("training_time_s")
    ck.meta["hyperparameters"] = hp
    path = os.path.join(out, args.name)
    ck.save(path)
    _dump({"family": args.family, "hyperparameters": hp, "loss_history": hist, "n_train": len(train_part.labels)},
          os.path.join(out, "train_summary.json"))
    _write_text(format_hyperparameters({args.family: hp}), os.path.join(out, "hyperparameters.txt"))
    _dump({"training_time_s": elapsed}, os.path.join(out, "timing.json"))
    print(f"wrote {path}")


# ---- tune -------------------------------------------------------------------

def cmd_tune(args):
    from .tuning import (SearchSpace, format_hyperparameters, leaderboard_csv, random_search, refine_search,
                         validation_split)
    out = _out_dir(args)
    ds = _load_data(args.data)
    train_part = _test_part(ds, argparse.Namespace(split="train", seed=args.seed, test_fraction=args.test_fraction))
    tr, val = validation_split(train_part, args.val_fraction, args.seed)
    if args.full:
        args.n, args.refine = 500, 100
    space = SearchSpace(**args.space) if args.space else SearchSpace()
    t0 = time.perf_counter()
    best, board = random_search(space, args.family, tr, val, args.n, np.random.default_rng([args.seed, 11]),
                                seed=args.seed, log=print)
    leaderboard_csv(board, os.path.join(out, "leaderboard.csv"))
    final = best
    if args.refine > 0:
        final, board2 = refine_search(best, space, args.family, tr, val, args.refine, args.radius,
                                      np.random.default_rng([args.seed, 12]), seed=args.seed, log=print)
        leaderboard_csv(board2, os.path.join(out, "refine_leaderboard.csv"))
    elapsed = time.perf_counter() - t0
    _dump({"family": args.family, "params": final["params"], "validation_f_measure": final["f_measure"],
           "stage1_f_measure": best["f_measure"]}, os.path.join(out, "best.json"))
    _write_text(format_hyperparameters({args.family: final["params"]}), os.path.join(out, "hyperparameters.txt"))
    _dump({"search_time_s": elapsed}, os.path.join(out, "timing.json"))
    print(format_hyperparameters({args.family: final["params"]}))


# ---- eval -------------------------------------------------------------------

def _parse_confusion(text):
    if os.path.isfile(text):
        with open(text) as fh:
            d = json.load(fh)
        return {k: int(d[k]) for k in ("TP", "FN", "TN", "FP")}
    parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
    if len(parts) != 4:
        raise ConfigError("--confusion takes TP,FN,TN,FP or a JSON file")
    try:
        return dict(zip(("TP", "FN", "TN", "FP"), (int(p) for p in parts)))
    except ValueError:
        raise ConfigError(f"bad confusion counts: {text}") from None


def cmd_eval(args):
    from .tuning import evaluate, format_table, metrics_from_confusion
    out = _out_dir(args)
    names = args.names or []
    results = {}
    if args.confusion:
        for i, c in enumerate(args.confusion):
            results[names[i] if i < len(names) else f"model{i + 1}"] = metrics_from_confusion(**_parse_confusion(c))
    else:
        if not args.model or not args.data:
            raise ConfigError("eval needs --model and --data, or --confusion")
        ds = _test_part(_load_data(args.data), args)
        for i, path in enumerate(args.model):
            ck = _load_checkpoint(path)
            name = names[i] if i < len(names) else os.path.splitext(os.path.basename(path))[0]
            results[name] = evaluate(ck, ds, args.threshold)
    _dump({k: json.loads(m.to_json(include_timing=False)) for k, m in results.items()},
          os.path.join(out, "metrics.json"))
    plain = {k: m.__class__(**{**m.__dict__, "training_time": None, "mean_prediction_time": None})
             for k, m in results.items()}
    _write_text(format_table(plain), os.path.join(out, "table.txt"))
    _dump({k: {"training_time_s": m.training_time, "mean_prediction_time_s": m.mean_prediction_time}
           for k, m in results.items()}, os.path.join(out, "timing.json"))
    print(format_table(results))


# ---- probe-1s ---------------------------------------------------------------

def cmd_probe(args):
    from .dataset import DatasetConfig, save_dataset, synthesize_dataset
    from .tuning import early_detection_probe
    out = _out_dir(args)
    ck = _load_checkpoint(args.model)
    t0 = time.perf_counter()
    if args.data:
        ds = _load_data(args.data)
    else:
        ds = synthesize_dataset(DatasetConfig(n_normal=args.normal, n_attack=args.attack, grid=args.grid,
                                              regime=args.regime, seed=args.seed, attack_tail=args.tail))
        save_dataset(ds, os.path.join(out, "probe.ogds"))
    res = early_detection_probe(ck, ds, args.threshold)
    _dump(res, os.path.join(out, "probe.json"))
    _dump({"probe_time_s": time.perf_counter() - t0}, os.path.join(out, "timing.json"))
    print(f"recall {res['recall_display']}  false positives {res['false_positives']}/{res['n_normal']}")


# ---- mitigate-demo ----------------------------------------------------------

def cmd_mitigate(args):
    from .grid import build_grid
    from .mitigation import MitigationConfig, demo_attack, run_closed_loop
    out = _out_dir(args)
    m1 = _load_checkpoint(args.m1)
    m2 = _load_checkpoint(args.m2)
    model = build_grid(args.grid)
    attack = demo_attack(model, args.magnitude, args.bus, args.period, args.attack_start,
                         charge_rate_kW=args.charge_rate, horizon=args.horizon)
    cfg = MitigationConfig(horizon=args.horizon, worst_case=args.worst_case_detection, noise_cap=args.noise_cap,
                           seed=args.seed)
    t0 = time.perf_counter()
    rep = run_closed_loop(model, attack, m1, m2, cfg)
    rep.write(out)
    _dump({"closed_loop_time_s": time.perf_counter() - t0}, os.path.join(out, "timing.json"))
    s = rep.summary()
    print(f"mitigation from t={s['mitigation_start_s']:.2f}s, back in band after "
          f"{s['time_to_normal_band_s']:.2f}s, {s['delayed_request_count']} delayed requests")


# ---- parser -----------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file with option defaults")
    p.add_argument("--out", default=".", help="existing output directory")


def build_parser():
    ap = _Parser(prog="evcsguard", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="synthesise a labelled window dataset")
    _common(p)
    p.add_argument("--normal", type=int, default=1000)
    p.add_argument("--attack", type=int, default=1000)
    p.add_argument("--regime", default="attack5")
    p.add_argument("--grid", default="wscc9")
    p.add_argument("--charge-rate", type=float, default=11.0)
    p.add_argument("--attack-tail", type=float, default=None, help="seconds of attack inside each attack window")
    p.add_argument("--name", default="dataset.ogds")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one detector")
    _common(p)
    p.add_argument("--data", required=False)
    p.add_argument("--family", choices=("lstm", "convlstm"), default="convlstm")
    p.add_argument("--regime", default="attack5", help="selects the reference hyperparameters")
    p.add_argument("--hparams", help="JSON hyperparameters (e.g. tune's best.json)")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--dropout", type=float)
    for k in ("batch", "epochs", "units1", "units2", "units3", "filters1", "kernel1", "filters2", "kernel2"):
        p.add_argument(f"--{k}", type=int)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--name", default="model.ogck")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="two-stage random hyperparameter search")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--family", choices=("lstm", "convlstm"), default="convlstm")
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--refine", type=int, default=10)
    p.add_argument("--radius", type=float, default=0.10)
    p.add_argument("--full", action="store_true", help="500 + 100 trials")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--space", type=json.loads, default=None, help="JSON SearchSpace overrides")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("eval", help="metrics tables for checkpoints or confusion counts")
    _common(p)
    p.add_argument("--model", nargs="+")
    p.add_argument("--data")
    p.add_argument("--names", nargs="+")
    p.add_argument("--confusion", nargs="+", help="TP,FN,TN,FP or JSON file, one per column")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe-1s", help="early-detection probe on 1 s attack tails")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data", help="existing probe dataset; synthesised when absent")
    p.add_argument("--normal", type=int, default=500)
    p.add_argument("--attack", type=int, default=500)
    p.add_argument("--regime", default="attack5")
    p.add_argument("--grid", default="wscc9")
    p.add_argument("--tail", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("mitigate-demo", help="closed-loop detection and random-delay mitigation run")
    _common(p)
    p.add_argument("--m1", help="first detector checkpoint")
    p.add_argument("--m2", help="second detector checkpoint")
    p.add_argument("--grid", default="wscc9")
    p.add_argument("--bus", type=int, default=9)
    p.add_argument("--magnitude", type=float, default=37.5)
    p.add_argument("--period", type=float, default=2.4)
    p.add_argument("--attack-start", type=float, default=5.0)
    p.add_argument("--horizon", type=float, default=60.0)
    p.add_argument("--charge-rate", type=float, default=360.0)
    p.add_argument("--noise-cap", type=float, default=0.01)
    p.add_argument("--worst-case-detection", action="store_true",
                   help="bypass the models and start mitigation 5 s after the attack")
    p.set_defaults(func=cmd_mitigate)
    return ap


def _apply_config(parser, argv):
    """Re-parse with defaults taken from --config, so explicit flags still win."""
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        with open(_need_file(args.config, "config file")) as fh:
            try:
                cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"bad config file {args.config}: {exc}") from None
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        bad = sorted(set(cfg) - known)
        if bad:
            raise ConfigError(f"unknown config keys: {bad}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if not getattr(args, "command", None):
            parser.print_help()
            return 1
        args.func(args)
        return 0
    except EvcsGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        code = DataFault.exit_code if isinstance(exc, OSError) else ConfigError.exit_code
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
