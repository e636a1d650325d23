"""Command-line entry point: ``caperec {gen-data,train,eval,gradcheck}``.

Precedence for every setting is flag > config file > built-in default.
"""

import argparse
import json
import logging
import os
import sys

from . import gradcheck
from .data import SyntheticSpec, write_synthetic
from .errors import CapeError, ConfigError
from .experiment import (
    RunConfig,
    evaluate_checkpoint,
    load_run_config,
    run_config_from_dict,
    run_training,
    timestamp,
    valid_names_message,
)

logger = logging.getLogger("caperec")


def _shared(p):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int, help="64-bit seed; overrides the config")
    p.add_argument("--out", help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="caperec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic intent-segmented dataset")
    _shared(p)
    p.add_argument("--users", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--intents", type=int)
    p.add_argument("--items-per-intent", type=int)
    p.add_argument("--context-length", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--segment-length", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--noise", type=float)

    p = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    _shared(p)
    p.add_argument("--backbone", help="din or sasrec")
    p.add_argument("--variant", help="none, naive, rope, cope or cape")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a CSV dataset")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="CSV file in the dataset schema")
    p.add_argument("--split", default="eval", help="label used in the output file name")

    p = sub.add_parser("gradcheck", help="finite-difference check of all parameter gradients")
    _shared(p)
    p.add_argument("--combo", action="append", help=f"e.g. din+cape; repeatable (default: all {len(gradcheck.COMBOS)})")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    return parser


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def cmd_gen_data(args):
    raw = {}
    if args.config:
        raw = dict(_read_json(args.config).get("synthetic") or {})
    flags = {
        "n_users": args.users,
        "n_items": args.items,
        "n_intents": args.intents,
        "items_per_intent": args.items_per_intent,
        "context_length_range": args.context_length,
        "segment_length_range": args.segment_length,
        "noise_rate": args.noise,
        "seed": args.seed,
    }
    raw.update({k: v for k, v in flags.items() if v is not None})
    if args.items_per_intent is None and (args.intents is not None or args.items is not None):
        raw["items_per_intent"] = None  # re-derive from the overridden sizes
    spec = SyntheticSpec(**raw)
    out = args.out or "data"
    path = write_synthetic(spec, out)
    print(f"wrote {path} and {os.path.join(out, 'spec.json')}")
    return 0


def _run_config(args):
    if args.config:
        cfg = load_run_config(args.config)
    else:
        cfg = run_config_from_dict({"synthetic": {}})
    if args.seed is not None:
        cfg.train.seed = args.seed
        if cfg.synthetic is not None:
            cfg.synthetic.seed = args.seed
    if getattr(args, "backbone", None):
        cfg.model.backbone = args.backbone
    if getattr(args, "variant", None):
        cfg.model.pe.variant = args.variant
    if getattr(args, "epochs", None):
        cfg.train.max_epochs = args.epochs
    if getattr(args, "lr", None) is not None:
        cfg.train.learning_rate = args.lr
    if getattr(args, "batch_size", None):
        cfg.train.batch_size = args.batch_size
    if args.out:
        cfg.out = args.out
    return cfg


def cmd_train(args):
    cfg = _run_config(args)
    errs = cfg.problems()
    if errs:
        if any("variant" in e or "backbone" in e for e in errs):
            errs.append(valid_names_message())
        raise ConfigError("invalid run config:\n  " + "\n  ".join(errs))
    out = cfg.out or "runs/latest"
    _, result, report = run_training(cfg, out)
    print(json.dumps({"best_epoch": result.best_epoch, "seed": cfg.train.seed, **report["metrics"]["test"]}, sort_keys=True))
    print(f"wrote {out}/model.ckpt, metrics.jsonl, report.json")
    return 0


def cmd_eval(args):
    for path in (args.checkpoint, args.data):
        if not os.path.exists(path):
            raise FileNotFoundError(f"no such file: {path}")
    model_cfg = train_cfg = None
    if args.config:
        cfg: RunConfig = load_run_config(args.config)
        model_cfg = cfg.model
        train_cfg = cfg.train
        if args.seed is not None:
            train_cfg.seed = args.seed
    report = evaluate_checkpoint(args.checkpoint, args.data, model_cfg, train_cfg)
    row = report.to_dict()
    print(json.dumps(row, sort_keys=True))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, f"eval_{args.split}.json")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(dict(row, meta={"timestamp": timestamp()}), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_gradcheck(args):
    combos = args.combo or gradcheck.COMBOS
    unknown = [c for c in combos if c not in gradcheck.COMBOS]
    if unknown:
        raise ConfigError(f"unknown combo(s) {unknown}; choose from {', '.join(gradcheck.COMBOS)}")
    results = gradcheck.run(combos, args.tolerance, args.step, args.seed or 0)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.combo:<14} max_rel_err={r.max_rel_error:.3e} (tol {r.tolerance:g}) "
              f"worst={r.worst_param} params={r.n_checked} {r.seconds:.1f}s")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} combinations passed")
    return 1 if failed else 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
