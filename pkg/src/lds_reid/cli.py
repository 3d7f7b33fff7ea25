"""Command line entry point: ``lds-reid {toygen,train,eval,export-features,presets}``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import PRESET_NAMES, ConfigError, RunConfig, apply_overrides, from_dict, load_config, preset_dict
from .data import MARKET_DIRS, DatasetError, save_toy_dataset
from .evaluation import extract_features, pairwise_distances, evaluate_cmc_map
from .pipeline import load_datasets, load_trained, train_run, write_metrics

OUTPUT_ROOT_ENV = "LDS_REID_OUTPUT_ROOT"
log = logging.getLogger("lds_reid")


class ValidationError(Exception):
    pass


def _default_out(name: str) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / name


def _read_config(args) -> RunConfig:
    if getattr(args, "preset", None):
        data = preset_dict(args.preset)
    elif getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
    else:
        data = {}
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("train", {})["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides.setdefault("train", {})["epochs"] = args.epochs
    if getattr(args, "max_iterations", None) is not None:
        overrides.setdefault("train", {})["max_iterations"] = args.max_iterations
    return from_dict(RunConfig, apply_overrides(data, overrides))


def cmd_toygen(args) -> int:
    config = load_config(args.config) if args.config else RunConfig()
    seed = args.seed if args.seed is not None else config.data.toy_seed
    out = Path(args.out) if args.out else _default_out(f"toy-seed{seed}")
    save_toy_dataset(out, config.data.toy, seed)
    print(out)
    return 0


def cmd_train(args) -> int:
    config = _read_config(args)
    if args.data:
        _check_market_dir(args.data)
    out = Path(args.out) if args.out else _default_out(config.name.replace("(", "-").replace(")", ""))
    _, _, report = train_run(config, out, data_root=args.data)
    if report is not None:
        print(json.dumps(report.to_json(), sort_keys=True))
    return 0


def _check_market_dir(root):
    for sub in MARKET_DIRS.values():
        if not (Path(root) / sub).is_dir():
            raise ValidationError(f"missing directory {Path(root) / sub}")


def _load_for_eval(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists() and not ckpt.with_suffix(".pt").exists():
        raise ValidationError(f"checkpoint not found: {ckpt}")
    model, config = load_trained(ckpt)
    if getattr(args, "config", None):
        override = load_config(args.config)
        config.eval = override.eval
    if args.data:
        _check_market_dir(args.data)
    return model, config


def cmd_eval(args) -> int:
    model, config = _load_for_eval(args)
    _, query, gallery = load_datasets(config, args.data)
    qf = extract_features(model, query, config.augment, config.eval.batch_size)
    gf = extract_features(model, gallery, config.augment, config.eval.batch_size)
    report = evaluate_cmc_map(pairwise_distances(qf, gf, config.eval.metric),
                              qf.identities, qf.cameras, gf.identities, gf.cameras)
    ckpt = Path(args.checkpoint)
    out = Path(args.out) if args.out else ckpt.with_name(ckpt.stem + "_metrics.json")
    text = write_metrics(out, report)
    sys.stdout.write(text)
    return 0


def cmd_export(args) -> int:
    model, config = _load_for_eval(args)
    splits = dict(zip(("train", "query", "gallery"), load_datasets(config, args.data)))
    table = extract_features(model, splits[args.split], config.augment, config.eval.batch_size)
    ckpt = Path(args.checkpoint)
    out = Path(args.out) if args.out else ckpt.with_name(f"{ckpt.stem}_{args.split}_features")
    print(table.save(out))
    return 0


def cmd_presets(args) -> int:
    for name, fname in PRESET_NAMES.items():
        print(f"{name}\t{fname}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lds-reid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toygen", help="write a synthetic toy dataset in Market1501 layout")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_toygen)

    p = sub.add_parser("train", help="train a model and write a run directory")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--preset", choices=list(PRESET_NAMES))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--data", help="Market1501-layout directory (default: config data section)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-iterations", type=int, dest="max_iterations")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("export-features", cmd_export, "export a feature table")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--config", help="optional config whose eval section overrides the checkpoint's")
        p.add_argument("--data")
        p.add_argument("--out")
        if name == "export-features":
            p.add_argument("--split", choices=("train", "query", "gallery"), default="gallery")
        p.set_defaults(func=func)

    p = sub.add_parser("presets", help="list the shipped ablation presets")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("command failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
