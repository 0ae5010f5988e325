"""Command-line interface.

Subcommands: gen-data, train, eval, gradcheck, ablate, sweep-l,
joint-vs-separate. Every command prints a human-readable table followed by
the machine-readable CSV to stdout. Exit codes: 0 success, 2 usage error,
3 config parse error, 1 anything else (one-line ``error: ...`` message).
The SFPNET_SEED env var overrides the built-in default seed wherever a seed
is not given explicitly (flag or config file).
"""

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import kvconfig
from .data import SynthConfig, load_dataset, write_dataset
from .errors import ConfigError, SfpnetError
from .model import build_model
from .numerics import ParamStore
from .trainer import (
    GRID_VARIANTS,
    ModelConfig,
    TrainConfig,
    evaluate,
    model_config_from_file,
    model_config_to_kv_text,
    run_ablation_grid,
    run_gradcheck,
    run_joint_vs_separate,
    run_l_sweep,
    train,
    train_config_from_file,
    train_config_to_kv_text,
)

GRADCHECK_TOL = 1e-4


def default_seed():
    val = os.environ.get("SFPNET_SEED")
    return int(val) if val else 0


def _log(msg):
    print(msg, file=sys.stderr)


def _emit(table, csv_text, out_path=None):
    print(table)
    print()
    print(csv_text, end="")
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(csv_text)


def _load_synth_config(path, seed_flag):
    kv, lines = kvconfig.load_kv(path)
    cfg = SynthConfig.from_kv(kv, lines, source=str(path))
    if seed_flag is not None:
        cfg = replace(cfg, seed=seed_flag)
    elif "seed" not in kv:
        cfg = replace(cfg, seed=default_seed())
    return cfg


def _load_model_config(path):
    if path is None:
        return ModelConfig()
    return model_config_from_file(path)


def _load_train_config(path, seed_flag):
    if path is None:
        cfg = TrainConfig()
        kv = {}
    else:
        kv, lines = kvconfig.load_kv(path)
        from .trainer import train_config_from_kv

        cfg = train_config_from_kv(kv, lines, source=str(path))
    if seed_flag is not None:
        cfg = replace(cfg, seed=seed_flag)
    elif "seed" not in kv:
        cfg = replace(cfg, seed=default_seed())
    return cfg


def _load_data(data_dir):
    train_insts, test_insts, synth_cfg = load_dataset(data_dir)
    return train_insts, test_insts, synth_cfg.schema()


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    cfg = _load_synth_config(args.config, args.seed)
    train_insts, test_insts, _ = write_dataset(cfg, args.out)
    rates = {}
    for inst in train_insts:
        rates.setdefault(inst.scenario_id, []).append(inst.label)
    lines = ["scenario_id,train_rows,positive_rate"]
    table = [f"{'scenario':>9} {'rows':>8} {'pos_rate':>9}", "-" * 30]
    for sid in sorted(rates):
        rate = float(np.mean(rates[sid]))
        lines.append(f"{sid},{len(rates[sid])},{repr(rate)}")
        table.append(f"{sid:>9} {len(rates[sid]):>8} {rate:>9.4f}")
    _log(f"gen-data: wrote {len(train_insts)} train / {len(test_insts)} test rows to {args.out}")
    _emit("\n".join(table), "\n".join(lines) + "\n")
    return 0


def cmd_train(args):
    train_insts, test_insts, schema = _load_data(args.data)
    model_cfg = _load_model_config(args.model_config)
    train_cfg = _load_train_config(args.train_config, args.seed)
    model = build_model(model_cfg, schema, seed=train_cfg.seed, dtype=train_cfg.dtype)
    _log(f"train: {model.params.param_count()} parameters, {len(train_insts)} rows")
    record = train(model, train_insts, train_cfg, test_insts)
    for e, loss in enumerate(record.epoch_losses):
        _log(f"epoch {e}: mean loss {loss:.6f}")
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    model.params.save(ckpt)
    with open(os.path.join(args.out, "model-config.txt"), "w", encoding="utf-8") as fh:
        fh.write(model_config_to_kv_text(model_cfg))
    with open(os.path.join(args.out, "train-config.txt"), "w", encoding="utf-8") as fh:
        fh.write(train_config_to_kv_text(train_cfg))
    _log(f"train: checkpoint written to {ckpt} ({record.wall_time:.1f}s)")
    _emit(record.report.to_table(), record.report.to_csv(),
          os.path.join(args.out, "report.csv"))
    return 0


def _restore_model(checkpoint, model_cfg, schema):
    loaded = ParamStore.load(checkpoint)
    model = build_model(model_cfg, schema, seed=0, dtype=loaded.dtype)
    names = set(model.params.names())
    if names != set(loaded.names()):
        missing = sorted(names ^ set(loaded.names()))
        raise ConfigError(
            f"checkpoint {checkpoint} does not match the model config (mismatched: {missing[:4]}...)"
        )
    for name, arr in loaded.items():
        model.params[name][...] = arr
    return model


def cmd_eval(args):
    _, test_insts, schema = _load_data(args.data)
    cfg_path = args.model_config or os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)), "model-config.txt"
    )
    model_cfg = model_config_from_file(cfg_path)
    model = _restore_model(args.checkpoint, model_cfg, schema)
    report = evaluate(model, test_insts)
    _emit(report.to_table(), report.to_csv())
    return 0


def cmd_gradcheck(args):
    if args.dims != "tiny":
        raise ConfigError(f"gradcheck: unsupported --dims {args.dims!r} (only 'tiny')")
    errs, elapsed = run_gradcheck()
    worst = max(errs.values())
    worst_name = max(errs, key=errs.get)
    status = "PASS" if worst < GRADCHECK_TOL else "FAIL"
    lines = ["parameter,max_rel_err"]
    for name in sorted(errs, key=errs.get, reverse=True):
        lines.append(f"{name},{repr(errs[name])}")
    table = (
        f"gradcheck dims=tiny params={len(errs)} elapsed={elapsed:.1f}s\n"
        f"max_rel_err={worst:.3e} (worst: {worst_name}) threshold={GRADCHECK_TOL:.0e} {status}"
    )
    _emit(table, "\n".join(lines) + "\n")
    return 0 if status == "PASS" else 1


def _seeds(arg):
    return tuple(int(s) for s in arg.split(","))


def cmd_ablate(args):
    train_insts, test_insts, schema = _load_data(args.data)
    model_cfg = _load_model_config(args.model_config)
    train_cfg = _load_train_config(args.train_config, None)
    variants = tuple(args.variants.split(",")) if args.variants else GRID_VARIANTS
    result = run_ablation_grid(
        train_insts, test_insts, schema, model_cfg, train_cfg,
        seeds=_seeds(args.seeds), variants=variants, log=_log,
    )
    out_path = None
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        out_path = os.path.join(args.out, "ablation.csv")
    _emit(result.to_table(), result.to_csv(), out_path)
    return 0


def cmd_sweep_l(args):
    train_insts, test_insts, schema = _load_data(args.data)
    model_cfg = _load_model_config(args.model_config)
    train_cfg = _load_train_config(args.train_config, None)
    values = [int(v) for v in args.values.split(",")]
    result = run_l_sweep(
        train_insts, test_insts, schema, model_cfg, train_cfg,
        l_values=values, seeds=_seeds(args.seeds), log=_log,
    )
    out_path = None
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        out_path = os.path.join(args.out, "l-sweep.csv")
    _emit(result.to_table(), result.to_csv(), out_path)
    return 0


def cmd_joint_vs_separate(args):
    train_insts, test_insts, schema = _load_data(args.data)
    model_cfg = _load_model_config(args.model_config)
    train_cfg = _load_train_config(args.train_config, None)
    result = run_joint_vs_separate(
        train_insts, test_insts, schema, model_cfg, train_cfg,
        seeds=_seeds(args.seeds), log=_log,
    )
    out_path = None
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        out_path = os.path.join(args.out, "joint-vs-separate.csv")
    _emit(result.to_table(), result.to_csv(), out_path)
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sfpnet",
        description="Multi-scenario CTR ranking experiments on synthetic data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--config", required=True, help="SynthConfig key=value file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--model-config", default=None)
    p.add_argument("--train-config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model-config", default=None,
                   help="defaults to model-config.txt next to the checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--dims", default="tiny")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--model-config", default=None)
    p.add_argument("--train-config", default=None)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--variants", default=None, help="comma-separated subset of the grid")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-l", help="sweep the block count")
    p.add_argument("--values", required=True, help="comma-separated L values")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--model-config", default=None)
    p.add_argument("--train-config", default=None)
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_sweep_l)

    p = sub.add_parser("joint-vs-separate", help="joint vs per-scenario training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--model-config", default=None)
    p.add_argument("--train-config", default=None)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.set_defaults(func=cmd_joint_vs_separate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except SfpnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
