"""Command-line entry point.

Exit codes: 0 success, 1 property failure (or other runtime error), 2 config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, checks, report
from . import config as config_mod
from .errors import ConfigError, FormatError, LabError
from .experiments import compare, evaluate, make_dataset, prune_from_base, summarize, train_full

log = logging.getLogger("loraprune_lab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _load_config(args) -> config_mod.LabConfig:
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _base_path(cfg, out: Path) -> Path:
    path = Path(cfg.prune.base) if cfg.prune.base else out / "base.ckpt"
    if not path.is_file():
        raise ConfigError(f"base checkpoint not found: {path} (run `train` first or set [prune] base)")
    return path


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out(args)
    model, rep = train_full(cfg)
    checkpoint.save(out / "base.ckpt", model, seed=cfg.seed)
    report.write_iterations(out / "train_metrics.csv", rep.rows, cfg.hash())
    report.write_json(out / "train_summary.json", {"summary": rep.summary}, cfg.hash())
    log.info("trained base model: test accuracy %.4f", rep.summary["final_accuracy"])
    print(json.dumps({"final_accuracy": rep.summary["final_accuracy"], "checkpoint": str(out / "base.ckpt")}))
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _load_config(args)
    out = _out(args)
    base = checkpoint.load(_base_path(cfg, out))
    data = make_dataset(cfg.downstream)
    model, rep = prune_from_base(base, cfg, data, cfg.seed)
    checkpoint.save(out / "pruned.ckpt", model, seed=cfg.seed)
    checkpoint.save(out / "merged.ckpt", model.merged(), seed=cfg.seed)
    report.write_iterations(out / "prune_metrics.csv", rep.rows, cfg.hash())
    events = [{"iteration": e.iteration, "target": e.target, "newly_pruned": e.newly_pruned,
               "layer_zeros": e.layer_zeros} for e in rep.events]
    report.write_json(out / "prune_summary.json", {"summary": rep.summary, "prune_events": events}, cfg.hash())
    log.info("pruned to sparsity %.4f: test accuracy %.4f", rep.summary["final_sparsity"],
             rep.summary["final_accuracy"])
    print(json.dumps({k: rep.summary[k] for k in ("final_accuracy", "final_sparsity")}))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    out = _out(args)
    base = checkpoint.load(_base_path(cfg, out))
    results = compare(cfg, base, jobs=args.jobs)
    runs = out / "runs"
    runs.mkdir(exist_ok=True)
    for r in results:
        row = r["row"]
        name = f"cell{row['cell']:03d}_{row['criterion']}_s{row['sparsity']}_seed{row['seed']}.csv"
        report.write_iterations(runs / name, r["rows"], cfg.hash())
    report.write_compare(out / "compare.csv", results, cfg.hash())
    summary = summarize(results)
    summary["cells"] = [r["row"] for r in results]
    summary["timing"] = {"wall_time_s": [r["wall_time_s"] for r in results]}
    report.write_json(out / "compare_summary.json", summary, cfg.hash())
    for g in summary["groups"]:
        print(f"{g['criterion']:<12} s={g['sparsity']:.2f}  acc={g['mean_accuracy']:.4f} "
              f"+/- {g['std_accuracy']:.4f}  (n={g['n']})")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    cfg = _load_config(args)
    oc = cfg.oracle
    if not oc.models:
        raise ConfigError("[oracle] models is empty")
    unknown = set(oc.models) - {"mlp", "transformer"}
    if unknown:
        raise ConfigError(f"[oracle] unknown models: {sorted(unknown)}")
    data = make_dataset(cfg.data)
    spec = cfg.model
    results = [
        checks.check_gradcheck_ops(oc.seeds),
        checks.check_gradcheck_models(oc.seeds, tuple(oc.models)),
        checks.check_sgd_identity(50, corrupt=oc.corrupt_gradient, seed=cfg.seed),
        checks.check_chain_rule(oc.seeds),
        checks.check_merge_equivalence(100, seed=cfg.seed),
        checks.check_exact_grad_vs_fd(oc.seeds),
    ]
    if spec.arch == "mlp":
        results.append(checks.check_loo_vs_taylor(data, spec))
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return EXIT_FAIL if failed else EXIT_OK


def _target_sparsity(model) -> float:
    if model.lora_modules():
        return model.sparsity()
    weights = [model.layers[n].weight.data for n in model.spec.target_names()]
    return float(sum(int(np.sum(w == 0)) for w in weights) / sum(w.size for w in weights))


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    path = Path(args.checkpoint) if args.checkpoint else out / "pruned.ckpt"
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    model = checkpoint.load(path)
    data = make_dataset(cfg.downstream)
    result = {
        "checkpoint": str(path),
        "test_accuracy": evaluate(model, *data.split("test")),
        "val_accuracy": evaluate(model, *data.split("val")),
        "sparsity": _target_sparsity(model),
    }
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loraprune-lab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "train": (cmd_train, "full fine-tune a base model on the source task"),
        "prune": (cmd_prune, "LoRA fine-tune and progressively prune the base model"),
        "compare": (cmd_compare, "run the criterion x sparsity x seed grid"),
        "oracle-check": (cmd_oracle_check, "run every oracle property check"),
        "eval": (cmd_eval, "evaluate a checkpoint on the downstream test split"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to a key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel grid cells (compare)")
        p.add_argument("--out", default="runs", help="output directory")
        if name == "eval":
            p.add_argument("--checkpoint", default=None, help="checkpoint to evaluate (default OUT/pruned.ckpt)")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
