"""Command-line entry point.

Subcommands: generate, train, evaluate, finetune, matrix, params, timeit,
gradcheck, viz.  Every subcommand accepts `--config FILE` holding flat
key=value lines (# comments allowed); explicit flags override file values,
and the effective configuration is echoed into the command's output.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import cell, gradcheck, microgen, trainer, viz


def _load_config_file(path) -> dict:
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _resolve(args: argparse.Namespace, spec: dict) -> dict:
    """Merge CLI flags over config-file values over defaults."""
    file_values = _load_config_file(args.config) if args.config else {}
    effective = {}
    for name, (typ, default) in spec.items():
        cli_value = getattr(args, name, None)
        if cli_value is not None:
            effective[name] = cli_value
        elif name in file_values:
            raw = file_values[name]
            effective[name] = (raw.lower() in ("1", "true", "yes")) if typ is bool else typ(raw)
        else:
            effective[name] = default
    return effective


def _echo(cfg: dict) -> str:
    text = "config: " + " ".join(f"{k}={v}" for k, v in sorted(cfg.items()))
    print(text)
    return text


def _add(parser: argparse.ArgumentParser, spec: dict):
    for name, (typ, default) in spec.items():
        flag = "--" + name.replace("_", "-")
        if typ is bool:
            parser.add_argument(flag, action="store_const", const=True, default=None,
                                help=f"(default {default})")
        else:
            parser.add_argument(flag, type=typ, default=None, help=f"(default {default})")


GENERATE_SPEC = {"condition": (str, "cogent-a"), "n": (int, 1000), "out": (str, ""),
                 "seed": (int, 0), "grid": (str, "6x6"), "min_objects": (int, 2),
                 "max_objects": (int, 6), "mix": (str, "")}

TRAIN_SPEC = {"corpus": (str, ""), "out": (str, ""), "variant": (str, "smac"),
              "d": (int, 64), "p": (int, 4), "epochs": (int, 15),
              "batch_size": (int, 64), "lr": (float, 1e-4), "seed": (int, 0),
              "split_ratio": (float, 0.9)}

EVAL_SPEC = {"checkpoint": (str, ""), "corpus": (str, ""), "report": (str, ""),
             "train_condition": (str, "")}

FINETUNE_SPEC = {"checkpoint": (str, ""), "corpus": (str, ""), "out": (str, ""),
                 "epochs": (int, 10), "lr": (float, None), "seed": (int, None)}

PARAMS_SPEC = {"variant": (str, "smac"), "d": (int, 512)}

TIMEIT_SPEC = {"d": (int, 512), "p": (int, 6), "batch_size": (int, 32),
               "steps": (int, 30), "seed": (int, 0)}

GRADCHECK_SPEC = {"variant": (str, "smac"), "d": (int, 8), "p": (int, 2),
                  "coords": (int, 200), "seed": (int, 0), "tolerance": (float, 1e-4)}

MATRIX_SPEC = {"data_dir": (str, ""), "out": (str, ""), "variants": (str, "smac,mac"),
               "n_train": (int, 20000), "n_test": (int, 4000), "epochs": (int, 15),
               "finetune_epochs": (int, 10), "ft_ratio": (float, 0.2), "seed": (int, 0),
               "d": (int, 64), "p": (int, 4), "batch_size": (int, 64), "lr": (float, 1e-4)}

VIZ_SPEC = {"checkpoint": (str, ""), "corpus": (str, ""), "sample_id": (str, ""),
            "out": (str, "attention")}


def _require(cfg: dict, *names):
    for name in names:
        if not cfg[name]:
            print(f"error: missing required option --{name.replace('_', '-')}",
                  file=sys.stderr)
            raise SystemExit(2)


def _parse_mix(text: str) -> dict:
    if not text:
        return None
    mix = {}
    for part in text.split(","):
        cat, _, weight = part.partition(":")
        mix[cat.strip()] = float(weight) if weight else 1.0
    return mix


def cmd_generate(args):
    cfg = _resolve(args, GENERATE_SPEC)
    _require(cfg, "out")
    _echo(cfg)
    H, W = (int(x) for x in cfg["grid"].split("x"))
    gen_cfg = microgen.GenConfig(H, W, cfg["min_objects"], cfg["max_objects"])
    scenes, questions = microgen.build_dataset(
        cfg["condition"], cfg["n"], cfg["out"], cfg["seed"], gen_cfg,
        mix=_parse_mix(cfg["mix"]))
    print(f"wrote {scenes}")
    print(f"wrote {questions}")
    return 0


def _train_config(cfg: dict) -> trainer.TrainConfig:
    return trainer.TrainConfig(variant=cfg["variant"], d=cfg["d"], p=cfg["p"],
                               batch_size=cfg["batch_size"], lr=cfg["lr"],
                               epochs=cfg["epochs"], seed=cfg["seed"],
                               split_ratio=cfg.get("split_ratio", 0.9))


def cmd_train(args):
    cfg = _resolve(args, TRAIN_SPEC)
    _require(cfg, "corpus", "out")
    _echo(cfg)
    corpus = microgen.load_corpus(cfg["corpus"])

    def log(record):
        val = f" val_acc={record['val_acc']:.4f}" if "val_acc" in record else ""
        print(f"epoch {record['epoch']}: loss={record['train_loss']:.4f}"
              f" time={record['epoch_time']:.1f}s{val}")

    ckpt, metrics = trainer.train(_train_config(cfg), corpus, log=log)
    trainer.save_checkpoint(ckpt, cfg["out"])
    print(f"saved {cfg['out']} (validation accuracy {metrics.accuracy:.4f})")
    return 0


def _print_metrics(metrics: trainer.Metrics):
    print(f"accuracy={metrics.accuracy:.4f} loss={metrics.loss:.4f} n={metrics.n}")
    for cat in sorted(metrics.per_category):
        hit, total = metrics.per_category[cat]
        print(f"  {cat}: {hit}/{total} ({hit / total:.4f})")


def cmd_evaluate(args):
    cfg = _resolve(args, EVAL_SPEC)
    _require(cfg, "checkpoint", "corpus")
    _echo(cfg)
    ckpt = trainer.load_checkpoint(cfg["checkpoint"])
    corpus = microgen.load_corpus(cfg["corpus"])
    metrics = trainer.evaluate(ckpt, corpus)
    _print_metrics(metrics)
    if cfg["report"]:
        report = viz.failure_report(ckpt, corpus, cfg["train_condition"])
        Path(cfg["report"]).write_text(report.format())
        print(f"wrote {cfg['report']}")
    return 0


def cmd_finetune(args):
    cfg = _resolve(args, FINETUNE_SPEC)
    _require(cfg, "checkpoint", "corpus", "out")
    _echo(cfg)
    ckpt = trainer.load_checkpoint(cfg["checkpoint"])
    shard = microgen.load_corpus(cfg["corpus"])
    tuned, metrics = trainer.finetune(ckpt, shard, epochs=cfg["epochs"],
                                      lr=cfg["lr"], seed=cfg["seed"])
    trainer.save_checkpoint(tuned, cfg["out"])
    print(f"saved {cfg['out']} (shard accuracy {metrics.accuracy:.4f})")
    return 0


def cmd_params(args):
    cfg = _resolve(args, PARAMS_SPEC)
    variant = cell.MacVariant.parse(cfg["variant"])
    counts = cell.count_parameters(variant, cfg["d"])
    print(f"{cfg['variant']} d={cfg['d']} position-independent parameters:")
    print(f"  control {counts['control']:,} / read {counts['read']:,}"
          f" / write {counts['write']:,}")
    if variant is cell.MacVariant.SIMPLIFIED:
        cuts = cell.reduction_percent(cfg["d"])
        print(f"  reduction vs original: control {cuts['control']}%"
              f" / read {cuts['read']}% / write {cuts['write']}%")
    return 0


def cmd_timeit(args):
    cfg = _resolve(args, TIMEIT_SPEC)
    _echo(cfg)
    results = {}
    for variant in ("mac", "smac"):
        results[variant] = trainer.measure_step_time(
            variant, d=cfg["d"], p=cfg["p"], batch_size=cfg["batch_size"],
            n_steps=cfg["steps"], seed=cfg["seed"])
        r = results[variant]
        print(f"{variant}: median {1000 * r['median']:.1f} ms"
              f" mean {1000 * r['mean']:.1f} ms [{r['fingerprint']}]")
    ratio = results["smac"]["median"] / results["mac"]["median"]
    print(f"smac/mac median step-time ratio: {ratio:.3f}"
          f" ({100 * (1 - ratio):.1f}% reduction)")
    return 0


def cmd_gradcheck(args):
    cfg = _resolve(args, GRADCHECK_SPEC)
    _echo(cfg)
    worst = gradcheck.end_to_end_check(cfg["variant"], d=cfg["d"], p=cfg["p"],
                                       n_coords=cfg["coords"], seed=cfg["seed"])
    ok = worst < cfg["tolerance"]
    print(f"max relative gradient error: {worst:.3e}"
          f" ({'PASS' if ok else 'FAIL'} at {cfg['tolerance']:.0e})")
    return 0 if ok else 1


def _ensure_corpus(data_dir: Path, name: str, condition: str, n: int, seed: int):
    directory = data_dir / name
    if not (directory / "questions.txt").exists():
        microgen.build_dataset(condition, n, directory, seed)
    return str(directory)


def build_standard_plan(data_dir, variants, n_train: int, n_test: int,
                        ft_ratio: float, seed: int) -> trainer.ExperimentPlan:
    """Desk-scale analog of the published train/fine-tune/test matrix.

    Rows (b)-(j) per variant: in-condition baselines, CLEVR-trained
    zero-shot transfer, A-trained zero-shot on B, A-trained fine-tuned on
    a B shard, and the CLEVR-trained fine-tune-on-B pitfall rows.
    """
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    clevr_train = _ensure_corpus(data_dir, "clevr-train", "clevr", n_train, seed + 1)
    clevr_test = _ensure_corpus(data_dir, "clevr-test", "clevr", n_test, seed + 2)
    a_train = _ensure_corpus(data_dir, "cogent-a-train", "cogent-a", n_train, seed + 3)
    a_test = _ensure_corpus(data_dir, "cogent-a-test", "cogent-a", n_test, seed + 4)
    b_pool = _ensure_corpus(data_dir, "cogent-b-pool", "cogent-b", n_test, seed + 5)

    b_ft_dir = data_dir / "cogent-b-finetune"
    b_test_dir = data_dir / "cogent-b-test"
    if not (b_ft_dir / "questions.txt").exists():
        pool = microgen.load_corpus(b_pool)
        ft_shard, heldout = trainer.split_corpus(pool, ft_ratio, seed + 6)
        microgen.write_corpus(ft_shard, b_ft_dir)
        microgen.write_corpus(heldout, b_test_dir)

    plan = trainer.ExperimentPlan()
    for variant in variants:
        rows = [
            ("b", clevr_train, "", [("clevr-test", clevr_test)]),
            ("c", a_train, "", [("cogent-a-test", a_test)]),
            ("d", clevr_train, "", [("cogent-a-test", a_test)]),
            ("e", clevr_train, "", [("cogent-b-test", str(b_test_dir))]),
            ("f", a_train, "", [("cogent-b-test", str(b_test_dir))]),
            ("g", a_train, str(b_ft_dir), [("cogent-a-test", a_test)]),
            ("h", a_train, str(b_ft_dir), [("cogent-b-test", str(b_test_dir))]),
            ("i", clevr_train, str(b_ft_dir), [("cogent-a-test", a_test)]),
            ("j", clevr_train, str(b_ft_dir), [("cogent-b-test", str(b_test_dir))]),
        ]
        for label, train_dir, ft_dir, tests in rows:
            plan.rows.append(trainer.PlanRow(label, variant, train_dir, ft_dir, tests))
    return plan


def cmd_matrix(args):
    cfg = _resolve(args, MATRIX_SPEC)
    _require(cfg, "data_dir", "out")
    echo = _echo(cfg)
    variants = [v.strip() for v in cfg["variants"].split(",") if v.strip()]
    plan = build_standard_plan(cfg["data_dir"], variants, cfg["n_train"],
                               cfg["n_test"], cfg["ft_ratio"], cfg["seed"])
    config = trainer.TrainConfig(d=cfg["d"], p=cfg["p"], batch_size=cfg["batch_size"],
                                 lr=cfg["lr"], epochs=cfg["epochs"], seed=cfg["seed"])
    results = trainer.run_experiment_matrix(plan, config, cfg["finetune_epochs"],
                                            work_dir=cfg["data_dir"])
    report = echo + "\n" + trainer.format_report(results)
    Path(cfg["out"]).write_text(report)
    print(report)
    print(f"wrote {cfg['out']}")
    return 0


def cmd_viz(args):
    cfg = _resolve(args, VIZ_SPEC)
    _require(cfg, "checkpoint", "corpus")
    _echo(cfg)
    ckpt = trainer.load_checkpoint(cfg["checkpoint"])
    corpus = microgen.load_corpus(cfg["corpus"])
    if cfg["sample_id"]:
        matches = [s for s in corpus.samples if s.question_id == cfg["sample_id"]]
        if not matches:
            print(f"error: sample {cfg['sample_id']!r} not in corpus", file=sys.stderr)
            return 1
        sample = matches[0]
    else:
        sample = corpus.samples[0]
    dump = viz.trace_sample(ckpt, corpus, sample)
    record = viz.write_dump(dump, cfg["out"])
    print(f"sample {dump.sample_id}: predicted={dump.predicted} gold={dump.gold}")
    print(f"wrote {record} and {dump.steps} heatmaps in {cfg['out']}")
    return 0


COMMANDS = {
    "generate": (cmd_generate, GENERATE_SPEC, "build a synthetic corpus"),
    "train": (cmd_train, TRAIN_SPEC, "train a model on a corpus"),
    "evaluate": (cmd_evaluate, EVAL_SPEC, "evaluate a checkpoint"),
    "finetune": (cmd_finetune, FINETUNE_SPEC, "continue training on a shard"),
    "matrix": (cmd_matrix, MATRIX_SPEC, "run the full experiment matrix"),
    "params": (cmd_params, PARAMS_SPEC, "print per-unit parameter counts"),
    "timeit": (cmd_timeit, TIMEIT_SPEC, "paired per-step timing of both variants"),
    "gradcheck": (cmd_gradcheck, GRADCHECK_SPEC, "finite-difference gradient check"),
    "viz": (cmd_viz, VIZ_SPEC, "dump attention traces and heatmaps"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="macnet",
                                     description="MAC / S-MAC reasoning cells at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, spec, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=str, default=None,
                       help="flat key=value config file; flags override it")
        _add(p, spec)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except SystemExit:
        raise
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
