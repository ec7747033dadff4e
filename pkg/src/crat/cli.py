"""Command-line entry point: ``crat <subcommand> [options]``.

Every subcommand writes into ``--out`` (the run directory): the resolved
``config.json`` plus its logs, ``ckpt/`` files and ``report.json``.
Failures print one JSON object on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as data_mod
from .config import ExperimentConfig
from .errors import ConfigError, CratError

EXIT_ERROR, EXIT_CONFIG, EXIT_USAGE = 1, 2, 64


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _fail(kind: str, message: str, pointer: Optional[str] = None) -> None:
    sys.stderr.write(json.dumps({"error": kind, "pointer": pointer, "message": message}) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _setup(args) -> tuple[ExperimentConfig, Path]:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    cfg = cfg.override(seed=args.seed, family=getattr(args, "family", None), episodes=getattr(args, "episodes", None))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    return cfg, out


def _dataset(cfg: ExperimentConfig, path: Optional[str]) -> data_mod.LabeledDataset:
    if path:
        return data_mod.load(path)
    d = cfg.data
    return data_mod.generate_synthetic(
        int(d["classes"]), int(d["per_class"]), int(d["H"]), np.random.default_rng(int(d["seed"])), cfg.split_map()
    )


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    cfg, out = _setup(args)
    ds = _dataset(cfg, None)
    data_mod.save(ds, out / "dataset.crat")
    _write_json(out / "report.json", {"images": len(ds), "shape": list(ds.image_shape), "split": {str(k): v for k, v in ds.split.items()}, "config": cfg.doc})


def cmd_train(args) -> None:
    from .model import save_checkpoint
    from .train import Trainer, rotation_accuracy, write_log

    cfg, out = _setup(args)
    ds = _dataset(cfg, args.data)
    trainer = Trainer(cfg.train_config(), ds, phase="phase1", widths=cfg.widths).run()
    ckpt = trainer.checkpoint()
    ckpt.extra["experiment"] = cfg.doc
    (out / "ckpt").mkdir(exist_ok=True)
    save_checkpoint(ckpt, out / "ckpt" / "phase1.crck")
    write_log(trainer.log, out / "train.log.jsonl")
    report = {
        "phase": "phase1",
        "parameters": trainer.model.parameter_count(),
        "final_epoch": trainer.log[-1],
        "config": cfg.doc,
    }
    if trainer.model.has_comp_head:
        report["rotation_accuracy"] = rotation_accuracy(trainer.model, ds, trainer.config.family)
    _write_json(out / "report.json", report)


def cmd_distill(args) -> None:
    from .model import load_checkpoint, save_checkpoint
    from .train import distill_phase2, model_config_for

    cfg, out = _setup(args)
    ds = _dataset(cfg, args.data)
    tcfg = cfg.train_config()
    teacher = load_checkpoint(args.teacher, expected=model_config_for(tcfg, ds, cfg.widths))
    student, logs = distill_phase2(tcfg, ds, teacher)
    student.extra["experiment"] = cfg.doc
    (out / "ckpt").mkdir(exist_ok=True)
    save_checkpoint(student, out / "ckpt" / f"{student.phase}.crck")
    records = [{"generation": g + 1, **rec} for g, log in enumerate(logs) for rec in log]
    (out / "train.log.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    _write_json(out / "report.json", {"phase": student.phase, "final_epoch": logs[-1][-1], "config": cfg.doc})


def cmd_eval(args) -> None:
    from .fewshot import evaluate
    from .model import load_checkpoint

    cfg, out = _setup(args)
    ds = _dataset(cfg, args.data)
    model = load_checkpoint(args.checkpoint).model
    e = cfg.eval
    report = evaluate(model, ds, "novel", e["N"], e["K"], e["Q"], e["episodes"], e["head"], e["seed"])
    _write_json(out / "report.json", {**report.to_dict(), "experiment": cfg.doc})


def cmd_ablate(args) -> None:
    from .fewshot import ablate_families, ablation_csv
    from .model import save_checkpoint
    from .train import Trainer, write_log

    cfg, out = _setup(args)
    ds = _dataset(cfg, args.data)
    (out / "ckpt").mkdir(exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [int(cfg.doc["train"]["seed"])]

    def train_fn(tcfg, data):
        trainer = Trainer(tcfg, data, phase="phase1", widths=cfg.widths).run()
        tag = f"{tcfg.family or 'none'}-seed{tcfg.seed}"
        save_checkpoint(trainer.checkpoint(), out / "ckpt" / f"{tag}.crck")
        write_log(trainer.log, out / f"train.{tag}.log.jsonl")
        return trainer.model

    rows = ablate_families(
        cfg.train_config(), ds, seeds=seeds, episodes=int(cfg.eval["episodes"]), Q=int(cfg.eval["Q"]),
        eval_seed=int(cfg.eval["seed"]), train_fn=train_fn,
        progress=(lambda msg: sys.stderr.write(msg + "\n")) if args.verbose else None,
    )
    (out / "ablation.csv").write_text(ablation_csv(rows))
    _write_json(out / "report.json", {"rows": [r.to_dict() for r in rows], "seeds": seeds, "config": cfg.doc})


def cmd_inspect(args) -> None:
    from .transforms import TransformFamily, all_classes, apply

    cfg, out = _setup(args)
    ds = _dataset(cfg, args.data)
    if not 0 <= args.index < len(ds):
        raise _UsageError(f"--index {args.index} outside [0, {len(ds)})")
    fam = TransformFamily.parse(args.family or cfg.doc["train"]["family"] or "VS16")
    img, label = ds.images[args.index], int(ds.labels[args.index])
    split = {label: ds.split[label]}

    def single(arr):
        return data_mod.LabeledDataset(arr[None], np.array([label]), split)

    data_mod.save(single(img), out / "source.crat")
    entries = []
    for cls in all_classes(fam):
        name = f"variant_{cls.index:04d}.crat"
        data_mod.save(single(apply(cls, img)), out / name)
        entries.append({"index": cls.index, "file": name, **{k: list(v) if isinstance(v, tuple) else v for k, v in cls.decompose().items()}})
    _write_json(out / "index.json", {"family": fam.tag, "cardinality": fam.cardinality, "source_index": args.index, "label": label, "variants": entries})


def cmd_gradcheck(args) -> int:
    from .autodiff.suite import run_suite

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_suite(seed=args.seed or 0, instances=args.instances)
    by_op: dict[str, float] = {}
    for r in results:
        op = r.name.split("[")[0]
        by_op[op] = max(by_op.get(op, 0.0), r.max_rel_error)
    failed = sorted(op for op, err in by_op.items() if not err < args.tol)
    _write_json(
        out / "report.json",
        {"tolerance": args.tol, "ops": by_op, "passed": not failed, "instances": [r.as_dict() for r in results]},
    )
    if failed:
        _fail("GradientCheckFailed", f"ops above tolerance {args.tol}: {', '.join(failed)}")
        return EXIT_ERROR
    return 0


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        if data:
            sp.add_argument("--data", help="dataset file (default: generate from the config)")
        return sp

    common(sub.add_parser("gen-data", help="write a synthetic dataset"), data=False).set_defaults(fn=cmd_gen_data)
    sp = common(sub.add_parser("train", help="phase-1 training"))
    sp.add_argument("--family", help="transform family or 'none'")
    sp.set_defaults(fn=cmd_train)
    sp = common(sub.add_parser("distill", help="phase-2 self-distillation"))
    sp.add_argument("--teacher", required=True, help="teacher checkpoint")
    sp.add_argument("--family", help="transform family or 'none'")
    sp.set_defaults(fn=cmd_distill)
    sp = common(sub.add_parser("eval-fewshot", help="episodic evaluation"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--episodes", type=int)
    sp.set_defaults(fn=cmd_eval)
    sp = common(sub.add_parser("ablate", help="train and evaluate every transform family"))
    sp.add_argument("--seeds", help="comma-separated training seeds")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--verbose", action="store_true", help="progress lines on stderr")
    sp.set_defaults(fn=cmd_ablate)
    sp = common(sub.add_parser("inspect-transform", help="dump every variant of one image"))
    sp.add_argument("--family")
    sp.add_argument("--index", type=int, default=0, help="dataset image to transform")
    sp.set_defaults(fn=cmd_inspect)
    sp = sub.add_parser("gradcheck", help="finite-difference check of every op")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--instances", type=int, default=3)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args) or 0
    except _UsageError as exc:
        _fail("UsageError", str(exc))
        return EXIT_USAGE
    except ConfigError as exc:
        _fail("ConfigError", exc.message, exc.pointer)
        return EXIT_CONFIG
    except CratError as exc:
        _fail(type(exc).__name__, str(exc))
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        _fail(type(exc).__name__, str(exc))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
