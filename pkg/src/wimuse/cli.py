"""Command-line surface.

Subcommands: synth, import, split, train-sts, train-mts, extend, eval,
profile, ablate, sweep, report. Every flag can also come from a YAML/JSON
config file (--config); explicit command-line values win. Exits 0 on success
and 1 with a one-line machine-parseable error otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import (
    import_aril,
    import_npz,
    load_dataset,
    resample_dataset,
    split_dataset,
    write_dataset,
    TaskSpec,
)
from .evaluation import ComplexityReport, evaluate, profile
from .experiments import AblationConfig, ExperimentResult, SweepConfig, run_ablation, run_ratio_sweep
from .losses import HyperParams
from .models import build_model, extend_with_task
from .reporting import emit_report
from .synth import SynthConfig, synth_dataset
from .training import TrainConfig, train_extension, train_mts, train_sts

COMMANDS = ("synth", "import", "split", "train-sts", "train-mts", "extend",
            "eval", "profile", "ablate", "sweep", "report")


# -- small parsers -----------------------------------------------------------


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip()) if text else ()


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip()) if text else ()


def _parse_mapping(text: str) -> dict[str, str]:
    out = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ValueError(f"expected NAME=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _parse_shape(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.lower().split("x"))


def _load_teachers(spec: str, task_names):
    path = Path(spec)
    teachers = {}
    if path.is_dir():
        for name in task_names:
            for suffix in ("best", "final"):
                candidate = path / f"sts_{name}_{suffix}.ckpt"
                if candidate.is_file():
                    teachers[name] = ckpt.load_checkpoint(candidate)
                    break
            else:
                raise FileNotFoundError(f"no teacher checkpoint for task {name!r} under {path}")
    else:
        for name, p in _parse_mapping(spec).items():
            teachers[name] = ckpt.load_checkpoint(p)
    return teachers


def _train_config(args, task_names=None) -> TrainConfig:
    hyper = None
    omega = getattr(args, "omega", None)
    if task_names is not None:
        weights = ({k: float(v) for k, v in _parse_mapping(omega).items()} if omega
                   else {t: 1.0 for t in task_names})
        hyper = HyperParams(
            weights,
            lam=getattr(args, "lam", 1.0),
            tau=getattr(args, "tau", 1.0),
            logits_kd_direction=getattr(args, "kd_direction", "student_weights"),
        )
    return TrainConfig(
        hyper=hyper,
        lr=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        lr_decay_epochs=_parse_int_list(args.decay_epochs),
        seed=args.seed,
        checkpoint_dir=args.out,
        early_stop_train_acc=args.early_stop_train_acc,
    )


def _report_summary(report) -> dict:
    return {
        "epochs_run": len(report.rows),
        "wall_clock_s": round(report.wall_clock_s, 3),
        "best_epoch": report.best_epoch,
        "best_test_acc": report.best_test_acc,
        "final_test_acc": report.final_test_acc,
        "checkpoint": report.checkpoint_path,
        "best_checkpoint": report.best_checkpoint_path,
    }


# -- JSON result files (consumed by `report`) --------------------------------


def _eval_to_json(method, dataset_name, report) -> dict:
    return {
        "type": "accuracy",
        "dataset": dataset_name,
        "method": method,
        "accuracy": report.accuracy,
        "confusion": {k: v.tolist() for k, v in report.confusion.items()},
        "num_samples": report.num_samples,
        "model_digest": report.model_digest,
        "dataset_digest": report.dataset_digest,
    }


def _complexity_to_json(method, rep: ComplexityReport) -> dict:
    d = dataclasses.asdict(rep)
    d["type"] = "complexity"
    d["method"] = method
    return d


def _experiment_to_json(result: ExperimentResult, kind: str) -> dict:
    return {
        "type": kind,
        "rows": result.rows,
        "dataset_digest": result.dataset_digest,
        "task_names": list(result.task_names),
    }


def _experiment_from_json(d: dict) -> ExperimentResult:
    return ExperimentResult(rows=d["rows"], dataset_digest=d["dataset_digest"],
                            task_names=tuple(d["task_names"]))


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        num_gestures=args.gestures,
        num_locations=args.locations,
        num_users=args.users,
        samples_per_combo=args.samples_per_combo,
        L=args.links, S=args.subcarriers, P=args.length,
        noise_sigma=args.noise_sigma,
        jitter=args.jitter,
        sampling_rate_hz=args.sampling_rate,
        seed=args.seed,
    )
    ds = synth_dataset(cfg)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_import(args) -> int:
    if args.format == "aril":
        ds = import_aril(args.src)
    elif args.format == "npz":
        ds = import_npz(args.src)
    else:
        raise ValueError(f"unknown import format {args.format!r}")
    if args.resample_to:
        ds = resample_dataset(ds, args.resample_to)
    write_dataset(ds, args.out)
    print(f"imported {len(ds)} samples ({ds.meta.source}) to {args.out}")
    return 0


def cmd_split(args) -> int:
    ds = load_dataset(args.data)
    train, test = split_dataset(ds, args.ratio, args.seed)
    out = Path(args.out)
    write_dataset(train, out / "train")
    write_dataset(test, out / "test")
    print(f"split {len(ds)} -> {len(train)} train / {len(test)} test under {out}")
    return 0


def cmd_train_sts(args) -> int:
    train_set = load_dataset(args.train)
    test_set = load_dataset(args.test)
    cfg = _train_config(args, task_names=(args.task,))
    model, report = train_sts(args.task, train_set, test_set, cfg)
    print(json.dumps({"task": args.task, **_report_summary(report)}, indent=2))
    return 0


def cmd_train_mts(args) -> int:
    train_set = load_dataset(args.train)
    test_set = load_dataset(args.test)
    tasks = tuple(t for t in args.tasks.split(",") if t) if args.tasks else train_set.meta.task_names
    cfg = _train_config(args, task_names=tasks)
    teachers = _load_teachers(args.teachers, tasks) if args.teachers else None
    model, report = train_mts(args.variant, train_set, test_set, teachers, cfg, tasks=tasks)
    print(json.dumps({"variant": args.variant, **_report_summary(report)}, indent=2))
    return 0


def cmd_extend(args) -> int:
    model = ckpt.load_checkpoint(args.checkpoint)
    teacher = ckpt.load_checkpoint(args.teacher)
    train_set = load_dataset(args.train)
    test_set = load_dataset(args.test)
    new_task = train_set.meta.task(args.new_task)
    extended = extend_with_task(model, new_task, teacher, args.seed)
    cfg = _train_config(args, task_names=(args.new_task,))
    extended, report = train_extension(extended, None, train_set, test_set, cfg)
    print(json.dumps({"new_task": args.new_task,
                      "trainable_parameters": extended.trainable_parameter_count(),
                      **_report_summary(report)}, indent=2))
    return 0


def cmd_eval(args) -> int:
    model = ckpt.load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    report = evaluate(model, ds)
    payload = _eval_to_json(args.method or model.kind, args.dataset_name or ds.meta.source, report)
    if args.out:
        _write_json(Path(args.out) / "eval.json", payload)
        print(f"wrote {Path(args.out) / 'eval.json'}")
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_profile(args) -> int:
    if args.checkpoint:
        model = ckpt.load_checkpoint(args.checkpoint)
    else:
        if not (args.variant and args.geometry and args.tasks):
            raise ValueError("profile needs --checkpoint or --variant/--geometry/--tasks")
        geometry = _parse_shape(args.geometry)
        tasks = tuple(TaskSpec.with_generic_names(k, int(v))
                      for k, v in _parse_mapping(args.tasks).items())
        model = build_model(args.variant, geometry, tasks, args.seed)
    input_shape = _parse_shape(args.input_shape) if args.input_shape else model.geometry[1:]
    rep = profile(model, input_shape, batch=args.batch)
    payload = _complexity_to_json(args.method or model.kind, rep)
    if args.out:
        _write_json(Path(args.out) / "profile.json", payload)
        print(f"wrote {Path(args.out) / 'profile.json'}")
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _experiment_args(args, ds):
    tasks = tuple(t for t in args.tasks.split(",") if t) if args.tasks else ds.meta.task_names
    train_cfg = TrainConfig(
        hyper=HyperParams.uniform(tasks, lam=args.lam, tau=args.tau),
        lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
        lr_decay_epochs=_parse_int_list(args.decay_epochs),
    )
    teachers = _load_teachers(args.teachers, tasks) if args.teachers else None
    return tasks, train_cfg, teachers


def cmd_ablate(args) -> int:
    ds = load_dataset(args.data)
    tasks, train_cfg, teachers = _experiment_args(args, ds)
    cfg = AblationConfig(
        dataset=ds,
        variants=tuple(args.variants.split(",")),
        seeds=_parse_int_list(args.seeds),
        tasks=tasks,
        train_ratio=args.ratio,
        split_seed=args.seed,
        train=train_cfg,
    )
    result = run_ablation(cfg, teachers)
    _write_json(Path(args.out) / "ablation.json", _experiment_to_json(result, "ablation"))
    emit_report(args.out, experiment=result, fmt=args.format)
    print(f"wrote ablation results for {len(result.rows)} runs to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    ds = load_dataset(args.data)
    tasks, train_cfg, teachers = _experiment_args(args, ds)
    cfg = SweepConfig(
        dataset=ds,
        ratios=_parse_float_list(args.ratios),
        variants=tuple(args.variants.split(",")),
        seeds=_parse_int_list(args.seeds),
        tasks=tasks,
        train=train_cfg,
    )
    result = run_ratio_sweep(cfg, teachers)
    _write_json(Path(args.out) / "sweep.json", _experiment_to_json(result, "sweep"))
    emit_report(args.out, sweep=result, fmt=args.format)
    print(f"wrote sweep results for {len(result.rows)} runs to {args.out}")
    return 0


def cmd_report(args) -> int:
    accuracy, complexity, experiment, sweep = [], {}, None, None
    for path in args.inputs:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        kind = payload.get("type")
        if kind == "accuracy":
            accuracy.append(payload)
        elif kind == "complexity":
            payload = dict(payload)
            method = payload.pop("method")
            payload.pop("type")
            complexity[method] = ComplexityReport(**payload)
        elif kind == "ablation":
            experiment = _experiment_from_json(payload)
        elif kind == "sweep":
            sweep = _experiment_from_json(payload)
        else:
            raise ValueError(f"{path}: unknown result type {kind!r}")
    written = emit_report(args.out, accuracy=accuracy or None, complexity=complexity or None,
                          experiment=experiment, sweep=sweep, fmt=args.format)
    for p in written:
        print(f"wrote {p}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="global random seed")
    common.add_argument("--config", type=str, default=None,
                        help="YAML/JSON file of flag defaults (CLI values win)")
    common.add_argument("--out", type=str, default=None, help="output directory")

    train_common = argparse.ArgumentParser(add_help=False)
    train_common.add_argument("--epochs", type=int, default=500)
    train_common.add_argument("--batch-size", type=int, default=8)
    train_common.add_argument("--lr", type=float, default=1e-3)
    train_common.add_argument("--decay-epochs", type=str, default="100,200,300")
    train_common.add_argument("--early-stop-train-acc", type=float, default=None)

    parser = argparse.ArgumentParser(prog="wimuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--gestures", type=int, default=6)
    p.add_argument("--locations", type=int, default=5)
    p.add_argument("--users", type=int, default=5)
    p.add_argument("--samples-per-combo", type=int, default=20)
    p.add_argument("--links", type=int, default=1)
    p.add_argument("--subcarriers", type=int, default=16)
    p.add_argument("--length", type=int, default=128)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--jitter", type=float, default=1.0)
    p.add_argument("--sampling-rate", type=float, default=100.0)
    p.set_defaults(func=cmd_synth, needs_out=True)

    p = sub.add_parser("import", parents=[common], help="import a public-dataset layout")
    p.add_argument("--format", choices=("aril", "npz"), required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--resample-to", type=int, default=None)
    p.set_defaults(func=cmd_import, needs_out=True)

    p = sub.add_parser("split", parents=[common], help="train/test split of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float, default=0.8)
    p.set_defaults(func=cmd_split, needs_out=True)

    p = sub.add_parser("train-sts", parents=[common, train_common],
                       help="train a single-task teacher")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--task", required=True)
    p.set_defaults(func=cmd_train_sts, needs_out=True)

    p = sub.add_parser("train-mts", parents=[common, train_common],
                       help="train a multi-task student")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--variant", required=True,
                   choices=("NMTS", "UMTS", "KDMTS", "KDMTS_RA", "WIMUSE"))
    p.add_argument("--tasks", type=str, default=None, help="comma list; default all")
    p.add_argument("--teachers", type=str, default=None,
                   help="checkpoint dir or NAME=path,... mapping")
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--omega", type=str, default=None, help="task weights NAME=w,...")
    p.add_argument("--kd-direction", choices=("student_weights", "teacher_weights"),
                   default="student_weights")
    p.set_defaults(func=cmd_train_mts, needs_out=True)

    p = sub.add_parser("extend", parents=[common, train_common],
                       help="add a task to a trained model and train the added parts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--new-task", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--omega", type=str, default=None)
    p.add_argument("--kd-direction", choices=("student_weights", "teacher_weights"),
                   default="student_weights")
    p.set_defaults(func=cmd_extend, needs_out=True)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", type=str, default=None)
    p.add_argument("--dataset-name", type=str, default=None)
    p.set_defaults(func=cmd_eval, needs_out=False)

    p = sub.add_parser("profile", parents=[common], help="parameter/multiply-add/latency profile")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--variant", type=str, default=None)
    p.add_argument("--geometry", type=str, default=None, help="LxSxP")
    p.add_argument("--tasks", type=str, default=None, help="NAME=classes,...")
    p.add_argument("--input-shape", type=str, default=None, help="SxP or LxSxP")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--method", type=str, default=None)
    p.set_defaults(func=cmd_profile, needs_out=False)

    p = sub.add_parser("ablate", parents=[common, train_common],
                       help="retrain variant list under identical seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--variants", type=str, default="KDMTS,KDMTS_RA,WIMUSE")
    p.add_argument("--seeds", type=str, default="0,1,2")
    p.add_argument("--tasks", type=str, default=None)
    p.add_argument("--teachers", type=str, default=None)
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--format", choices=("csv", "txt", "both"), default="both")
    p.set_defaults(func=cmd_ablate, needs_out=True)

    p = sub.add_parser("sweep", parents=[common, train_common],
                       help="training-set ratio sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--ratios", type=str, default="0.2,0.4,0.6,0.8")
    p.add_argument("--variants", type=str, default="NMTS,KDMTS,WIMUSE")
    p.add_argument("--seeds", type=str, default="0")
    p.add_argument("--tasks", type=str, default=None)
    p.add_argument("--teachers", type=str, default=None)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--format", choices=("csv", "txt", "both"), default="both")
    p.set_defaults(func=cmd_sweep, needs_out=True)

    p = sub.add_parser("report", parents=[common], help="render result JSONs as tables")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--format", choices=("csv", "txt", "both"), default="both")
    p.set_defaults(func=cmd_report, needs_out=True)

    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Seed subparser defaults from --config so explicit flags still win."""
    if "--config" not in argv:
        return
    config_path = argv[argv.index("--config") + 1]
    text = Path(config_path).read_text(encoding="utf-8")
    if config_path.endswith((".yaml", ".yml")):
        import yaml
        config = yaml.safe_load(text)
    else:
        config = json.loads(text)
    if not isinstance(config, dict):
        raise ValueError(f"{config_path}: config must be a mapping")

    command = next((a for a in argv if a in COMMANDS), None)
    merged = {k: v for k, v in config.items() if not isinstance(v, dict)}
    if command and isinstance(config.get(command), dict):
        merged.update(config[command])
    merged = {k.replace("-", "_"): v for k, v in merged.items()}

    subparsers = next(a for a in parser._actions
                      if isinstance(a, argparse._SubParsersAction))
    for name, sp in subparsers.choices.items():
        known = {a.dest for a in sp._actions}
        sp.set_defaults(**{k: v for k, v in merged.items() if k in known})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if getattr(args, "needs_out", False) and not args.out:
            raise ValueError(f"{args.command} requires --out")
        return args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except BaseException as e:  # one-line machine-parseable failure
        msg = str(e).replace("\n", " ")
        print(f'error kind={type(e).__name__} msg="{msg}"', file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
