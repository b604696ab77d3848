"""Command-line harness: ``rkd {separate,train-teacher,distill,eval,export-features}``.

Every subcommand reads one JSON config (``--config``), applies flag
overrides, and writes the resolved config next to whatever it produces.
Stage layout under ``output_dir``::

    separate/        plan.json, config.json
    teacher/         checkpoint/, metrics.jsonl, config.json
    <variant>/       student/, assistant/, adapter_S/, adapter_A/, [classifier/],
                     plan.json, metrics.jsonl, config.json
    features/        level<i>.csv, config.json
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from .data import Dataset, load_dataset, make_synthetic_splits
from .distill import (
    CLASSIFIER_SCHEDULE,
    VARIANTS,
    DistilledModel,
    MetricsStream,
    evaluate,
    finetune_classifier,
    make_run,
    run_distillation,
    train_teacher,
)
from .flops import network_flops, separate
from .netspec import NetworkSpec, load_spec
from .network import Linear
from .optim import StepSchedule
from .tensor import no_grad

SYNTHETIC_DEFAULTS = {"format": "synthetic", "classes": 10, "per_class": 200, "holdout_per_class": 50,
                      "noise": 1.5, "jitter": 6}


@dataclass
class RunConfig:
    seed: int = 0
    dataset: dict = field(default_factory=lambda: dict(SYNTHETIC_DEFAULTS))
    teacher_spec: object = "tinyres16"
    student_spec: object = None
    assistant_spec: object = None
    base_spec: object = "tinyres8"
    ratio: Optional[float] = 0.9
    variant: str = "integrated"
    teacher_schedule: dict = field(default_factory=lambda: {"base_lr": 0.05, "step": 4, "gamma": 0.1, "epochs": 6})
    schedule: dict = field(default_factory=lambda: {"base_lr": 1e-4, "step": 4, "gamma": 0.1, "epochs": 6})
    # None falls back to ``schedule``
    assistant_schedule: Optional[dict] = field(
        default_factory=lambda: {"base_lr": 3e-4, "step": 14, "gamma": 0.1, "epochs": 18})
    # global gradient-norm cap for assistant phases; None disables
    clip_norm: Optional[float] = 2000.0
    batch_size: int = 64
    output_dir: str = "runs/default"
    teacher_checkpoint: Optional[str] = None
    finetune_classifier: bool = False
    classifier_schedule: dict = field(default_factory=lambda: CLASSIFIER_SCHEDULE.to_dict())
    batchnorm: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate_distill(self) -> None:
        explicit = self.student_spec is not None or self.assistant_spec is not None
        derived = self.base_spec is not None and self.ratio is not None
        if explicit == derived:
            raise ValueError("give exactly one of (student_spec, assistant_spec) or (base_spec, ratio)")
        if explicit and self.student_spec is None:
            raise ValueError("assistant_spec given without student_spec")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _schedule(d: dict) -> StepSchedule:
    return StepSchedule(float(d["base_lr"]), int(d["step"]), float(d.get("gamma", 0.1)), int(d["epochs"]))


def _spec(source) -> NetworkSpec:
    return load_spec(source)


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Training split and held-out split (normalized with training statistics)."""
    d = dict(cfg.dataset)
    fmt = d.get("format", "synthetic")
    if fmt == "synthetic":
        opts = {**SYNTHETIC_DEFAULTS, **d}
        size = tuple(opts.get("size", (1, 32, 32)))
        return make_synthetic_splits(int(opts.get("seed", cfg.seed)), opts["classes"], opts["per_class"],
                                     opts["holdout_per_class"], size, opts["noise"], opts["jitter"])
    if "path" not in d:
        raise ValueError(f"dataset format {fmt!r} needs a path")
    train = load_dataset(d["path"], fmt, "train", d.get("classes"))
    test = load_dataset(d["path"], fmt, "test", train.classes, stats=train.stats)
    if "limit" in d:
        train = train.subset(np.arange(min(int(d["limit"]), len(train))))
    if "test_limit" in d:
        test = test.subset(np.arange(min(int(d["test_limit"]), len(test))))
    return train, test


def _stage(cfg: RunConfig, name: str) -> Path:
    path = Path(cfg.output_dir) / name
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    return path


def _teacher_path(cfg: RunConfig) -> Path:
    if cfg.teacher_checkpoint:
        return Path(cfg.teacher_checkpoint)
    return Path(cfg.output_dir) / "teacher" / "checkpoint"


def _distill_specs(cfg: RunConfig) -> tuple[NetworkSpec, Optional[NetworkSpec], Optional[dict]]:
    cfg.validate_distill()
    if cfg.student_spec is not None:
        spec_A = _spec(cfg.assistant_spec) if cfg.assistant_spec is not None else None
        return _spec(cfg.student_spec), spec_A, None
    plan = separate(_spec(cfg.base_spec), float(cfg.ratio))
    return plan.spec_S, plan.spec_A, plan.to_dict()


def load_distilled(cfg: RunConfig) -> tuple[DistilledModel, ckpt.Network]:
    stage = Path(cfg.output_dir) / cfg.variant
    if not (stage / "student").exists():
        raise FileNotFoundError(f"no distilled model under {stage}; run `distill` first")
    teacher = ckpt.load_checkpoint(_teacher_path(cfg))
    student = ckpt.load_checkpoint(stage / "student")
    assistant = ckpt.load_checkpoint(stage / "assistant") if (stage / "assistant").exists() else None
    ad_S = ckpt.load_adapter(stage / "adapter_S")
    ad_A = ckpt.load_adapter(stage / "adapter_A") if (stage / "adapter_A").exists() else None
    classifier = teacher.classifier
    if (stage / "classifier").exists():
        classifier = _load_classifier(stage / "classifier")
    return DistilledModel(student, assistant, ad_S, ad_A, classifier, cfg.variant), teacher


def _save_classifier(clf: Linear, path: Path, config: dict) -> None:
    state = {"weight": clf.weight.data, "bias": clf.bias.data}
    ckpt._write(path, state, {"kind": "linear", "config_hash": ckpt.config_hash(config)})


def _load_classifier(path: Path) -> Linear:
    manifest, state = ckpt._read(path)
    if manifest.get("kind") != "linear":
        raise ckpt.CheckpointError(f"{path}: holds a {manifest.get('kind')!r}, not a linear layer")
    fout, fin = state["weight"].shape
    clf = Linear(fin, fout, np.random.default_rng(0), np.float32)
    clf.weight.data[...] = state["weight"]
    clf.bias.data[...] = state["bias"]
    return clf


# ---------------------------------------------------------------------------
# subcommands


def cmd_separate(cfg: RunConfig, args) -> int:
    plan = separate(_spec(cfg.base_spec), float(cfg.ratio))
    stage = _stage(cfg, "separate")
    (stage / "plan.json").write_text(plan.to_json() + "\n")
    c = plan.cost
    print(f"S {c['S']} MACs, A {c['A']} MACs, original {c['orig']} MACs; "
          f"conservation error {100 * plan.conservation_error:+.2f}%")
    return 0


def cmd_train_teacher(cfg: RunConfig, args) -> int:
    train, test = load_data(cfg)
    stage = _stage(cfg, "teacher")
    with open(stage / "metrics.jsonl", "w") as sink:
        net = train_teacher(_spec(cfg.teacher_spec), train, _schedule(cfg.teacher_schedule), cfg.seed,
                            cfg.batch_size, cfg.batchnorm, eval_data=test, metrics=MetricsStream(sink))
    ckpt.save_checkpoint(net, stage / "checkpoint", cfg.to_dict())
    return 0


def cmd_distill(cfg: RunConfig, args) -> int:
    spec_S, spec_A, plan = _distill_specs(cfg)
    teacher = ckpt.load_checkpoint(_teacher_path(cfg))
    train, test = load_data(cfg)
    run = make_run(teacher, spec_S, spec_A, cfg.variant, _schedule(cfg.schedule), cfg.seed, cfg.batch_size,
                   cfg.batchnorm, _schedule(cfg.assistant_schedule) if cfg.assistant_schedule else None,
                   cfg.clip_norm)
    stage = _stage(cfg, cfg.variant)
    if plan is not None:
        (stage / "plan.json").write_text(json.dumps(plan, indent=1) + "\n")
    with open(stage / "metrics.jsonl", "w") as sink:
        metrics = MetricsStream(sink)
        result = run_distillation(run, train, test, metrics)
        if cfg.finetune_classifier:
            clf = finetune_classifier(result.model, train, _schedule(cfg.classifier_schedule), cfg.seed,
                                      cfg.batch_size)
            rec = evaluate(result.model, test, teacher, epoch=cfg.schedule["epochs"], phase="classifier")
            metrics.append(rec)
            _save_classifier(clf, stage / "classifier", cfg.to_dict())
    conf = cfg.to_dict()
    ckpt.save_checkpoint(run.student, stage / "student", conf)
    ckpt.save_adapter(run.adapter_S, stage / "adapter_S", conf)
    if run.assistant is not None:
        ckpt.save_checkpoint(run.assistant, stage / "assistant", conf)
        ckpt.save_adapter(run.adapter_A, stage / "adapter_A", conf)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    _, test = load_data(cfg)
    model, teacher = load_distilled(cfg)
    rec = evaluate(model, test, teacher, use_assistant=not args.no_assistant, phase="eval")
    out = rec.to_dict()
    out["macs"] = network_flops(model.student.spec).total_macs + (
        network_flops(model.assistant.spec).total_macs if model.assistant is not None and not args.no_assistant else 0
    )
    print(json.dumps(out))
    return 0


def cmd_export_features(cfg: RunConfig, args) -> int:
    if args.level is None:
        raise UsageError("export-features needs --level")
    _, test = load_data(cfg)
    model, _ = load_distilled(cfg)
    if not 1 <= args.level <= model.num_levels:
        raise UsageError(f"--level must lie in 1..{model.num_levels}")
    stage = _stage(cfg, "features")
    path = stage / f"level{args.level}.csv"
    with open(path, "w", newline="") as fh, no_grad():
        writer = csv.writer(fh)
        for start in range(0, len(test), 256):
            feats = model.fused_taps(test.images[start : start + 256], stop=args.level)[-1].data
            flat = feats.reshape(len(feats), -1)
            for j, row in enumerate(flat):
                writer.writerow([start + j, int(test.labels[start + j])] + [repr(float(v)) for v in row])
    print(path)
    return 0


COMMANDS = {
    "separate": cmd_separate,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "export-features": cmd_export_features,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rkd", description="Residual distillation experiments on numpy.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="RunConfig JSON file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        if name in ("separate", "distill"):
            p.add_argument("--spec", help="base spec: reference name or JSON path")
            p.add_argument("--ratio", type=float, help="student cost share p")
        if name in ("distill", "eval", "export-features"):
            p.add_argument("--variant", choices=VARIANTS)
        if name == "eval":
            p.add_argument("--no-assistant", action="store_true", help="score the student alone")
        if name == "export-features":
            p.add_argument("--level", type=int, help="1-based tap level")
    return parser


def resolve_config(args) -> RunConfig:
    raw = {}
    if args.config is not None:
        raw = json.loads(Path(args.config).read_text())
    cfg = RunConfig.from_dict(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = str(args.out)
    if getattr(args, "spec", None) is not None:
        cfg.base_spec, cfg.student_spec, cfg.assistant_spec = args.spec, None, None
    if getattr(args, "ratio", None) is not None:
        cfg.ratio = args.ratio
    if getattr(args, "variant", None) is not None:
        cfg.variant = args.variant
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"rkd {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed
        print(f"rkd {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
