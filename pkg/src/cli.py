#!/usr/bin/env python3
"""
spatial-moe command line: generate data, train, predict, evaluate, check
gradients, run ablations and print reports.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or parse error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import BaseModel, Field, ValidationError

from config import ConfigFileError, load_settings
from experts import EXPERT_ORDER, ExpertInputError
from metrics import (
    PredictionFormatError, evaluate, format_comparison, format_table,
    read_predictions, read_report, write_predictions, write_report,
)
from model import GSMModel, ModelFormatError
from synthdata import (
    Dataset, DatasetFormatError, GeneratorConfig, InfeasibleConfigError,
    file_hash, generate, read_dataset, read_splits, split_dataset, summarize,
    write_dataset, write_splits,
)
from trainer import (
    ABLATIONS, GateTrace, TrainConfig, TrainingDivergedError, UnknownBlockError, ablate, gradcheck, local_spread,
    train,
)

__version__ = "0.1.0"

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_USAGE = 2
EXIT_IO = 3

logger = logging.getLogger(__name__)


class UsageError(ValueError):
    """Invalid flag value or combination."""


class RunManifest(BaseModel):
    command: str
    argv: List[str]
    config: Dict[str, Any] = Field(default_factory=dict)
    dataset_hash: Optional[str] = None
    seed: Optional[int] = None
    artifacts: List[str] = Field(default_factory=list)
    tool_version: str = __version__

    def write(self, directory: Path) -> Path:
        path = Path(directory) / "manifest.json"
        if path.name not in self.artifacts:
            self.artifacts.append(path.name)
        path.write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return path


def _parse_mix(text: str):
    try:
        parts = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"--mix expects three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise UsageError(f"--mix expects three comma-separated numbers, got {text!r}")
    return tuple(parts)


def _require(path: Optional[str], what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    resolved = Path(path)
    if not resolved.exists():
        raise FileNotFoundError(f"{what} not found: {resolved}")
    return resolved


def _load_split(data: Path, splits: Optional[str], split: str) -> Dataset:
    dataset = read_dataset(data)
    if split == "all":
        return dataset
    splits_path = Path(splits) if splits else data.parent / "splits.json"
    manifest = read_splits(_require(str(splits_path), "split manifest"))
    return dataset.subset(manifest.train if split == "train" else manifest.inference)


def _train_config(args) -> TrainConfig:
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "alpha": args.alpha,
        "learning_rate": args.lr,
        "d": args.d,
        "batch_size": args.batch_size,
    }
    if getattr(args, "init_from", None):
        overrides["init_from"] = args.init_from
    for name in getattr(args, "ablate", None) or []:
        overrides[ABLATIONS[name]] = True
    if args.config:
        return TrainConfig.from_file(_require(args.config, "config file"), **overrides)
    return TrainConfig.model_validate({k: v for k, v in overrides.items() if v is not None})


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, settings) -> int:
    fields = {
        "seed": args.seed,
        "videos": args.videos,
        "events_mean": args.events_mean,
        "noise": args.noise,
        "duration_min_s": args.duration_min,
        "duration_max_s": args.duration_max,
        "event_min_s": args.event_min,
        "event_max_s": args.event_max,
        "workers": args.workers,
    }
    if args.mix is not None:
        fields["mix"] = _parse_mix(args.mix)
    config = GeneratorConfig.model_validate({k: v for k, v in fields.items() if v is not None})
    out = Path(args.out) if args.out else settings.data_dir
    out.mkdir(parents=True, exist_ok=True)

    print(f"🚀 Generating {config.videos} videos (seed {config.seed})")
    dataset = generate(config, n_frames=args.frames)
    digest = write_dataset(dataset, out / "dataset.jsonl")
    write_splits(split_dataset(dataset, args.inference_fraction, config.seed), out / "splits.json")
    stats = summarize(dataset)
    manifest = RunManifest(
        command="gen-data",
        argv=list(args.argv),
        config=config.model_dump(mode="json"),
        dataset_hash=digest,
        seed=config.seed,
        artifacts=["dataset.jsonl", "splits.json"],
    )
    manifest.write(out)
    print(f"📁 Dataset: {out / 'dataset.jsonl'}")
    print(f"📊 events per video: {stats['events_mean']:.3f} ({stats['events']} events, {stats['videos']} videos)")
    shares = ", ".join(f"{k} {100 * v:.1f}%" for k, v in stats["channel_share"].items())
    print(f"📊 channel share: {shares}")
    print(f"✅ dataset hash {digest}")
    return EXIT_OK


def cmd_train(args, settings) -> int:
    data = _require(args.data, "dataset")
    config = _train_config(args)
    dataset = _load_split(data, args.splits, args.split)
    out = Path(args.out) if args.out else settings.runs_dir / f"train-seed{config.seed}"
    out.mkdir(parents=True, exist_ok=True)

    print(f"🚀 Training on {len(dataset)} videos for {config.epochs} epochs")
    result = train(config, dataset)
    result.model.save(out / "model.npz")
    result.trace.write(out / "trace.tsv")
    (out / "losses.tsv").write_text(
        "step\tl_task\n" + "".join(f"{i + 1}\t{v!r}\n" for i, v in enumerate(result.task_losses)), encoding="utf-8"
    )
    (out / "train_config.json").write_text(config.model_dump_json(indent=2) + "\n", encoding="utf-8")
    RunManifest(
        command="train",
        argv=list(args.argv),
        config=config.model_dump(mode="json"),
        dataset_hash=file_hash(data),
        seed=config.seed,
        artifacts=["model.npz", "trace.tsv", "losses.tsv", "train_config.json"],
    ).write(out)
    final = result.epoch_losses[-1] if result.epoch_losses else float("nan")
    print(f"📁 Run directory: {out}")
    print(f"✅ {result.steps} steps, final epoch loss {final:.4f}")
    return EXIT_OK


def cmd_predict(args, settings) -> int:
    model = GSMModel.load(_require(args.model, "model"))
    data = _require(args.data, "dataset")
    dataset = _load_split(data, args.splits, args.split)
    predictions = model.predict_dataset(dataset, args.threshold, args.min_event_frames)
    out = Path(args.out)
    write_predictions(predictions, out)
    events = sum(len(p.events) for p in predictions)
    print(f"✅ {events} predicted events for {len(predictions)} videos → {out}")
    return EXIT_OK


def cmd_eval(args, settings) -> int:
    predictions = read_predictions(_require(args.pred, "prediction file"))
    dataset = _load_split(_require(args.data, "dataset"), args.splits, args.split)
    report = evaluate(predictions, dataset)
    stem = Path(args.out) if args.out else Path(args.pred).with_name(Path(args.pred).stem + "-report")
    json_path, text_path = write_report(report, stem)
    print(format_table(report), end="")
    print(f"📁 Report: {json_path}, {text_path}")
    return EXIT_OK


def cmd_gradcheck(args, settings) -> int:
    failures = 0
    for offset in range(args.seeds):
        config = TrainConfig(d=args.d, seed=args.seed + offset, alpha=args.alpha if args.alpha is not None else 0.4)
        try:
            report = gradcheck(config, objective=args.objective, tolerance=args.tolerance, corrupt_block=args.corrupt_block)
        except UnknownBlockError as e:
            raise UsageError(f"--corrupt-block: {e}") from None
        for block, error in report.errors.items():
            mark = "✅" if error < report.tolerance else "❌"
            print(f"  {mark} seed {report.seed} {block:<6} rel. error {error:.2e}")
        if not report.passed:
            failures += 1
            print(f"❌ gradient check failed for blocks: {', '.join(report.failed)}")
    if failures:
        return EXIT_VERIFICATION
    print(f"✅ all blocks pass at {args.tolerance:g} over {args.seeds} seed(s)")
    return EXIT_OK


def cmd_ablate(args, settings) -> int:
    data = _require(args.data, "dataset")
    config = _train_config(args)
    variants = [v.strip() for v in args.variants.split(",")] if args.variants else list(ABLATIONS)
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise UsageError(f"unknown ablation(s) {unknown}; choose from {list(ABLATIONS)}")
    train_set = _load_split(data, args.splits, "train")
    eval_set = _load_split(data, args.splits, "inference")
    out = Path(args.out) if args.out else settings.runs_dir / f"ablate-seed{config.seed}"
    out.mkdir(parents=True, exist_ok=True)

    print(f"🚀 Ablation over {['full'] + variants} on {len(train_set)} train / {len(eval_set)} eval videos")
    reports = ablate(config, train_set, eval_set, variants)
    artifacts = []
    for name, report in reports.items():
        json_path, text_path = write_report(report, out / name)
        artifacts += [json_path.name, text_path.name]
    table = format_comparison(reports)
    (out / "comparison.txt").write_text(table, encoding="utf-8")
    artifacts.append("comparison.txt")
    RunManifest(
        command="ablate",
        argv=list(args.argv),
        config=config.model_dump(mode="json"),
        dataset_hash=file_hash(data),
        seed=config.seed,
        artifacts=artifacts,
    ).write(out)
    print(table, end="")
    print(f"📁 Reports: {out}")
    return EXIT_OK


def _trace_summary(trace: GateTrace) -> str:
    lines = [f"{'step':>8}" + "".join(f"{tag.value:>8}" for tag in EXPERT_ORDER) + f"{'spread':>8}{'total':>10}"]
    for record in trace.records:
        lines.append(
            f"{record.step:>8d}" + "".join(f"{w:>8.3f}" for w in record.gate)
            + f"{local_spread(record.gate):>8.3f}{record.total:>10.4f}"
        )
    return "\n".join(lines) + "\n"


def cmd_report(args, settings) -> int:
    if [bool(args.compare), bool(args.gate_profile), bool(args.trace)].count(True) != 1:
        raise UsageError("choose exactly one of --compare, --gate-profile or --trace")
    if args.trace:
        text = _trace_summary(GateTrace.read(_require(args.trace, "gate trace")))
    elif args.compare:
        reports = {}
        for item in args.compare:
            if "=" not in item:
                raise UsageError(f"--compare expects NAME=REPORT.json, got {item!r}")
            name, path = item.split("=", 1)
            reports[name] = read_report(_require(path, "report"))
        if args.baseline not in reports:
            raise UsageError(f"--baseline {args.baseline!r} is not among {sorted(reports)}")
        text = format_comparison(reports, args.baseline)
    else:
        model = GSMModel.load(_require(args.model, "model"))
        dataset = _load_split(_require(args.data, "dataset"), args.splits, args.split)
        profile = model.gate_profile(dataset)
        lines = [f"{'event type':<12}{'AE':>8}{'ORE':>8}{'BE':>8}{'GE':>8}{'events':>8}"]
        for event_type, row in profile.items():
            lines.append(
                f"{event_type:<12}" + "".join(f"{row[k]:>8.3f}" for k in ("AE", "ORE", "BE", "GE")) + f"{row['events']:>8d}"
            )
        text = "\n".join(lines) + "\n"
        if args.out:
            Path(args.out).with_suffix(".json").write_text(json.dumps(profile, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(text, end="")
    if args.out:
        Path(args.out).with_suffix(".txt").write_text(text, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help="dataset file (dataset.jsonl)")
    parser.add_argument("--splits", help="split manifest (default: splits.json beside the dataset)")
    parser.add_argument("--config", help="flat key = value training config")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--alpha", type=float, help="balancing-loss weight (0 behaves like ablating sir)")
    parser.add_argument("--lr", type=float, help="learning rate")
    parser.add_argument("--d", type=int, help="model width")
    parser.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatial-moe", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset, split manifest and run manifest")
    gen.add_argument("--out", help="output directory (default: SPATIAL_MOE_DATA_DIR)")
    gen.add_argument("--videos", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--mix", help="pose,relation,background informativeness shares, e.g. 0.45,0.25,0.30")
    gen.add_argument("--events-mean", type=float)
    gen.add_argument("--noise", type=float)
    gen.add_argument("--duration-min", type=float, help="seconds")
    gen.add_argument("--duration-max", type=float, help="seconds")
    gen.add_argument("--event-min", type=float, help="seconds")
    gen.add_argument("--event-max", type=float, help="seconds")
    gen.add_argument("--frames", type=int, help="fixed frame count per video")
    gen.add_argument("--inference-fraction", type=float, default=0.2)
    gen.add_argument("--workers", type=int)
    gen.set_defaults(handler=cmd_gen_data)

    tr = sub.add_parser("train", help="train a model")
    _add_training_flags(tr)
    tr.add_argument("--split", choices=("train", "inference", "all"), default="train")
    tr.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), help="switch off a component (repeatable)")
    tr.add_argument("--init-from", help="warm-start expert parameters from a saved model")
    tr.set_defaults(handler=cmd_train)

    pr = sub.add_parser("predict", help="write predictions of a trained model")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--splits")
    pr.add_argument("--split", choices=("train", "inference", "all"), default="inference")
    pr.add_argument("--out", required=True, help="prediction file")
    pr.add_argument("--threshold", type=float, default=0.5)
    pr.add_argument("--min-event-frames", type=int, default=2)
    pr.set_defaults(handler=cmd_predict)

    ev = sub.add_parser("eval", help="score a prediction file against gold")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--splits")
    ev.add_argument("--split", choices=("train", "inference", "all"), default="inference")
    ev.add_argument("--out", help="report path stem (.json and .txt are written)")
    ev.set_defaults(handler=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every parameter block")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    gc.add_argument("--d", type=int, default=8)
    gc.add_argument("--alpha", type=float)
    gc.add_argument("--objective", choices=("total", "task", "gate"), default="total")
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--corrupt-block", help="perturb one block's analytic gradient (negative control)")
    gc.set_defaults(handler=cmd_gradcheck)

    ab = sub.add_parser("ablate", help="train the full model and each ablation, then compare")
    _add_training_flags(ab)
    ab.add_argument("--variants", help=f"comma-separated subset of {','.join(ABLATIONS)}")
    ab.set_defaults(handler=cmd_ablate)

    rp = sub.add_parser("report", help="compare reports, profile gate weights per event type or tabulate a gate trace")
    rp.add_argument("--compare", nargs="+", metavar="NAME=REPORT.json")
    rp.add_argument("--baseline", default="full")
    rp.add_argument("--gate-profile", action="store_true")
    rp.add_argument("--trace", help="gate trace (trace.tsv) to tabulate")
    rp.add_argument("--model")
    rp.add_argument("--data")
    rp.add_argument("--splits")
    rp.add_argument("--split", choices=("train", "inference", "all"), default="inference")
    rp.add_argument("--out", help="path stem for the written table")
    rp.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    settings = load_settings()
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, settings.log_level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args, settings)
    except (DatasetFormatError, PredictionFormatError, ModelFormatError, ExpertInputError, ConfigFileError) as e:
        print(f"❌ {e}")
        return EXIT_IO
    except (FileNotFoundError, PermissionError, IsADirectoryError) as e:
        print(f"❌ {e}")
        return EXIT_IO
    except ValidationError as e:
        print(f"❌ invalid settings: {e}")
        return EXIT_USAGE
    except (UsageError, InfeasibleConfigError) as e:
        print(f"❌ {e}")
        return EXIT_USAGE
    except TrainingDivergedError as e:
        print(f"❌ training diverged at {e}")
        return EXIT_VERIFICATION


if __name__ == "__main__":
    sys.exit(main())
