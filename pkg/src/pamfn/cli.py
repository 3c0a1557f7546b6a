"""Command-line entry point: synth / pretrain / train / eval / gradcheck.

Every command resolves a fully-merged run configuration (config file plus flag
overrides), snapshots it into the run directory, and is deterministic under
``--seed`` with ``--threads 1``. Exit codes: 0 success, 1 runtime failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import MODALITIES, __version__
from .branch import ShapeError
from .data import (
    DataError,
    FeatureDims,
    SyntheticSpec,
    generate_synthetic,
    load_bundle,
    load_manifest,
)
from .gradcheck import SUITES, ProbeSpec, run_all_suites
from .metrics import MetricError, evaluate
from .network import BASELINES, DECODER_VARIANTS, ConfigError, ModelConfig, PAMFN
from .afm import VARIANTS
from .storage import ContainerError
from .training import TrainConfig, TrainingError, load_model, pretrain_branch, train_mixed

USAGE_ERRORS = (DataError, ConfigError, ShapeError, MetricError)


@dataclass
class RunConfig:
    data_dir: Path
    run_dir: Path
    seed: int
    model: ModelConfig
    train: TrainConfig

    def snapshot(self) -> dict:
        return {
            "data_dir": str(self.data_dir),
            "run_dir": str(self.run_dir),
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
        }


def _resolve_run_dir(raw: str) -> Path:
    root = os.environ.get("PAMFN_RUN_ROOT")
    path = Path(raw)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    doc: dict = {}
    if args.config is not None:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise ConfigError(f"config file not found: {cfg_path}")
        try:
            doc = json.loads(cfg_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {cfg_path} is not valid JSON: {exc}") from exc

    data_dir = args.data or doc.get("data_dir")
    if data_dir is None:
        raise ConfigError("no dataset directory: pass --data or set data_dir in the config")
    run_dir = args.run_dir or doc.get("run_dir", "runs/default")
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))

    model_doc = dict(doc.get("model", {}))
    for flag, key in (
        ("d", "d"), ("stages", "n_stages"), ("k_experts", "k_experts"),
        ("dropout", "dropout"), ("tau_init", "tau_init"),
        ("variant", "fusion_variant"), ("decoder", "decoder_variant"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            model_doc[key] = value
    if getattr(args, "fusion_stages", None) is not None:
        model_doc["fusion_stages"] = list(args.fusion_stages)

    train_doc = dict(doc.get("train", {}))
    for flag, key in (
        ("window", "window"), ("batch_size", "batch_size"),
        ("phase1_lr", "phase1_lr"), ("phase1_epochs", "phase1_epochs"),
        ("phase2_lr", "phase2_lr"), ("phase2_epochs", "phase2_epochs"),
        ("head_lr_multiplier", "head_lr_multiplier"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            train_doc[key] = value
    train_doc["seed"] = seed

    try:
        train = TrainConfig.from_dict(train_doc)
    except TrainingError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(
        data_dir=Path(data_dir),
        run_dir=_resolve_run_dir(run_dir),
        seed=seed,
        model=ModelConfig.from_dict(model_doc),
        train=train,
    )


def _write_snapshot(cfg: RunConfig) -> None:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.run_dir / "config.json"
    path.write_text(json.dumps(cfg.snapshot(), indent=1, sort_keys=True) + "\n",
                    encoding="utf-8")


# --- commands -----------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    if args.spec_file is not None:
        spec_path = Path(args.spec_file)
        if not spec_path.is_file():
            raise DataError(f"spec file not found: {spec_path}")
        spec = SyntheticSpec.from_dict(json.loads(spec_path.read_text(encoding="utf-8")))
    else:
        spec = SyntheticSpec(
            n_videos=args.n_videos,
            t_range=(args.t_range[0], args.t_range[1]),
            dims=FeatureDims(*args.dims),
            cross_modal_weight=args.cross_modal_weight,
            noise_scale=args.noise_scale,
            seed=args.seed if args.seed is not None else 0,
            train_fraction=args.train_fraction,
            score_ceiling=args.score_ceiling,
            quality_jitter=args.quality_jitter,
        )
    try:
        manifest = generate_synthetic(spec, args.out)
    except OSError as exc:
        print(f"error: cannot write to {args.out}: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(manifest.videos)} videos to {args.out}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args)
    _write_snapshot(cfg)
    manifest = load_manifest(cfg.data_dir / "manifest.json")
    result = pretrain_branch(args.modality, manifest, cfg.model, cfg.train, cfg.run_dir)
    print(f"checkpoint: {result.final_path}")
    print(f"final train loss: {result.losses[-1]:.6f}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args)
    _write_snapshot(cfg)
    manifest = load_manifest(cfg.data_dir / "manifest.json")
    checkpoints = None
    # Baselines train end to end unless a checkpoint directory is given.
    if not args.one_stage and (args.baseline is None or args.checkpoints):
        ckpt_dir = Path(args.checkpoints) if args.checkpoints else cfg.run_dir / "checkpoints"
        checkpoints = {m: ckpt_dir / f"phase1_{m}.npz" for m in MODALITIES}
        missing = [str(p) for p in checkpoints.values() if not p.is_file()]
        if missing:
            raise TrainingError(
                "missing phase-1 checkpoints (run `pamfn pretrain` per modality first): "
                + ", ".join(missing)
            )
    result = train_mixed(
        manifest, cfg.model, cfg.train, cfg.run_dir,
        branch_checkpoints=checkpoints, one_stage=args.one_stage, baseline=args.baseline,
    )
    print(f"checkpoint: {result.final_path}")
    print(f"final train loss: {result.losses[-1]:.6f}")
    return 0


def _dump_decisions(model, manifest, split: str, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    model.eval()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "stage", "t", "decision"])
        with torch.no_grad():
            for entry in manifest.split_entries(split):
                bundle = load_bundle(manifest, entry.video_id)
                tensors = [
                    torch.from_numpy(np.ascontiguousarray(bundle.feature(m))).unsqueeze(0)
                    for m in MODALITIES
                ]
                _, trace = model(*tensors)
                for stage, decision in sorted(trace.decisions.items()):
                    for t, value in enumerate(decision.hard.squeeze(0).tolist()):
                        writer.writerow([entry.video_id, stage, t, value])


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model = load_model(ckpt)
    manifest = load_manifest(Path(args.data) / "manifest.json")
    report = evaluate(model, manifest, args.split)
    print(report.format())
    if args.report is not None:
        report.write_csv(args.report)
        print(f"report: {args.report}")
    if args.dump_decisions is not None:
        if not isinstance(model, PAMFN):
            print("note: model has no routing decisions; writing header only")
        _dump_decisions(model, manifest, args.split, Path(args.dump_decisions))
        print(f"decisions: {args.dump_decisions}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    names = tuple(args.module) if args.module else SUITES
    spec = ProbeSpec(seed=args.seed if args.seed is not None else 0)
    results = run_all_suites(names, spec)
    failures = [r for r in results if not r.passed]
    for r in results:
        print(r.format())
    print(f"{len(results) - len(failures)}/{len(results)} parameters passed")
    return 0 if not failures else 1


# --- parser -------------------------------------------------------------------

def _add_run_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config file")
    p.add_argument("--data", help="dataset directory containing manifest.json")
    p.add_argument("--run-dir", dest="run_dir", help="output directory for this run")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--d", type=int, help="feature width")
    p.add_argument("--stages", type=int, help="number of conv stages N")
    p.add_argument("-K", "--k-experts", dest="k_experts", type=int,
                   help="number of fusion experts")
    p.add_argument("--dropout", type=float)
    p.add_argument("--tau-init", dest="tau_init", type=float)
    p.add_argument("--variant", choices=VARIANTS, help="fusion routing variant")
    p.add_argument("--decoder", choices=DECODER_VARIANTS, help="decoder ablation variant")
    p.add_argument("--fusion-stages", dest="fusion_stages", type=int, nargs="*",
                   help="stages at which to fuse (default: all)")
    p.add_argument("--window", type=int, help="training window length W")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--phase1-lr", dest="phase1_lr", type=float)
    p.add_argument("--phase1-epochs", dest="phase1_epochs", type=int)
    p.add_argument("--phase2-lr", dest="phase2_lr", type=float)
    p.add_argument("--phase2-epochs", dest="phase2_epochs", type=int)
    p.add_argument("--head-lr-multiplier", dest="head_lr_multiplier", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pamfn",
        description="Progressive adaptive multimodal fusion for score regression",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=1,
                        help="torch thread count (1 = fully deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spec-file", dest="spec_file", help="JSON synthetic spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-videos", dest="n_videos", type=int, default=24)
    p.add_argument("--t-range", dest="t_range", type=int, nargs=2, default=(48, 90))
    p.add_argument("--dims", type=int, nargs=3, default=(48, 64, 48),
                   metavar=("RGB", "FLOW", "AUDIO"))
    p.add_argument("--cross-modal-weight", dest="cross_modal_weight", type=float, default=0.8)
    p.add_argument("--noise-scale", dest="noise_scale", type=float, default=0.25)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=2 / 3)
    p.add_argument("--score-ceiling", dest="score_ceiling", type=float, default=25.0)
    p.add_argument("--quality-jitter", dest="quality_jitter", type=float, default=0.25)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="phase 1: train one modality branch")
    p.add_argument("--modality", required=True, choices=MODALITIES)
    _add_run_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="phase 2: train the fusion model or a baseline")
    p.add_argument("--one-stage", dest="one_stage", action="store_true",
                   help="train everything at once, nothing frozen")
    p.add_argument("--baseline", choices=BASELINES, help="train a late-fusion baseline instead")
    p.add_argument("--checkpoints", help="directory holding phase-1 checkpoints")
    _add_run_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--report", help="write the report CSV here")
    p.add_argument("--dump-decisions", dest="dump_decisions",
                   help="write per-step routing decisions CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--module", action="append", choices=SUITES,
                   help="restrict to one suite (repeatable)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, ContainerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
