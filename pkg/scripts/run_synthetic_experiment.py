#!/usr/bin/env python3
"""Full two-phase training run on a synthetic dataset, with branch comparison.

Generates data, pretrains the three modality branches, trains the fusion
model on top of them, and reports Spearman rho for every component on both
splits. All stages are deterministic under --seed.
"""

import argparse
import time
from pathlib import Path

import torch

from pamfn.data import SyntheticSpec, generate_synthetic
from pamfn.metrics import predict_scores, spearman
from pamfn.network import ModelConfig
from pamfn.training import TrainConfig, load_model, pretrain_branch, train_mixed


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("runs/synthetic"),
                        help="working directory for data, checkpoints, and logs")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--n-videos", type=int, default=24)
    parser.add_argument("--cross-modal-weight", type=float, default=0.8,
                        help="how much of the score signal the audio stream carries")
    parser.add_argument("--d", type=int, default=32)
    parser.add_argument("--stages", type=int, default=3)
    parser.add_argument("--k-experts", type=int, default=4)
    parser.add_argument("--window", type=int, default=32)
    parser.add_argument("--phase1-epochs", type=int, default=60)
    parser.add_argument("--phase2-epochs", type=int, default=150)
    parser.add_argument("--one-stage", action="store_true",
                        help="skip branch pretraining and train everything at once")
    return parser.parse_args()


def rhos(model, manifest) -> tuple[float, float]:
    return tuple(
        spearman(*predict_scores(model, manifest, split)) for split in ("train", "test")
    )


def main() -> int:
    args = parse_args()
    torch.set_num_threads(1)
    started = time.time()

    data_dir = args.out / "data"
    manifest = generate_synthetic(
        SyntheticSpec(
            n_videos=args.n_videos,
            cross_modal_weight=args.cross_modal_weight,
            seed=args.seed,
        ),
        data_dir,
    )
    n_train = len(manifest.split_entries("train"))
    print(f"data: {len(manifest.videos)} videos "
          f"({n_train} train / {len(manifest.videos) - n_train} test) -> {data_dir}")

    model_cfg = ModelConfig(d=args.d, n_stages=args.stages, k_experts=args.k_experts)
    train_cfg = TrainConfig(
        seed=args.seed, window=args.window, phase1_epochs=args.phase1_epochs,
        phase2_epochs=args.phase2_epochs,
    )

    rows = []
    checkpoints = {}
    if not args.one_stage:
        for modality in ("rgb", "flow", "audio"):
            result = pretrain_branch(modality, manifest, model_cfg, train_cfg, args.out)
            checkpoints[modality] = result.final_path
            tr, te = rhos(load_model(result.final_path), manifest)
            rows.append((f"{modality} branch", result.losses[-1], tr, te))

    fused = train_mixed(
        manifest, model_cfg, train_cfg, args.out,
        branch_checkpoints=checkpoints or None, one_stage=args.one_stage,
    )
    tr, te = rhos(load_model(fused.final_path), manifest)
    rows.append(("fusion" + (" (one stage)" if args.one_stage else ""),
                 fused.losses[-1], tr, te))

    print(f"\n{'model':<18} {'final loss':>10} {'train rho':>10} {'test rho':>9}")
    for name, loss, tr, te in rows:
        print(f"{name:<18} {loss:>10.4f} {tr:>10.3f} {te:>9.3f}")
    print(f"\ncheckpoints in {args.out / 'checkpoints'}; total {time.time() - started:.1f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
