#!/usr/bin/env python3
"""Ablation sweep: fusion variants vs. late-fusion baselines on one dataset.

Pretrains the three modality branches once, then trains every decoder
ablation and routing variant on top of the same checkpoints, plus the
late-fusion baselines end to end, and prints a Spearman-rho table.
"""

import argparse
import time
from pathlib import Path

import torch

from pamfn.data import SyntheticSpec, generate_synthetic
from pamfn.metrics import predict_scores, spearman
from pamfn.network import BASELINES, ModelConfig
from pamfn.training import TrainConfig, load_model, pretrain_branch, train_mixed

ABLATIONS = (
    # (label, ModelConfig overrides)
    ("full", {}),
    ("no msfd", {"decoder_variant": "no_msfd"}),
    ("no cmfd", {"decoder_variant": "no_cmfd"}),
    ("weighted both", {"decoder_variant": "weighted_for_both"}),
    ("unranked routing", {"fusion_variant": "unranked"}),
    ("free routing", {"fusion_variant": "free"}),
    ("fusion disabled", {"fusion_stages": ()}),
)


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("runs/variants"))
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--n-videos", type=int, default=24)
    parser.add_argument("--d", type=int, default=32)
    parser.add_argument("--stages", type=int, default=3)
    parser.add_argument("--k-experts", type=int, default=4)
    parser.add_argument("--window", type=int, default=32)
    parser.add_argument("--phase1-epochs", type=int, default=60)
    parser.add_argument("--phase2-epochs", type=int, default=150)
    parser.add_argument("--skip-baselines", action="store_true")
    return parser.parse_args()


def main() -> int:
    args = parse_args()
    torch.set_num_threads(1)
    started = time.time()

    manifest = generate_synthetic(
        SyntheticSpec(n_videos=args.n_videos, seed=args.seed), args.out / "data"
    )
    base_cfg = dict(d=args.d, n_stages=args.stages, k_experts=args.k_experts)
    train_cfg = TrainConfig(
        seed=args.seed, window=args.window, phase1_epochs=args.phase1_epochs,
        phase2_epochs=args.phase2_epochs,
    )

    # Branch checkpoints are shared by every variant: the branch architecture
    # only depends on d and n_stages, which the sweep holds fixed.
    branch_dir = args.out / "branches"
    checkpoints = {
        m: pretrain_branch(m, manifest, ModelConfig(**base_cfg), train_cfg, branch_dir).final_path
        for m in ("rgb", "flow", "audio")
    }

    rows = []

    def evaluate(label: str, path: Path) -> None:
        model = load_model(path)
        tr, te = (spearman(*predict_scores(model, manifest, s)) for s in ("train", "test"))
        rows.append((label, tr, te))
        print(f"  {label:<18} train {tr:+.3f}  test {te:+.3f}")

    print("fusion variants:")
    for label, overrides in ABLATIONS:
        cfg = ModelConfig(**base_cfg, **overrides)
        run_dir = args.out / label.replace(" ", "_")
        result = train_mixed(manifest, cfg, train_cfg, run_dir,
                             branch_checkpoints=checkpoints)
        evaluate(label, result.final_path)

    if not args.skip_baselines:
        print("late-fusion baselines (trained end to end):")
        for name in BASELINES:
            result = train_mixed(manifest, ModelConfig(**base_cfg), train_cfg,
                                 args.out / f"baseline_{name}", baseline=name)
            evaluate(f"baseline {name}", result.final_path)

    rows.sort(key=lambda r: r[2], reverse=True)
    print(f"\nranked by test rho ({time.time() - started:.1f}s total):")
    for label, tr, te in rows:
        print(f"  {label:<18} {te:+.3f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
