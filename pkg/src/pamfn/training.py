"""Two-phase training: per-modality branch pretraining, then mixed-branch training.

Phase 1 trains each modality branch independently with momentum SGD. Phase 2
loads those checkpoints, freezes the RGB and flow branches (parameters out of
the optimizer, normalization in running-stats mode so buffers stay put), and
trains the audio branch, the mixed branch, and the decoders with AdamW. A
one-stage mode trains everything at once for baseline comparisons.
"""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import MODALITIES
from .branch import ModalityBranch, RegressionHead
from .data import FeatureDims, Manifest, load_split, sample_window
from .network import BranchScorer, ModelConfig, build_model
from .storage import read_container, write_container


class TrainingError(RuntimeError):
    """Training could not proceed (divergence, missing inputs, config mismatch)."""


FROZEN_PHASE2 = ("rgb", "flow")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    window: int = 70
    batch_size: int = 32
    phase1_lr: float = 0.01
    phase1_momentum: float = 0.9
    phase1_weight_decay: float = 1e-4
    phase1_epochs: int = 250
    phase2_lr: float = 5e-4
    phase2_epochs: int = 400
    head_lr_multiplier: float = 0.1

    def validate(self) -> None:
        if self.window < 1 or self.batch_size < 1:
            raise TrainingError("window and batch_size must be positive")
        if self.phase1_epochs < 1 or self.phase2_epochs < 1:
            raise TrainingError("epoch counts must be positive")
        if self.phase1_lr < 0 or self.phase2_lr < 0 or self.head_lr_multiplier < 0:
            raise TrainingError("learning rates must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        try:
            cfg = cls(**doc)
        except TypeError as exc:
            raise TrainingError(f"bad train config: {exc}") from exc
        cfg.validate()
        return cfg


def cosine_lr(base: float, epoch: int, total_epochs: int) -> float:
    """Cosine decay from ``base`` at epoch 0 to 0 at the final epoch."""
    if total_epochs <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1)))


def mse_loss(pred, target) -> torch.Tensor:
    pred = torch.as_tensor(pred)
    if not pred.dtype.is_floating_point:
        pred = pred.to(torch.get_default_dtype())
    target = torch.as_tensor(target, dtype=pred.dtype)
    return torch.mean((pred - target) ** 2)


def derive_seed(seed: int, role: str) -> int:
    """Independent, reproducible sub-seed for a named role of a run."""
    ss = np.random.SeedSequence([seed, zlib.crc32(role.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def derive_rng(seed: int, role: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(role.encode("utf-8"))])
    )


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    module: nn.Module,
    *,
    kind: str,
    phase: str,
    epoch: int,
    model_config: ModelConfig,
    feature_dims: FeatureDims,
    train_config: TrainConfig | None = None,
    modality: str | None = None,
    rng_state: dict | None = None,
) -> Path:
    path = Path(path)
    arrays = {
        f"state/{name}": tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }
    meta = {
        "kind": kind,
        "phase": phase,
        "epoch": epoch,
        "model_config": model_config.to_dict(),
        "feature_dims": feature_dims.as_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "modality": modality,
        "rng_state": rng_state,
    }
    write_container(path, arrays, meta)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    arrays, meta = read_container(path)
    state = {
        name[len("state/"):]: torch.from_numpy(arr.copy())
        for name, arr in arrays.items()
        if name.startswith("state/")
    }
    if meta is None or "kind" not in meta:
        raise TrainingError(f"{path} is not a checkpoint (missing metadata)")
    return state, meta


def load_model(path: str | Path) -> nn.Module:
    """Rebuild the module a checkpoint was saved from and restore its weights.

    Branch checkpoints come back wrapped in a ``BranchScorer`` so every loaded
    model exposes the same three-input scoring interface.
    """
    state, meta = load_checkpoint(path)
    model_config = ModelConfig.from_dict(meta["model_config"])
    dims = FeatureDims(**meta["feature_dims"])
    kind = meta["kind"]
    if kind == "branch":
        branch = ModalityBranch(
            dims.of(meta["modality"]), model_config.d, model_config.n_stages,
            model_config.dropout,
        )
        branch.load_state_dict(state, strict=True)
        module: nn.Module = BranchScorer(branch, meta["modality"])
    else:
        if kind == "pamfn":
            module = build_model(model_config, dims)
        elif kind.startswith("baseline_"):
            module = build_model(model_config, dims, baseline=kind[len("baseline_"):])
        else:
            raise TrainingError(f"unknown checkpoint kind {kind!r}")
        module.load_state_dict(state, strict=True)
    module.eval()
    return module


def _check_branch_checkpoint(
    meta: dict, modality: str, model_config: ModelConfig, dims: FeatureDims
) -> None:
    if meta["kind"] != "branch" or meta.get("modality") != modality:
        raise TrainingError(
            f"expected a phase-1 {modality} branch checkpoint, got kind={meta['kind']!r} "
            f"modality={meta.get('modality')!r}"
        )
    saved = ModelConfig.from_dict(meta["model_config"])
    for field_name in ("d", "n_stages"):
        if getattr(saved, field_name) != getattr(model_config, field_name):
            raise TrainingError(
                f"{modality} checkpoint has {field_name}={getattr(saved, field_name)}, "
                f"run config has {getattr(model_config, field_name)}"
            )
    if FeatureDims(**meta["feature_dims"]).of(modality) != dims.of(modality):
        raise TrainingError(f"{modality} checkpoint feature dim mismatch")


# --- batching ---------------------------------------------------------------

def _epoch_batches(bundles, window: int, batch_size: int, rng: np.random.Generator):
    """Shuffle videos, crop one window each, and yield stacked float32 batches."""
    order = rng.permutation(len(bundles))
    for start in range(0, len(order), batch_size):
        chunk = [bundles[i] for i in order[start:start + batch_size]]
        windows = [sample_window(b, window, rng) for b in chunk]
        tensors = tuple(
            torch.from_numpy(np.stack([w.feature(m) for w in windows]))
            for m in MODALITIES
        )
        labels = torch.tensor([w.label for w in windows], dtype=torch.float32)
        yield tensors, labels


def _write_loss_csv(path: Path, rows: list[tuple[int, float, float]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "loss"])
        for epoch, lr, loss in rows:
            writer.writerow([epoch, repr(lr), repr(loss)])


def _set_lrs(optimizer, base_lrs: list[float], epoch: int, total: int) -> float:
    lr_now = 0.0
    for group, base in zip(optimizer.param_groups, base_lrs):
        group["lr"] = cosine_lr(base, epoch, total)
        lr_now = max(lr_now, group["lr"])
    return lr_now


@dataclass
class TrainResult:
    final_path: Path
    best_path: Path
    losses: list[float]


# --- phase 1 -----------------------------------------------------------------

def pretrain_branch(
    modality: str,
    manifest: Manifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    run_dir: str | Path,
) -> TrainResult:
    """Train one modality branch on MSE over random windows of the train split."""
    if modality not in MODALITIES:
        raise TrainingError(f"unknown modality {modality!r}")
    model_config.validate()
    train_config.validate()
    manifest.validate_for_training()
    run_dir = Path(run_dir)
    tag = f"phase1_{modality}"

    torch.manual_seed(derive_seed(train_config.seed, f"init_{tag}"))
    branch = ModalityBranch(
        manifest.feature_dims.of(modality), model_config.d,
        model_config.n_stages, model_config.dropout,
    )
    data_rng = derive_rng(train_config.seed, f"data_{tag}")
    bundles = load_split(manifest, "train")
    mod_index = MODALITIES.index(modality)

    optimizer = torch.optim.SGD(
        branch.parameters(),
        lr=train_config.phase1_lr,
        momentum=train_config.phase1_momentum,
        weight_decay=train_config.phase1_weight_decay,
    )
    base_lrs = [train_config.phase1_lr]

    best_loss = math.inf
    best_state = None
    best_epoch = 0
    rows: list[tuple[int, float, float]] = []
    for epoch in range(train_config.phase1_epochs):
        lr_now = _set_lrs(optimizer, base_lrs, epoch, train_config.phase1_epochs)
        branch.train()
        total, count = 0.0, 0
        for tensors, labels in _epoch_batches(
            bundles, train_config.window, train_config.batch_size, data_rng
        ):
            optimizer.zero_grad()
            _, score = branch(tensors[mod_index])
            loss = mse_loss(score, labels)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(labels)
            count += len(labels)
        epoch_loss = total / count
        if not math.isfinite(epoch_loss):
            raise TrainingError(
                f"{tag} diverged at epoch {epoch}: loss={epoch_loss}, lr={lr_now}"
            )
        rows.append((epoch, lr_now, epoch_loss))
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in branch.state_dict().items()}

    _write_loss_csv(run_dir / "logs" / f"{tag}_loss.csv", rows)
    ckpt_args = dict(
        kind="branch", model_config=model_config, feature_dims=manifest.feature_dims,
        train_config=train_config, modality=modality,
        rng_state=data_rng.bit_generator.state,
    )
    final_path = save_checkpoint(
        run_dir / "checkpoints" / f"{tag}.npz", branch,
        phase="phase1", epoch=train_config.phase1_epochs - 1, **ckpt_args,
    )
    best_branch = ModalityBranch(
        manifest.feature_dims.of(modality), model_config.d,
        model_config.n_stages, model_config.dropout,
    )
    best_branch.load_state_dict(best_state)
    best_path = save_checkpoint(
        run_dir / "checkpoints" / f"{tag}_best.npz", best_branch,
        phase="phase1", epoch=best_epoch, **ckpt_args,
    )
    return TrainResult(final_path, best_path, [r[2] for r in rows])


# --- phase 2 -----------------------------------------------------------------

def _head_param_ids(model: nn.Module) -> set[int]:
    ids: set[int] = set()
    for module in model.modules():
        if isinstance(module, RegressionHead):
            ids.update(id(p) for p in module.parameters())
    return ids


def _phase2_param_groups(model: nn.Module, cfg: TrainConfig):
    """Trainable params in two groups: regression heads at a reduced lr, the rest at base lr."""
    head_ids = _head_param_ids(model)
    head, rest = [], []
    for p in model.parameters():
        if not p.requires_grad:
            continue
        (head if id(p) in head_ids else rest).append(p)
    groups = [
        {"params": rest, "lr": cfg.phase2_lr},
        {"params": head, "lr": cfg.phase2_lr * cfg.head_lr_multiplier},
    ]
    base_lrs = [cfg.phase2_lr, cfg.phase2_lr * cfg.head_lr_multiplier]
    return groups, base_lrs


def apply_phase2_freeze(model: nn.Module, frozen: tuple[str, ...] = FROZEN_PHASE2) -> None:
    """Exclude branches from optimization and pin their normalization buffers."""
    for m in frozen:
        model.branches[m].requires_grad_(False)
        model.branches[m].eval()


def _set_train_mode(model: nn.Module, frozen: tuple[str, ...]) -> None:
    model.train()
    for m in frozen:
        model.branches[m].eval()


def train_mixed(
    manifest: Manifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    run_dir: str | Path,
    branch_checkpoints: dict[str, str | Path] | None = None,
    one_stage: bool = False,
    baseline: str | None = None,
) -> TrainResult:
    """Train the fusion model (or a late-fusion baseline) on the train split.

    Two-phase mode loads the three branch checkpoints and freezes RGB and
    flow; one-stage mode trains everything from scratch. Baselines train end
    to end unless checkpoints are passed explicitly, in which case their
    branches are warm-started and frozen the same way.
    """
    model_config.validate()
    train_config.validate()
    manifest.validate_for_training()
    run_dir = Path(run_dir)
    if baseline is not None:
        tag = f"baseline_{baseline}"
        kind = f"baseline_{baseline}"
    else:
        tag = "one_stage" if one_stage else "phase2"
        kind = "pamfn"

    torch.manual_seed(derive_seed(train_config.seed, f"init_{tag}"))
    model = build_model(model_config, manifest.feature_dims, baseline=baseline)

    frozen: tuple[str, ...] = ()
    needs_checkpoints = not one_stage and (baseline is None or branch_checkpoints is not None)
    if needs_checkpoints:
        if branch_checkpoints is None or set(branch_checkpoints) != set(MODALITIES):
            raise TrainingError(
                "two-phase training needs checkpoints for all of rgb, flow, audio"
            )
        for m in MODALITIES:
            state, meta = load_checkpoint(branch_checkpoints[m])
            _check_branch_checkpoint(meta, m, model_config, manifest.feature_dims)
            model.branches[m].load_state_dict(state, strict=True)
        frozen = FROZEN_PHASE2
        apply_phase2_freeze(model, frozen)

    data_rng = derive_rng(train_config.seed, f"data_{tag}")
    gumbel = torch.Generator().manual_seed(derive_seed(train_config.seed, f"gumbel_{tag}"))
    bundles = load_split(manifest, "train")

    groups, base_lrs = _phase2_param_groups(model, train_config)
    optimizer = torch.optim.AdamW(groups)

    best_loss = math.inf
    best_state = None
    best_epoch = 0
    rows: list[tuple[int, float, float]] = []
    for epoch in range(train_config.phase2_epochs):
        lr_now = _set_lrs(optimizer, base_lrs, epoch, train_config.phase2_epochs)
        _set_train_mode(model, frozen)
        total, count = 0.0, 0
        for tensors, labels in _epoch_batches(
            bundles, train_config.window, train_config.batch_size, data_rng
        ):
            optimizer.zero_grad()
            score, _ = model(*tensors, generator=gumbel)
            loss = mse_loss(score, labels)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(labels)
            count += len(labels)
        epoch_loss = total / count
        if not math.isfinite(epoch_loss):
            raise TrainingError(
                f"{tag} diverged at epoch {epoch}: loss={epoch_loss}, lr={lr_now}"
            )
        rows.append((epoch, lr_now, epoch_loss))
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    _write_loss_csv(run_dir / "logs" / f"{tag}_loss.csv", rows)
    ckpt_args = dict(
        kind=kind, model_config=model_config, feature_dims=manifest.feature_dims,
        train_config=train_config, rng_state=data_rng.bit_generator.state,
    )
    final_path = save_checkpoint(
        run_dir / "checkpoints" / f"{tag}.npz", model,
        phase=tag, epoch=train_config.phase2_epochs - 1, **ckpt_args,
    )
    best_model = build_model(model_config, manifest.feature_dims, baseline=baseline)
    best_model.load_state_dict(best_state)
    best_path = save_checkpoint(
        run_dir / "checkpoints" / f"{tag}_best.npz", best_model,
        phase=tag, epoch=best_epoch, **ckpt_args,
    )
    return TrainResult(final_path, best_path, [r[2] for r in rows])
