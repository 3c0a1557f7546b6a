"""Dataset manifests, feature containers, windowing, and a synthetic generator.

Videos arrive as pre-extracted segment features: one container file per video
holding aligned ``rgb`` / ``flow`` / ``audio`` float32 matrices of shape
``(T, D_m)``, plus a manifest that carries raw scores, the score ceiling used
for label normalization, and the expected feature widths.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import MODALITIES
from .storage import ContainerError, read_container, write_container


class DataError(ValueError):
    """Validation failure in manifests, feature files, or labels."""


# Widths of common video/flow/audio backbone embeddings; manifests may override.
DEFAULT_FEATURE_DIMS = {"rgb": 768, "flow": 1024, "audio": 768}

SPLITS = ("train", "test")


def normalize_score(raw: float, ceiling: float) -> float:
    """Map a raw judge score in [0, ceiling] to a training label in [0, 1]."""
    if not math.isfinite(ceiling) or ceiling <= 0:
        raise DataError(f"score ceiling must be a positive real, got {ceiling}")
    if not math.isfinite(raw) or raw < 0 or raw > ceiling:
        raise DataError(f"raw score {raw} outside [0, {ceiling}]")
    return raw / ceiling


@dataclass(frozen=True)
class FeatureDims:
    rgb: int
    flow: int
    audio: int

    def of(self, modality: str) -> int:
        return getattr(self, modality)

    def as_dict(self) -> dict[str, int]:
        return {m: self.of(m) for m in MODALITIES}

    def validate(self) -> None:
        for m in MODALITIES:
            if self.of(m) < 1:
                raise DataError(f"feature dim for {m} must be positive, got {self.of(m)}")


@dataclass(frozen=True)
class VideoEntry:
    video_id: str
    raw_score: float
    split: str
    path: str


@dataclass
class Manifest:
    """Dataset index: per-video entries plus dataset-level normalization info."""

    videos: list[VideoEntry]
    score_ceiling: float
    feature_dims: FeatureDims
    root: Path = field(default_factory=Path)

    def validate(self) -> None:
        self.feature_dims.validate()
        if not math.isfinite(self.score_ceiling) or self.score_ceiling <= 0:
            raise DataError(f"score_ceiling_C must be positive, got {self.score_ceiling}")
        seen: set[str] = set()
        for v in self.videos:
            if v.video_id in seen:
                raise DataError(f"duplicate video id {v.video_id!r}")
            seen.add(v.video_id)
            if v.split not in SPLITS:
                raise DataError(f"unknown split {v.split!r} for {v.video_id}")
            normalize_score(v.raw_score, self.score_ceiling)

    def validate_for_training(self) -> None:
        self.validate()
        for split in SPLITS:
            if not self.split_entries(split):
                raise DataError(f"training runs need a non-empty {split!r} split")

    def entry(self, video_id: str) -> VideoEntry:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise DataError(f"unknown video id {video_id!r}")

    def split_entries(self, split: str) -> list[VideoEntry]:
        return [v for v in self.videos if v.split == split]


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "score_ceiling_C": manifest.score_ceiling,
        "feature_dims": manifest.feature_dims.as_dict(),
        "videos": [
            {"id": v.video_id, "raw_score": v.raw_score, "split": v.split, "path": v.path}
            for v in manifest.videos
        ],
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    try:
        dims = FeatureDims(**doc.get("feature_dims", DEFAULT_FEATURE_DIMS))
        videos = [
            VideoEntry(v["id"], float(v["raw_score"]), v["split"], v["path"])
            for v in doc["videos"]
        ]
        manifest = Manifest(videos, float(doc["score_ceiling_C"]), dims, root=path.parent)
    except (KeyError, TypeError) as exc:
        raise DataError(f"manifest {path} is missing required fields: {exc}") from exc
    manifest.validate()
    return manifest


def export_labels_csv(manifest: Manifest, path: str | Path) -> None:
    """Write the plain (id, raw_score, split) table for interoperability."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "raw_score", "split"])
        for v in manifest.videos:
            writer.writerow([v.video_id, repr(v.raw_score), v.split])


@dataclass
class FeatureBundle:
    """Aligned per-video feature sequences plus the normalized label."""

    video_id: str
    rgb: np.ndarray
    flow: np.ndarray
    audio: np.ndarray
    label: float
    valid_len: int

    def feature(self, modality: str) -> np.ndarray:
        return getattr(self, modality)

    @property
    def num_segments(self) -> int:
        return self.rgb.shape[0]

    def validate(self) -> None:
        lengths = {m: self.feature(m).shape[0] for m in MODALITIES}
        if len(set(lengths.values())) != 1:
            raise DataError(f"{self.video_id}: segment counts differ across modalities: {lengths}")
        for m in MODALITIES:
            arr = self.feature(m)
            if arr.ndim != 2:
                raise DataError(f"{self.video_id}: {m} features must be 2-D, got shape {arr.shape}")
            if not np.isfinite(arr).all():
                raise DataError(f"{self.video_id}: non-finite values in {m} features")
        if not 0.0 <= self.label <= 1.0:
            raise DataError(f"{self.video_id}: label {self.label} outside [0, 1]")
        if not 0 <= self.valid_len <= self.num_segments:
            raise DataError(f"{self.video_id}: valid_len {self.valid_len} out of range")


def load_bundle(manifest: Manifest, video_id: str) -> FeatureBundle:
    """Load one video's aligned feature matrices and its normalized label."""
    entry = manifest.entry(video_id)
    try:
        arrays, _ = read_container(manifest.root / entry.path)
    except ContainerError as exc:
        raise DataError(str(exc)) from exc
    missing = [m for m in MODALITIES if m not in arrays]
    if missing:
        raise DataError(f"{video_id}: container is missing arrays {missing}")
    for m in MODALITIES:
        want = manifest.feature_dims.of(m)
        if arrays[m].ndim != 2 or arrays[m].shape[1] != want:
            raise DataError(
                f"{video_id}: {m} features have shape {arrays[m].shape}, expected (T, {want})"
            )
    bundle = FeatureBundle(
        video_id=video_id,
        rgb=arrays["rgb"],
        flow=arrays["flow"],
        audio=arrays["audio"],
        label=normalize_score(entry.raw_score, manifest.score_ceiling),
        valid_len=arrays["rgb"].shape[0],
    )
    bundle.validate()
    return bundle


def load_split(manifest: Manifest, split: str) -> list[FeatureBundle]:
    return [load_bundle(manifest, v.video_id) for v in manifest.split_entries(split)]


def sample_window(bundle: FeatureBundle, window: int, rng: np.random.Generator) -> FeatureBundle:
    """Crop ``window`` consecutive segments at a random offset, zero-padding short videos.

    Padding keeps all modalities aligned; ``valid_len`` records how many rows
    are real. Padded rows are consumed as-is downstream (no masking).
    """
    if window < 1:
        raise DataError(f"window must be >= 1, got {window}")
    t = bundle.num_segments
    if t >= window:
        start = int(rng.integers(0, t - window + 1))
        crop = {m: bundle.feature(m)[start:start + window] for m in MODALITIES}
        valid = window
    else:
        crop = {}
        for m in MODALITIES:
            arr = bundle.feature(m)
            padded = np.zeros((window, arr.shape[1]), dtype=arr.dtype)
            padded[:t] = arr
            crop[m] = padded
        valid = t
    return replace(bundle, rgb=crop["rgb"], flow=crop["flow"], audio=crop["audio"],
                   valid_len=valid)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic multimodal dataset generator.

    Each video has a latent quality ``q ~ Uniform(0, 1)`` (the raw score is
    ``q * score_ceiling``) and a shared rhythm signal. Every modality carries
    ``q`` through a fixed random projection, but offset by a per-video bias of
    scale ``quality_jitter``; the three biases are centered to sum to zero, so
    no single modality can recover the score exactly while combining all
    modalities can cancel the offsets completely. The audio quality channel is
    scaled by ``cross_modal_weight``; at 0 the audio stream carries rhythm
    only and is uninformative about the score.
    """

    n_videos: int = 24
    t_range: tuple[int, int] = (48, 90)
    dims: FeatureDims = FeatureDims(rgb=48, flow=64, audio=48)
    cross_modal_weight: float = 0.8
    noise_scale: float = 0.25
    seed: int = 0
    train_fraction: float = 2.0 / 3.0
    score_ceiling: float = 25.0
    quality_jitter: float = 0.25

    def validate(self) -> None:
        if self.n_videos < 2:
            raise DataError("need at least 2 videos")
        if self.t_range[0] < 4 or self.t_range[1] < self.t_range[0]:
            raise DataError(f"bad segment-count range {self.t_range}")
        self.dims.validate()
        if not 0.0 <= self.cross_modal_weight <= 1.0:
            raise DataError("cross_modal_weight must be in [0, 1]")
        if self.noise_scale <= 0:
            raise DataError("noise_scale must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise DataError("train_fraction must be in (0, 1)")

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        doc = dict(doc)
        if "t_range" in doc:
            doc["t_range"] = tuple(doc["t_range"])
        if "dims" in doc:
            doc["dims"] = FeatureDims(**doc["dims"])
        try:
            spec = cls(**doc)
        except TypeError as exc:
            raise DataError(f"bad synthetic spec: {exc}") from exc
        spec.validate()
        return spec


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Manifest:
    """Write a synthetic dataset (manifest + per-video feature files) to ``out_dir``.

    Deterministic under ``spec.seed``: rerunning with the same spec produces
    byte-identical files.
    """
    spec.validate()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)

    # One fixed projection per modality, from the 2 latent channels to D_m.
    projections = {m: rng.standard_normal((2, spec.dims.of(m))) for m in MODALITIES}

    n_train = int(round(spec.n_videos * spec.train_fraction))
    n_train = min(max(n_train, 1), spec.n_videos - 1)

    videos: list[VideoEntry] = []
    for i in range(spec.n_videos):
        t = int(rng.integers(spec.t_range[0], spec.t_range[1] + 1))
        q = float(rng.uniform())
        jitter = rng.normal(0.0, spec.quality_jitter, size=3)
        jitter -= jitter.mean()
        freq = rng.uniform(0.05, 0.25)
        phase = rng.uniform()
        content = rng.standard_normal(t)
        rhythm = np.sin(2.0 * np.pi * (freq * np.arange(t) + phase))

        latents = {
            "rgb": np.stack([np.full(t, q + jitter[0]), content], axis=1),
            "flow": np.stack([np.full(t, q + jitter[1]), rhythm], axis=1),
            "audio": np.stack(
                [np.full(t, spec.cross_modal_weight * (q + jitter[2])), rhythm], axis=1
            ),
        }
        arrays = {}
        for m in MODALITIES:
            feats = latents[m] @ projections[m]
            feats = feats + spec.noise_scale * rng.standard_normal(feats.shape)
            arrays[m] = feats.astype("<f4")

        video_id = f"v{i:04d}"
        rel_path = f"features/{video_id}.npz"
        write_container(out_dir / rel_path, arrays)
        split = "train" if i < n_train else "test"
        videos.append(VideoEntry(video_id, q * spec.score_ceiling, split, rel_path))

    manifest = Manifest(videos, spec.score_ceiling, spec.dims, root=out_dir)
    manifest.validate()
    save_manifest(manifest, out_dir / "manifest.json")
    export_labels_csv(manifest, out_dir / "labels.csv")
    return manifest
