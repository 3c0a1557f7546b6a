import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pamfn.data import (
    DataError,
    FeatureBundle,
    FeatureDims,
    Manifest,
    SyntheticSpec,
    VideoEntry,
    export_labels_csv,
    generate_synthetic,
    load_bundle,
    load_manifest,
    load_split,
    normalize_score,
    sample_window,
    save_manifest,
)
from pamfn.storage import write_container

DIMS = FeatureDims(rgb=4, flow=3, audio=2)


def make_manifest(tmp_path, entries):
    videos = []
    for vid, raw, split, t in entries:
        rel = f"features/{vid}.npz"
        rng = np.random.default_rng(hash(vid) % 2**32)
        arrays = {
            m: rng.standard_normal((t, DIMS.of(m))).astype(np.float32)
            for m in ("rgb", "flow", "audio")
        }
        write_container(tmp_path / rel, arrays)
        videos.append(VideoEntry(vid, raw, split, rel))
    return Manifest(videos, score_ceiling=10.0, feature_dims=DIMS, root=tmp_path)


# --- score normalization ------------------------------------------------------

@given(st.floats(0.01, 100.0), st.floats(0.0, 1.0))
def test_normalize_score_maps_into_unit_interval(ceiling, frac):
    raw = frac * ceiling
    label = normalize_score(raw, ceiling)
    assert 0.0 <= label <= 1.0
    assert label == pytest.approx(raw / ceiling)


@pytest.mark.parametrize(
    "raw,ceiling",
    [(-0.1, 10.0), (10.1, 10.0), (5.0, 0.0), (5.0, -1.0),
     (float("nan"), 10.0), (5.0, float("inf"))],
)
def test_normalize_score_rejects_bad_inputs(raw, ceiling):
    with pytest.raises(DataError):
        normalize_score(raw, ceiling)


# --- dims and manifest --------------------------------------------------------

def test_feature_dims_accessors():
    assert DIMS.of("rgb") == 4 and DIMS.of("audio") == 2
    assert DIMS.as_dict() == {"rgb": 4, "flow": 3, "audio": 2}
    with pytest.raises(DataError):
        FeatureDims(0, 3, 2).validate()


def test_manifest_validation(tmp_path):
    manifest = make_manifest(tmp_path, [("v0", 5.0, "train", 8), ("v1", 7.0, "test", 8)])
    manifest.validate_for_training()
    assert manifest.entry("v1").raw_score == 7.0
    with pytest.raises(DataError, match="unknown video id"):
        manifest.entry("missing")

    dup = Manifest(
        [VideoEntry("v0", 1.0, "train", "x"), VideoEntry("v0", 2.0, "test", "y")],
        10.0, DIMS,
    )
    with pytest.raises(DataError, match="duplicate"):
        dup.validate()

    bad_split = Manifest([VideoEntry("v0", 1.0, "val", "x")], 10.0, DIMS)
    with pytest.raises(DataError, match="unknown split"):
        bad_split.validate()

    out_of_range = Manifest([VideoEntry("v0", 11.0, "train", "x")], 10.0, DIMS)
    with pytest.raises(DataError):
        out_of_range.validate()

    train_only = Manifest([VideoEntry("v0", 1.0, "train", "x")], 10.0, DIMS)
    with pytest.raises(DataError, match="non-empty"):
        train_only.validate_for_training()


def test_manifest_round_trip(tmp_path):
    manifest = make_manifest(tmp_path, [("v0", 5.0, "train", 8), ("v1", 7.5, "test", 9)])
    save_manifest(manifest, tmp_path / "manifest.json")
    back = load_manifest(tmp_path / "manifest.json")
    assert back.score_ceiling == manifest.score_ceiling
    assert back.feature_dims == manifest.feature_dims
    assert back.videos == manifest.videos
    assert back.root == tmp_path


def test_load_manifest_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_manifest(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(DataError, match="valid JSON"):
        load_manifest(bad)
    incomplete = tmp_path / "incomplete.json"
    incomplete.write_text(json.dumps({"videos": []}))
    with pytest.raises(DataError, match="missing required fields"):
        load_manifest(incomplete)


def test_export_labels_csv(tmp_path):
    manifest = make_manifest(tmp_path, [("v0", 5.25, "train", 8)])
    export_labels_csv(manifest, tmp_path / "labels.csv")
    lines = (tmp_path / "labels.csv").read_text().strip().splitlines()
    assert lines[0] == "id,raw_score,split"
    assert lines[1] == "v0,5.25,train"


# --- bundles ------------------------------------------------------------------

def test_load_bundle_and_split(tmp_path):
    manifest = make_manifest(tmp_path, [("v0", 5.0, "train", 8), ("v1", 7.0, "test", 11)])
    bundle = load_bundle(manifest, "v1")
    assert bundle.num_segments == 11
    assert bundle.valid_len == 11
    assert bundle.label == pytest.approx(0.7)
    assert bundle.feature("flow").shape == (11, 3)
    assert [b.video_id for b in load_split(manifest, "train")] == ["v0"]


def test_load_bundle_rejects_wrong_width(tmp_path):
    manifest = make_manifest(tmp_path, [("v0", 5.0, "train", 8)])
    write_container(
        tmp_path / "features/v0.npz",
        {"rgb": np.zeros((8, 4), np.float32), "flow": np.zeros((8, 9), np.float32),
         "audio": np.zeros((8, 2), np.float32)},
    )
    with pytest.raises(DataError, match="flow features have shape"):
        load_bundle(manifest, "v0")


def test_load_bundle_rejects_missing_modality(tmp_path):
    manifest = make_manifest(tmp_path, [("v0", 5.0, "train", 8)])
    write_container(tmp_path / "features/v0.npz", {"rgb": np.zeros((8, 4), np.float32)})
    with pytest.raises(DataError, match="missing arrays"):
        load_bundle(manifest, "v0")


def test_bundle_validate_catches_misalignment():
    bundle = FeatureBundle(
        "v0", np.zeros((4, 2)), np.zeros((5, 2)), np.zeros((4, 2)), 0.5, 4
    )
    with pytest.raises(DataError, match="segment counts differ"):
        bundle.validate()
    nonfinite = FeatureBundle(
        "v0", np.full((4, 2), np.nan), np.zeros((4, 2)), np.zeros((4, 2)), 0.5, 4
    )
    with pytest.raises(DataError, match="non-finite"):
        nonfinite.validate()


# --- windowing ----------------------------------------------------------------

def _bundle(t):
    rng = np.random.default_rng(t)
    return FeatureBundle(
        "v0",
        rng.standard_normal((t, 4)).astype(np.float32),
        rng.standard_normal((t, 3)).astype(np.float32),
        rng.standard_normal((t, 2)).astype(np.float32),
        0.5,
        t,
    )


@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 10_000))
def test_sample_window_shapes_and_alignment(t, window, seed):
    bundle = _bundle(t)
    out = sample_window(bundle, window, np.random.default_rng(seed))
    for m in ("rgb", "flow", "audio"):
        assert out.feature(m).shape == (window, bundle.feature(m).shape[1])
    if t >= window:
        assert out.valid_len == window
        starts = np.flatnonzero(
            (bundle.rgb[: t - window + 1, 0] == out.rgb[0, 0])
        )
        assert any(
            np.array_equal(bundle.rgb[s:s + window], out.rgb)
            and np.array_equal(bundle.flow[s:s + window], out.flow)
            and np.array_equal(bundle.audio[s:s + window], out.audio)
            for s in starts
        )
    else:
        assert out.valid_len == t
        np.testing.assert_array_equal(out.rgb[:t], bundle.rgb)
        assert not out.rgb[t:].any() and not out.audio[t:].any()


def test_sample_window_deterministic_under_rng_state():
    bundle = _bundle(25)
    a = sample_window(bundle, 8, np.random.default_rng(42))
    b = sample_window(bundle, 8, np.random.default_rng(42))
    np.testing.assert_array_equal(a.rgb, b.rgb)


def test_sample_window_rejects_bad_window():
    with pytest.raises(DataError):
        sample_window(_bundle(5), 0, np.random.default_rng(0))


# --- synthetic generator --------------------------------------------------------

def test_synthetic_spec_validation():
    with pytest.raises(DataError):
        SyntheticSpec(n_videos=1).validate()
    with pytest.raises(DataError):
        SyntheticSpec(t_range=(10, 5)).validate()
    with pytest.raises(DataError):
        SyntheticSpec(cross_modal_weight=1.5).validate()
    with pytest.raises(DataError):
        SyntheticSpec(train_fraction=1.0).validate()
    spec = SyntheticSpec.from_dict(
        {"n_videos": 6, "t_range": [8, 12], "dims": {"rgb": 3, "flow": 4, "audio": 5}}
    )
    assert spec.t_range == (8, 12)
    assert spec.dims == FeatureDims(3, 4, 5)
    with pytest.raises(DataError, match="bad synthetic spec"):
        SyntheticSpec.from_dict({"unknown_field": 1})


def test_generate_synthetic_contents(tmp_path):
    spec = SyntheticSpec(
        n_videos=6, t_range=(8, 12), dims=FeatureDims(3, 4, 5), seed=9,
        train_fraction=2.0 / 3.0,
    )
    manifest = generate_synthetic(spec, tmp_path / "data")
    assert len(manifest.videos) == 6
    assert len(manifest.split_entries("train")) == 4
    assert len(manifest.split_entries("test")) == 2
    assert (tmp_path / "data" / "manifest.json").is_file()
    assert (tmp_path / "data" / "labels.csv").is_file()
    for entry in manifest.videos:
        bundle = load_bundle(manifest, entry.video_id)
        assert 8 <= bundle.num_segments <= 12
        assert bundle.rgb.dtype == np.float32
        assert 0.0 <= bundle.label <= 1.0
        assert entry.raw_score == pytest.approx(bundle.label * spec.score_ceiling)


def test_generate_synthetic_is_byte_deterministic(tmp_path):
    spec = SyntheticSpec(n_videos=4, t_range=(8, 10), dims=FeatureDims(3, 4, 5), seed=1)
    m1 = generate_synthetic(spec, tmp_path / "a")
    m2 = generate_synthetic(spec, tmp_path / "b")
    assert (tmp_path / "a" / "manifest.json").read_bytes() == \
        (tmp_path / "b" / "manifest.json").read_bytes()
    for entry in m1.videos:
        assert (tmp_path / "a" / entry.path).read_bytes() == \
            (tmp_path / "b" / entry.path).read_bytes()
    m3 = generate_synthetic(
        SyntheticSpec(n_videos=4, t_range=(8, 10), dims=FeatureDims(3, 4, 5), seed=2),
        tmp_path / "c",
    )
    assert (tmp_path / "a" / m1.videos[0].path).read_bytes() != \
        (tmp_path / "c" / m3.videos[0].path).read_bytes()
