from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # oracles.py

from avloc.config import TrainConfig
from avloc.ingest import (
    AnnotationRecord,
    FixtureConfig,
    make_fixture_dataset,
    serialize_annotations,
    write_wav,
)
from avloc.model import ModelConfig
from avloc.preprocess import PreprocessConfig
from PIL import Image


def tiny_model_cfg(**kw) -> ModelConfig:
    base = dict(
        vis_channels=(4, 8),
        aud_channels=(4, 8),
        embed_dim=16,
        pcm_enabled=True,
        pcm_iters=2,
        heatmap_res=(28, 28),
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_pre_cfg(**kw) -> PreprocessConfig:
    base = dict(sample_rate=4000, n_mels=16, n_fft=512, aug_enabled=False)
    base.update(kw)
    return PreprocessConfig(**base)


def tiny_train_cfg(**kw) -> TrainConfig:
    base = dict(batch_size=2, base_lr=1e-3, ssl_head_lr=1e-3, steps=3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def micro_fixture(tmp_path_factory):
    """Very small synthetic corpus for fast harness tests."""
    out = tmp_path_factory.mktemp("micro_fixture")
    cfg = FixtureConfig(n_labeled=3, n_unlabeled=3, n_test=2, sample_rate=4000)
    manifest = make_fixture_dataset(cfg, seed=11, out_dir=out)
    return manifest


@pytest.fixture(scope="session")
def unlabeled_fixture(tmp_path_factory):
    out = tmp_path_factory.mktemp("unlabeled_fixture")
    cfg = FixtureConfig(n_labeled=0, n_unlabeled=4, n_test=2, sample_rate=4000)
    manifest = make_fixture_dataset(cfg, seed=5, out_dir=out)
    return manifest


@pytest.fixture(scope="session")
def standard_fixture(tmp_path_factory):
    """The acceptance-scale corpus: 32 labeled + 64 unlabeled train, 8 test."""
    out = tmp_path_factory.mktemp("standard_fixture")
    cfg = FixtureConfig(n_labeled=32, n_unlabeled=64, n_test=8)
    return make_fixture_dataset(cfg, seed=7, out_dir=out)


def write_synth_video(
    media_root: Path,
    video_id: str,
    n_frames: int = 80,
    fps: float = 20.0,
    duration_s: float = 10.0,
    sample_rate: int = 4000,
) -> None:
    """Video stand-in: numbered PNG frames plus one mono track whose sample
    values encode time, so slicing is easy to verify."""
    frames_dir = media_root / video_id / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n_frames):
        arr = np.full((120, 328, 3), i % 251, dtype=np.uint8)
        Image.fromarray(arr).save(frames_dir / f"{i:06d}.png")
    n = int(duration_s * sample_rate)
    ramp = 0.9 * np.arange(n) / n  # monotone, strictly inside [-1, 1]
    write_wav(media_root / video_id / "audio.wav", ramp, sample_rate)


def record(
    video_id="vid0",
    start=0.0,
    end=2.0,
    fps=20.0,
    bbox=(10.0, 10.0, 100.0, 60.0),
    sound_type="scream",
    annotator=0,
) -> AnnotationRecord:
    return AnnotationRecord(
        video_id=video_id,
        start_time_s=start,
        end_time_s=end,
        fps=fps,
        bbox=bbox,
        sound_type=sound_type,
        annotator_index=annotator,
    ).validate()


def write_annotations(path: Path, records) -> None:
    path.write_text(serialize_annotations(list(records)), encoding="utf-8")
