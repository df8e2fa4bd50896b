from __future__ import annotations

import filecmp
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avloc.errors import AnnotationParseError, MediaError, ValidationError
from avloc.ingest import (
    AnnotationRecord,
    FixtureConfig,
    apply_labeled_fraction,
    extract_pair,
    ingest_corpus,
    make_fixture_dataset,
    middle_frame_index,
    parse_annotations,
    read_manifest,
    read_wav,
    serialize_annotations,
    slice_audio_window,
    write_manifest,
)
from conftest import record, write_annotations, write_synth_video


# ---------------------------------------------------------------- parsing

def test_parse_full_frame_row():
    rows = "vid1 1.0 2.0 30 0 0 328 120 scream 0\n"
    (rec,) = parse_annotations(rows)
    assert rec.video_id == "vid1"
    assert rec.bbox == (0.0, 0.0, 328.0, 120.0)
    assert rec.sound_type == "scream"


def test_parse_rejects_out_of_frame_x():
    with pytest.raises(ValidationError, match="x-range"):
        parse_annotations("vid1 1.0 2.0 30 0 0 400 120 scream 0\n")


def test_parse_three_rows_in_order():
    text = (
        "# comment line\n"
        "vidA 0.0 2.0 25 5 5 50 50 gunshot 0\n"
        "\n"
        "vidA 1.0 3.0 25 60 10 90 40 scream 1   # trailing comment\n"
        "vidB 0.5 0.5 30 100 20 200 100 drum 2\n"
    )
    expected = [
        AnnotationRecord("vidA", 0.0, 2.0, 25.0, (5.0, 5.0, 50.0, 50.0), "gunshot", 0),
        AnnotationRecord("vidA", 1.0, 3.0, 25.0, (60.0, 10.0, 90.0, 40.0), "scream", 1),
        AnnotationRecord("vidB", 0.5, 0.5, 30.0, (100.0, 20.0, 200.0, 100.0), "drum", 2),
    ]
    assert parse_annotations(text) == expected


def test_parse_error_names_line_and_field():
    with pytest.raises(AnnotationParseError, match=r"line 2.*field 'fps'"):
        parse_annotations("vid1 0 1 30 0 0 10 10 a 0\nvid2 0 1 xx 0 0 10 10 a 0\n")
    with pytest.raises(AnnotationParseError, match="line 1"):
        parse_annotations("vid1 0 1 30 0 0 10 10 a\n")  # missing field


def test_parse_rejects_inverted_span_and_bad_fps():
    with pytest.raises(ValidationError, match="start"):
        parse_annotations("v 2.0 1.0 30 0 0 10 10 a 0\n")
    with pytest.raises(ValidationError, match="fps"):
        parse_annotations("v 0.0 1.0 0 0 0 10 10 a 0\n")


coords = st.tuples(
    st.floats(0, 327, allow_nan=False), st.floats(0, 119, allow_nan=False)
).flatmap(
    lambda lo: st.tuples(
        st.just(lo[0]),
        st.just(lo[1]),
        st.floats(lo[0] + 0.5, 328),
        st.floats(lo[1] + 0.5, 120),
    )
)


@given(
    start=st.floats(0, 50, allow_nan=False),
    span=st.floats(0, 10, allow_nan=False),
    fps=st.floats(1, 120, allow_nan=False),
    bbox=coords,
    label=st.text(
        alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd"), whitelist_characters="_-"),
        min_size=1,
        max_size=12,
    ),
    annotator=st.integers(0, 5),
)
@settings(max_examples=150, deadline=None)
def test_serialize_parse_round_trip(start, span, fps, bbox, label, annotator):
    rec = AnnotationRecord("vid_x", start, start + span, fps, bbox, label, annotator).validate()
    assert parse_annotations(serialize_annotations([rec])) == [rec]


# ----------------------------------------------------- middle_frame_index

@pytest.mark.parametrize(
    "start,end,fps,expected",
    [
        (0.0, 2.0, 30, 30),
        (1.0, 1.0, 25, 25),
        (0.0, 3.1, 24, 37),  # floor(1.55 * 24)
    ],
)
def test_middle_frame_index_values(start, end, fps, expected):
    assert middle_frame_index(start, end, fps) == expected


def test_middle_frame_index_rejects_negative_times():
    with pytest.raises(ValidationError):
        middle_frame_index(-1.0, 2.0, 30)
    with pytest.raises(ValidationError):
        middle_frame_index(0.0, -0.5, 30)


# ------------------------------------------------------------ audio window

def test_window_pads_head_when_center_near_start():
    sr = 4000
    track = np.ones(10 * sr, dtype=np.float32)
    out = slice_audio_window(track, sr, center_s=1.0)  # window (-0.5, 2.5)
    assert len(out) == 3 * sr
    pad = int(0.5 * sr)
    assert np.all(out[:pad] == 0)
    assert np.all(out[pad:] == 1)


def test_window_interior_is_untrimmed():
    sr = 4000
    track = np.arange(20 * sr, dtype=np.float32)
    out = slice_audio_window(track, sr, center_s=5.0)  # (3.5, 6.5)
    start = int(3.5 * sr)
    assert np.array_equal(out, track[start : start + 3 * sr])


def test_window_pads_tail_at_clip_end():
    sr = 4000
    track = np.ones(2 * sr, dtype=np.float32)
    out = slice_audio_window(track, sr, center_s=1.5)  # (0.0, 3.0) vs 2 s track
    assert len(out) == 3 * sr
    assert np.all(out[2 * sr :] == 0)
    assert np.all(out[: 2 * sr] == 1)


def test_window_length_exact_for_any_center():
    sr = 4000
    track = np.ones(5 * sr, dtype=np.float32)
    rng = np.random.default_rng(0)
    for center in (-2.0, 0.0, *rng.uniform(-1, 7, size=20), 6.5, 100.0):
        assert len(slice_audio_window(track, sr, float(center))) == 3 * sr


# ------------------------------------------------------------ extract_pair

def test_extract_pair_reads_middle_frame_and_window(tmp_path):
    write_synth_video(tmp_path, "vid0", n_frames=80, fps=20.0, duration_s=10.0)
    rec = record(start=1.0, end=3.0, fps=20.0)  # center 2.0 s -> frame 40
    pair = extract_pair("vid0", rec, tmp_path)
    assert pair.pair_id == "vid0_000040"
    assert pair.image.shape == (120, 328, 3)
    assert int(pair.image[0, 0, 0]) == 40
    assert len(pair.audio) == 3 * pair.sample_rate
    track, sr = read_wav(tmp_path / "vid0" / "audio.wav")
    start = int(0.5 * sr)
    assert np.array_equal(pair.audio, track[start : start + 3 * sr])
    assert pair.gt_boxes == [rec]  # single annotation is the ground truth


def test_extract_pair_pools_covering_annotations(tmp_path):
    write_synth_video(tmp_path, "vid0")
    target = record(start=1.0, end=3.0)  # center 2.0
    covering = record(start=1.5, end=2.5, bbox=(200, 20, 300, 100), sound_type="drum")
    disjoint = record(start=5.0, end=6.0, bbox=(0, 0, 50, 50))
    pair = extract_pair("vid0", target, tmp_path, video_records=[target, covering, disjoint])
    assert pair.gt_boxes == [target, covering]


def test_extract_pair_single_annotation_fallback_ignores_coverage(tmp_path):
    write_synth_video(tmp_path, "vid0")
    # degenerate instant at 0.0 but the only annotation: still the gt
    rec = record(start=0.0, end=0.0)
    pair = extract_pair("vid0", rec, tmp_path, video_records=[rec])
    assert pair.gt_boxes == [rec]


def test_extract_pair_missing_media(tmp_path):
    with pytest.raises(MediaError, match="missing frame"):
        extract_pair("ghost", record(video_id="ghost"), tmp_path)


def test_extract_pair_undecodable_frame(tmp_path):
    write_synth_video(tmp_path, "vid0", n_frames=50)
    (tmp_path / "vid0" / "frames" / "000020.png").write_bytes(b"not a png")
    rec = record(start=1.0, end=1.0, fps=20.0)  # frame 20
    with pytest.raises(MediaError, match="frame 20"):
        extract_pair("vid0", rec, tmp_path)


# ---------------------------------------------------------------- manifest

def test_manifest_round_trip(tmp_path, micro_fixture):
    path = tmp_path / "manifest.jsonl"
    write_manifest(path, micro_fixture.entries)
    # round-trip against the fixture's own media tree
    reread = read_manifest(micro_fixture.root / "manifest.jsonl")
    assert reread.entries == micro_fixture.entries


def test_manifest_rejects_duplicate_pair_id(tmp_path):
    line = '{"pair_id": "a", "image": "x.png", "audio": "x.wav", "annotation": null, "split": "train"}\n'
    p = tmp_path / "m.jsonl"
    p.write_text(line + line)
    with pytest.raises(ValidationError, match="duplicate"):
        read_manifest(p, check_paths=False)


def test_manifest_rejects_missing_paths(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(
        '{"pair_id": "a", "image": "gone.png", "audio": "gone.wav", "annotation": null, "split": "train"}\n'
    )
    with pytest.raises(ValidationError, match="missing file"):
        read_manifest(p)


def test_manifest_rejects_unknown_split(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(
        '{"pair_id": "a", "image": "x.png", "audio": "x.wav", "annotation": null, "split": "val"}\n'
    )
    with pytest.raises(ValidationError, match="split"):
        read_manifest(p, check_paths=False)


# ---------------------------------------------------------------- fixtures

def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_fixture_determinism_bytes(tmp_path):
    cfg = FixtureConfig(n_labeled=2, n_unlabeled=2, n_test=1, sample_rate=4000)
    make_fixture_dataset(cfg, seed=7, out_dir=tmp_path / "a")
    make_fixture_dataset(cfg, seed=7, out_dir=tmp_path / "b")
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], f"{name} differs between identical runs"
    assert not filecmp.cmp(
        tmp_path / "a" / "manifest.jsonl", tmp_path / "a" / "trace.jsonl", shallow=False
    )


def test_fixture_unsupervised_only(tmp_path):
    cfg = FixtureConfig(n_labeled=0, n_unlabeled=4, n_test=0, sample_rate=4000)
    manifest = make_fixture_dataset(cfg, seed=3, out_dir=tmp_path)
    assert all(e.annotation is None for e in manifest.entries)
    assert manifest.counts() == {"train_labeled": 0, "train_unlabeled": 4, "test": 0}


def test_fixture_rejects_all_zero_counts(tmp_path):
    with pytest.raises(ValidationError, match="zero"):
        make_fixture_dataset(
            FixtureConfig(n_labeled=0, n_unlabeled=0, n_test=0), seed=1, out_dir=tmp_path
        )


def test_fixture_trace_matches_annotations(tmp_path):
    import json

    cfg = FixtureConfig(n_labeled=2, n_unlabeled=1, n_test=2, sample_rate=4000)
    manifest = make_fixture_dataset(cfg, seed=9, out_dir=tmp_path)
    trace = {
        row["pair_id"]: row
        for row in map(json.loads, (tmp_path / "trace.jsonl").read_text().splitlines())
    }
    for entry in manifest.entries:
        if entry.annotation is None:
            continue
        (rec,) = parse_annotations((tmp_path / entry.annotation).read_bytes())
        assert list(rec.bbox) == trace[entry.pair_id]["bbox"]
        assert rec.sound_type == f"tone_q{trace[entry.pair_id]['quadrant']}"


def test_fixture_audio_frequency_matches_quadrant(tmp_path):
    import json

    cfg = FixtureConfig(n_labeled=1, n_unlabeled=0, n_test=1, sample_rate=8000)
    manifest = make_fixture_dataset(cfg, seed=21, out_dir=tmp_path)
    trace = {
        row["pair_id"]: row
        for row in map(json.loads, (tmp_path / "trace.jsonl").read_text().splitlines())
    }
    for entry in manifest.entries:
        wav, sr = read_wav(tmp_path / entry.audio)
        spectrum = np.abs(np.fft.rfft(wav))
        peak_hz = np.argmax(spectrum) * sr / len(wav)
        assert abs(peak_hz - trace[entry.pair_id]["freq_hz"]) < 5.0


def test_apply_labeled_fraction(micro_fixture):
    half = apply_labeled_fraction(micro_fixture, 0.5, seed=0)
    counts = half.counts()
    assert counts["train_labeled"] == 1  # floor(0.5 * 3)
    assert counts["train_unlabeled"] == 5
    assert counts["test"] == micro_fixture.counts()["test"]
    again = apply_labeled_fraction(micro_fixture, 0.5, seed=0)
    assert [e.pair_id for e in again.entries if e.annotation] == [
        e.pair_id for e in half.entries if e.annotation
    ]
    with pytest.raises(ValidationError):
        apply_labeled_fraction(micro_fixture, 1.5, seed=0)


# ------------------------------------------------------------------ ingest

def test_ingest_corpus_end_to_end(tmp_path):
    media = tmp_path / "media"
    write_synth_video(media, "vidA", n_frames=80, fps=20.0)
    write_synth_video(media, "vidB", n_frames=80, fps=20.0)
    ann = tmp_path / "ann.txt"
    write_annotations(
        ann,
        [
            record(video_id="vidA", start=1.0, end=3.0, fps=20.0),
            record(video_id="vidA", start=1.0, end=3.0, fps=20.0,
                   bbox=(150, 30, 250, 90), sound_type="drum", annotator=1),
            record(video_id="vidB", start=2.0, end=2.0, fps=20.0),
        ],
    )
    out = tmp_path / "out"
    manifest = ingest_corpus(ann, media, out, split="test")
    # the two vidA rows share a middle frame and collapse into one pair
    assert len(manifest.entries) == 2
    reread = read_manifest(out / "manifest.jsonl")
    assert reread.entries == manifest.entries
    from avloc.ingest import load_pair

    pair = load_pair(reread, reread.entries[0])
    assert len(pair.gt_boxes) == 2
    assert len(pair.audio) == 3 * pair.sample_rate
