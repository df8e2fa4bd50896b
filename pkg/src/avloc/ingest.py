"""Dataset ingest: annotation parsing, manifest bookkeeping, pair extraction.

An annotated corpus consists of videos (a directory of PNG frames plus one
mono WAV per video) and a line-oriented annotation file. Each annotation
describes one sounding instance with a time span, per-annotation fps, a
bounding box in the 328x120 source frame, and a sound-type keyword. Ingest
turns each instance into an image-audio pair: the frame at the middle of the
time span and a 3.0 s audio window centered on the same instant.

`make_fixture_dataset` synthesizes a self-contained toy corpus where a bright
textured patch marks the sounding object and the audio is a tone whose
frequency encodes the patch's quadrant, so audio genuinely predicts location.
"""

from __future__ import annotations

import json
import math
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AnnotationParseError, MediaError, ValidationError

# Source annotation geometry (pixels).
SOURCE_W = 328
SOURCE_H = 120

# Audio window: 1.5 s either side of the middle frame.
AUDIO_HALF_WINDOW_S = 1.5
AUDIO_WINDOW_S = 2 * AUDIO_HALF_WINDOW_S

ANNOTATION_FIELDS = (
    "video_id",
    "start_s",
    "end_s",
    "fps",
    "x1",
    "y1",
    "x2",
    "y2",
    "ssl_label",
    "annotator_index",
)


@dataclass(frozen=True)
class AnnotationRecord:
    """One sound-source annotation in source-frame coordinates."""

    video_id: str
    start_time_s: float
    end_time_s: float
    fps: float
    bbox: tuple[float, float, float, float]  # x1, y1, x2, y2 in 328x120 pixels
    sound_type: str
    annotator_index: int = 0

    def validate(self) -> "AnnotationRecord":
        x1, y1, x2, y2 = self.bbox
        if not (0 <= x1 < x2 <= SOURCE_W):
            raise ValidationError(
                f"bbox x-range ({x1}, {x2}) outside 0..{SOURCE_W} for '{self.video_id}'"
            )
        if not (0 <= y1 < y2 <= SOURCE_H):
            raise ValidationError(
                f"bbox y-range ({y1}, {y2}) outside 0..{SOURCE_H} for '{self.video_id}'"
            )
        if self.start_time_s > self.end_time_s:
            raise ValidationError(
                f"start {self.start_time_s} > end {self.end_time_s} for '{self.video_id}'"
            )
        if self.fps <= 0:
            raise ValidationError(f"fps must be > 0, got {self.fps}")
        if self.annotator_index < 0:
            raise ValidationError(f"annotator_index must be >= 0, got {self.annotator_index}")
        return self

    @property
    def center_time_s(self) -> float:
        return (self.start_time_s + self.end_time_s) / 2.0

    def covers(self, t: float) -> bool:
        return self.start_time_s <= t <= self.end_time_s


@dataclass
class SamplePair:
    """One image-audio unit; empty gt_boxes means unlabeled."""

    pair_id: str
    image: np.ndarray  # H x W x 3 uint8
    audio: np.ndarray  # mono float32
    sample_rate: int
    gt_boxes: list[AnnotationRecord] = field(default_factory=list)
    sound_type: str | None = None

    @property
    def labeled(self) -> bool:
        return len(self.gt_boxes) > 0


def middle_frame_index(start_time_s: float, end_time_s: float, fps: float) -> int:
    """Frame index of the span midpoint: floor(((start+end)/2) * fps)."""
    if start_time_s < 0 or end_time_s < 0:
        raise ValidationError(
            f"negative time span ({start_time_s}, {end_time_s})"
        )
    if start_time_s > end_time_s:
        raise ValidationError(f"start {start_time_s} > end {end_time_s}")
    if fps <= 0:
        raise ValidationError(f"fps must be > 0, got {fps}")
    return math.floor((start_time_s + end_time_s) / 2.0 * fps)


def _parse_field(token: str, name: str, kind, line_no: int):
    try:
        return kind(token)
    except ValueError:
        raise AnnotationParseError(
            f"cannot parse {kind.__name__} from '{token}'", line_no=line_no, field=name
        ) from None


def parse_annotations(raw: bytes | str) -> list[AnnotationRecord]:
    """Parse an annotation file: one whitespace-separated record per line.

    Fields: video_id start_s end_s fps x1 y1 x2 y2 ssl_label annotator_index.
    Blank lines and `#` comments are skipped. Records keep file order.
    """
    text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    records: list[AnnotationRecord] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        tokens = body.split()
        if len(tokens) != len(ANNOTATION_FIELDS):
            raise AnnotationParseError(
                f"expected {len(ANNOTATION_FIELDS)} fields, got {len(tokens)}",
                line_no=line_no,
            )
        video_id = tokens[0]
        start_s = _parse_field(tokens[1], "start_s", float, line_no)
        end_s = _parse_field(tokens[2], "end_s", float, line_no)
        fps = _parse_field(tokens[3], "fps", float, line_no)
        coords = tuple(
            _parse_field(tokens[4 + i], name, float, line_no)
            for i, name in enumerate(("x1", "y1", "x2", "y2"))
        )
        ssl_label = tokens[8]
        annotator = _parse_field(tokens[9], "annotator_index", int, line_no)
        record = AnnotationRecord(
            video_id=video_id,
            start_time_s=start_s,
            end_time_s=end_s,
            fps=fps,
            bbox=coords,
            sound_type=ssl_label,
            annotator_index=annotator,
        )
        try:
            record.validate()
        except ValidationError as exc:
            raise ValidationError(f"{exc} (line {line_no})") from None
        records.append(record)
    return records


def _fmt_num(v: float) -> str:
    # repr round-trips floats exactly; integers render without a trailing .0
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def serialize_annotations(records: list[AnnotationRecord]) -> str:
    """Inverse of parse_annotations; parse(serialize(parse(x))) == parse(x)."""
    lines = []
    for rec in records:
        if any(ch.isspace() for ch in rec.sound_type):
            raise ValidationError(f"ssl label '{rec.sound_type}' contains whitespace")
        x1, y1, x2, y2 = rec.bbox
        lines.append(
            " ".join(
                (
                    rec.video_id,
                    _fmt_num(rec.start_time_s),
                    _fmt_num(rec.end_time_s),
                    _fmt_num(rec.fps),
                    _fmt_num(x1),
                    _fmt_num(y1),
                    _fmt_num(x2),
                    _fmt_num(y2),
                    rec.sound_type,
                    str(rec.annotator_index),
                )
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")


# --------------------------------------------------------------------------
# Media I/O: PNG frames, 16-bit PCM mono WAV.
# --------------------------------------------------------------------------

def read_image(path: Path) -> np.ndarray:
    if not path.exists():
        raise MediaError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB"), dtype=np.uint8)
    except MediaError:
        raise
    except Exception as exc:
        raise MediaError(f"cannot decode image {path}: {exc}") from exc


def write_image(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array.astype(np.uint8), mode="RGB").save(path, format="PNG")


def read_wav(path: Path) -> tuple[np.ndarray, int]:
    """Read 16-bit PCM mono WAV into float32 in [-1, 1]."""
    if not path.exists():
        raise MediaError(f"audio not found: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
                raise MediaError(
                    f"{path}: expected 16-bit mono PCM, got "
                    f"{wf.getnchannels()} ch / {8 * wf.getsampwidth()} bit"
                )
            sr = wf.getframerate()
            frames = wf.readframes(wf.getnframes())
    except MediaError:
        raise
    except Exception as exc:
        raise MediaError(f"cannot decode audio {path}: {exc}") from exc
    samples = np.frombuffer(frames, dtype="<i2").astype(np.float32) / 32768.0
    return samples, sr


def write_wav(path: Path, samples: np.ndarray, sample_rate: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = (pcm * 32767.0).round().astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# Pair extraction from video media.
#
# Desk-scale media layout per video:
#   media_root/<video_id>/frames/%06d.png   (0-based frame index)
#   media_root/<video_id>/audio.wav         (full-length mono track)
# --------------------------------------------------------------------------

def frame_path(media_root: Path, video_id: str, index: int) -> Path:
    return Path(media_root) / video_id / "frames" / f"{index:06d}.png"


def audio_path(media_root: Path, video_id: str) -> Path:
    return Path(media_root) / video_id / "audio.wav"


def slice_audio_window(
    track: np.ndarray, sample_rate: int, center_s: float
) -> np.ndarray:
    """Cut [center-1.5s, center+1.5s], zero-padding whichever side falls
    outside the track so the frame stays temporally centered."""
    n_out = int(round(AUDIO_WINDOW_S * sample_rate))
    start = int(round((center_s - AUDIO_HALF_WINDOW_S) * sample_rate))
    out = np.zeros(n_out, dtype=np.float32)
    lo = max(start, 0)
    hi = min(start + n_out, len(track))
    if hi > lo:
        out[lo - start : hi - start] = track[lo:hi]
    return out


def extract_pair(
    video_id: str,
    record: AnnotationRecord,
    media_root: Path,
    video_records: list[AnnotationRecord] | None = None,
) -> SamplePair:
    """Build the image-audio pair for one annotated instance.

    The image is the frame at the span midpoint; the audio is the 3.0 s
    window centered there. Ground truth collects every annotation of the
    video whose time span covers the center instant; when the video carries
    exactly one annotation it is used regardless of coverage.
    """
    record.validate()
    center = record.center_time_s
    idx = middle_frame_index(record.start_time_s, record.end_time_s, record.fps)
    fpath = frame_path(media_root, video_id, idx)
    if not fpath.exists():
        raise MediaError(f"missing frame {idx} for video '{video_id}': {fpath}")
    try:
        image = read_image(fpath)
    except MediaError as exc:
        raise MediaError(f"undecodable frame {idx} of '{video_id}': {exc}") from exc

    track, sr = read_wav(audio_path(media_root, video_id))
    clip = slice_audio_window(track, sr, center)

    pool = video_records if video_records is not None else [record]
    if len(pool) == 1:
        gt = [pool[0]]
    else:
        gt = [r for r in pool if r.covers(center)]
    sound_type = record.sound_type
    return SamplePair(
        pair_id=f"{video_id}_{idx:06d}",
        image=image,
        audio=clip,
        sample_rate=sr,
        gt_boxes=gt,
        sound_type=sound_type,
    )


# --------------------------------------------------------------------------
# Manifests: one JSON object per line, paths relative to the manifest file.
# --------------------------------------------------------------------------

MANIFEST_KEYS = ("pair_id", "image", "audio", "annotation", "split")
SPLITS = ("train", "test")


@dataclass(frozen=True)
class ManifestEntry:
    pair_id: str
    image: str
    audio: str
    annotation: str | None
    split: str


@dataclass
class DatasetManifest:
    """Split bookkeeping for a pair corpus; paths resolve against `root`."""

    root: Path
    entries: list[ManifestEntry]

    def subset(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def counts(self) -> dict[str, int]:
        c = {
            "train_labeled": 0,
            "train_unlabeled": 0,
            "test": 0,
        }
        for e in self.entries:
            if e.split == "test":
                c["test"] += 1
            elif e.annotation is not None:
                c["train_labeled"] += 1
            else:
                c["train_unlabeled"] += 1
        return c

    def resolve(self, rel: str) -> Path:
        return (self.root / rel).resolve()


def write_manifest(path: Path, entries: list[ManifestEntry]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(
                json.dumps(
                    {
                        "pair_id": e.pair_id,
                        "image": e.image,
                        "audio": e.audio,
                        "annotation": e.annotation,
                        "split": e.split,
                    }
                )
                + "\n"
            )


def read_manifest(path: Path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{line_no}: bad JSON: {exc}") from None
            missing = [k for k in MANIFEST_KEYS if k not in obj]
            if missing:
                raise ValidationError(f"{path}:{line_no}: missing keys {missing}")
            if obj["split"] not in SPLITS:
                raise ValidationError(f"{path}:{line_no}: unknown split '{obj['split']}'")
            if obj["pair_id"] in seen:
                raise ValidationError(f"{path}:{line_no}: duplicate pair_id '{obj['pair_id']}'")
            seen.add(obj["pair_id"])
            entries.append(
                ManifestEntry(
                    pair_id=obj["pair_id"],
                    image=obj["image"],
                    audio=obj["audio"],
                    annotation=obj["annotation"],
                    split=obj["split"],
                )
            )
    manifest = DatasetManifest(root=path.parent.resolve(), entries=entries)
    if check_paths:
        for e in entries:
            for rel in filter(None, (e.image, e.audio, e.annotation)):
                p = manifest.root / rel
                if not p.exists():
                    raise ValidationError(f"manifest references missing file: {p}")
    return manifest


def load_pair(manifest: DatasetManifest, entry: ManifestEntry) -> SamplePair:
    image = read_image(manifest.root / entry.image)
    audio, sr = read_wav(manifest.root / entry.audio)
    gt: list[AnnotationRecord] = []
    sound_type = None
    if entry.annotation is not None:
        records = parse_annotations((manifest.root / entry.annotation).read_bytes())
        if not records:
            raise ValidationError(f"empty annotation file for pair '{entry.pair_id}'")
        gt = records
        sound_type = records[0].sound_type
    return SamplePair(
        pair_id=entry.pair_id,
        image=image,
        audio=audio,
        sample_rate=sr,
        gt_boxes=gt,
        sound_type=sound_type,
    )


def ingest_corpus(
    annotation_file: Path,
    media_root: Path,
    out_dir: Path,
    split: str = "train",
    labeled: bool = True,
) -> DatasetManifest:
    """Extract a pair per annotated instance and write pairs + manifest.

    Instances that resolve to the same (video, middle frame) collapse into a
    single pair; ground truth already pools every covering annotation.
    """
    if split not in SPLITS:
        raise ValidationError(f"split must be one of {SPLITS}, got '{split}'")
    records = parse_annotations(Path(annotation_file).read_bytes())
    by_video: dict[str, list[AnnotationRecord]] = {}
    for rec in records:
        by_video.setdefault(rec.video_id, []).append(rec)

    out_dir = Path(out_dir)
    pairs_dir = out_dir / "pairs"
    entries: list[ManifestEntry] = []
    seen_pairs: set[str] = set()
    for rec in records:
        pool = by_video[rec.video_id]
        pair = extract_pair(rec.video_id, rec, media_root, video_records=pool)
        if pair.pair_id in seen_pairs:
            continue
        seen_pairs.add(pair.pair_id)
        img_rel = f"pairs/{pair.pair_id}.png"
        wav_rel = f"pairs/{pair.pair_id}.wav"
        write_image(out_dir / img_rel, pair.image)
        write_wav(out_dir / wav_rel, pair.audio, pair.sample_rate)
        ann_rel: str | None = None
        if labeled:
            ann_rel = f"pairs/{pair.pair_id}.txt"
            (pairs_dir / f"{pair.pair_id}.txt").write_text(
                serialize_annotations(pair.gt_boxes), encoding="utf-8"
            )
        entries.append(
            ManifestEntry(
                pair_id=pair.pair_id,
                image=img_rel,
                audio=wav_rel,
                annotation=ann_rel,
                split=split,
            )
        )
    write_manifest(out_dir / "manifest.jsonl", entries)
    return DatasetManifest(root=out_dir.resolve(), entries=entries)


# --------------------------------------------------------------------------
# Synthetic fixture corpus.
# --------------------------------------------------------------------------

FIXTURE_TONE_FREQS = (500.0, 1000.0, 2000.0, 4000.0)  # Hz per quadrant


@dataclass(frozen=True)
class FixtureConfig:
    n_labeled: int = 32
    n_unlabeled: int = 64
    n_test: int = 8
    image_width: int = SOURCE_W
    image_height: int = SOURCE_H
    sample_rate: int = 16000
    # patch extent as a fraction of each image dimension
    patch_min_frac: float = 0.38
    patch_max_frac: float = 0.55
    tone_freqs: tuple[float, float, float, float] = FIXTURE_TONE_FREQS
    tone_amplitude: float = 0.5
    noise_amplitude: float = 0.01

    def validate(self) -> "FixtureConfig":
        if min(self.n_labeled, self.n_unlabeled, self.n_test) < 0:
            raise ValidationError("fixture counts must be >= 0")
        if self.n_labeled + self.n_unlabeled + self.n_test == 0:
            raise ValidationError("fixture counts are all zero")
        if not (0 < self.patch_min_frac <= self.patch_max_frac < 1):
            raise ValidationError("patch fractions must satisfy 0 < min <= max < 1")
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be > 0")
        return self


def _quadrant_of(cx: float, cy: float, w: int, h: int) -> int:
    # 0: top-left, 1: top-right, 2: bottom-left, 3: bottom-right
    return (0 if cy < h / 2 else 2) + (0 if cx < w / 2 else 1)


def _place_patch(rng: np.random.Generator, cfg: FixtureConfig) -> tuple[int, tuple[int, int, int, int]]:
    """Sample a quadrant and a patch rectangle whose center lies in it."""
    w, h = cfg.image_width, cfg.image_height
    quadrant = int(rng.integers(4))
    pw = float(rng.uniform(cfg.patch_min_frac, cfg.patch_max_frac)) * w
    ph = float(rng.uniform(cfg.patch_min_frac, cfg.patch_max_frac)) * h
    x_lo, x_hi = (pw / 2, w / 2) if quadrant % 2 == 0 else (w / 2, w - pw / 2)
    y_lo, y_hi = (ph / 2, h / 2) if quadrant < 2 else (h / 2, h - ph / 2)
    cx = float(rng.uniform(max(x_lo, pw / 2), min(x_hi, w - pw / 2)))
    cy = float(rng.uniform(max(y_lo, ph / 2), min(y_hi, h - ph / 2)))
    x1 = max(0, int(round(cx - pw / 2)))
    y1 = max(0, int(round(cy - ph / 2)))
    x2 = min(w, int(round(cx + pw / 2)))
    y2 = min(h, int(round(cy + ph / 2)))
    assert _quadrant_of((x1 + x2) / 2, (y1 + y2) / 2, w, h) == quadrant
    return quadrant, (x1, y1, x2, y2)


def _render_fixture_image(
    rng: np.random.Generator, cfg: FixtureConfig, bbox: tuple[int, int, int, int]
) -> np.ndarray:
    w, h = cfg.image_width, cfg.image_height
    img = rng.integers(15, 60, size=(h, w, 3)).astype(np.float64)
    x1, y1, x2, y2 = bbox
    yy, xx = np.mgrid[y1:y2, x1:x2]
    checker = (((yy // 6) + (xx // 6)) % 2) * 55.0
    base = 170.0 + rng.uniform(-15.0, 15.0, size=(y2 - y1, x2 - x1, 3))
    img[y1:y2, x1:x2] = base + checker[..., None]
    return np.clip(img, 0, 255).astype(np.uint8)


def _render_fixture_audio(
    rng: np.random.Generator, cfg: FixtureConfig, quadrant: int
) -> np.ndarray:
    n = int(round(AUDIO_WINDOW_S * cfg.sample_rate))
    t = np.arange(n, dtype=np.float64) / cfg.sample_rate
    tone = cfg.tone_amplitude * np.sin(2 * np.pi * cfg.tone_freqs[quadrant] * t)
    noise = cfg.noise_amplitude * rng.standard_normal(n)
    return (tone + noise).astype(np.float32)


def make_fixture_dataset(
    config: FixtureConfig, seed: int, out_dir: Path
) -> DatasetManifest:
    """Write a synthetic corpus; identical (config, seed) gives identical bytes.

    Every pair (labeled or not) contains a patch and a quadrant-coded tone;
    unlabeled pairs simply omit the annotation sidecar. The generator logs its
    own placements to trace.jsonl so tests can re-read them.
    """
    config.validate()
    out_dir = Path(out_dir)
    pairs_dir = out_dir / "pairs"
    pairs_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    groups = (
        ("fx_train_l", config.n_labeled, "train", True),
        ("fx_train_u", config.n_unlabeled, "train", False),
        ("fx_test", config.n_test, "test", True),
    )
    entries: list[ManifestEntry] = []
    trace_rows: list[dict] = []
    for prefix, count, split, labeled in groups:
        for i in range(count):
            pair_id = f"{prefix}_{i:04d}"
            quadrant, bbox = _place_patch(rng, config)
            image = _render_fixture_image(rng, config, bbox)
            audio = _render_fixture_audio(rng, config, quadrant)
            write_image(pairs_dir / f"{pair_id}.png", image)
            write_wav(pairs_dir / f"{pair_id}.wav", audio, config.sample_rate)
            ann_rel: str | None = None
            record = AnnotationRecord(
                video_id=pair_id,
                start_time_s=0.0,
                end_time_s=AUDIO_WINDOW_S,
                fps=30.0,
                bbox=tuple(float(v) for v in bbox),
                sound_type=f"tone_q{quadrant}",
                annotator_index=0,
            ).validate()
            if labeled:
                ann_rel = f"pairs/{pair_id}.txt"
                (pairs_dir / f"{pair_id}.txt").write_text(
                    serialize_annotations([record]), encoding="utf-8"
                )
            entries.append(
                ManifestEntry(
                    pair_id=pair_id,
                    image=f"pairs/{pair_id}.png",
                    audio=f"pairs/{pair_id}.wav",
                    annotation=ann_rel,
                    split=split,
                )
            )
            trace_rows.append(
                {
                    "pair_id": pair_id,
                    "split": split,
                    "labeled": labeled,
                    "quadrant": quadrant,
                    "bbox": list(bbox),
                    "freq_hz": config.tone_freqs[quadrant],
                }
            )

    write_manifest(out_dir / "manifest.jsonl", entries)
    with (out_dir / "trace.jsonl").open("w", encoding="utf-8") as fh:
        for row in trace_rows:
            fh.write(json.dumps(row) + "\n")
    return DatasetManifest(root=out_dir.resolve(), entries=entries)


def apply_labeled_fraction(
    manifest: DatasetManifest, fraction: float, seed: int
) -> DatasetManifest:
    """Keep labels on a deterministic subset of labeled train pairs.

    Simulates partially labeled corpora: dropped pairs keep their media and
    participate in the unsupervised term only. Test entries are untouched.
    """
    if not (0.0 <= fraction <= 1.0):
        raise ValidationError(f"labeled_fraction must be in [0, 1], got {fraction}")
    if fraction == 1.0:
        return manifest
    labeled_train = [
        e for e in manifest.entries if e.split == "train" and e.annotation is not None
    ]
    keep_n = int(math.floor(fraction * len(labeled_train)))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labeled_train))
    keep_ids = {labeled_train[j].pair_id for j in order[:keep_n]}
    new_entries = [
        replace(e, annotation=None)
        if e.split == "train" and e.annotation is not None and e.pair_id not in keep_ids
        else e
        for e in manifest.entries
    ]
    return DatasetManifest(root=manifest.root, entries=new_entries)
