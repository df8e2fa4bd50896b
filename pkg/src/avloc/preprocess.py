"""Model-ready arrays from raw pairs.

Images are resized (aspect-distorting) to 224x224 and channel-normalized;
audio becomes a log-mel spectrogram; source-frame bounding boxes become
binary ground-truth maps in the 224x224 output geometry. All randomness
flows through explicit seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError
from .ingest import SOURCE_H, SOURCE_W, AnnotationRecord

IMAGE_SIZE = 224  # every heatmap / ground-truth map lives on this grid


@dataclass(frozen=True)
class PreprocessConfig:
    sample_rate: int = 16000
    n_mels: int = 64
    win_ms: float = 25.0
    hop_ms: float = 10.0
    log_eps: float = 1e-10
    n_fft: int = 1024  # >= window length; zero-padded FFT keeps low mel bands non-empty
    img_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    img_std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    aug_enabled: bool = True
    crop_min_area: float = 0.6
    flip_p: float = 0.5
    jitter: float = 0.4

    @property
    def win_length(self) -> int:
        return int(round(self.win_ms * self.sample_rate / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.win_length) // self.hop_length

    def validate(self) -> "PreprocessConfig":
        if self.sample_rate <= 0 or self.n_mels <= 0:
            raise ValidationError("sample_rate and n_mels must be positive")
        if self.win_length <= 0 or self.hop_length <= 0:
            raise ValidationError("window and hop must be positive")
        if self.n_fft < self.win_length:
            raise ValidationError(
                f"n_fft ({self.n_fft}) must be >= window length ({self.win_length})"
            )
        if not (0.0 < self.crop_min_area <= 1.0):
            raise ValidationError("crop_min_area must be in (0, 1]")
        if not (0.0 <= self.flip_p <= 1.0):
            raise ValidationError("flip_p must be in [0, 1]")
        if self.jitter < 0:
            raise ValidationError("jitter must be >= 0")
        return self


def _round_half_away(v: float) -> int:
    # coordinates are non-negative, so half-away-from-zero == floor(v + 0.5)
    return int(math.floor(v + 0.5))


def scale_bbox(bbox: tuple[float, float, float, float]) -> tuple[int, int, int, int]:
    """Map a source-frame (328x120) box to the 224x224 output grid.

    Each coordinate scales by the per-axis ratio and rounds to the nearest
    integer (half away from zero). Boxes that collapse after rounding are
    rejected rather than silently inflated.
    """
    x1, y1, x2, y2 = bbox
    if not (0 <= x1 < x2 <= SOURCE_W and 0 <= y1 < y2 <= SOURCE_H):
        raise ValidationError(f"bbox {bbox} outside the {SOURCE_W}x{SOURCE_H} source frame")
    sx = IMAGE_SIZE / SOURCE_W
    sy = IMAGE_SIZE / SOURCE_H
    out = (
        min(max(_round_half_away(x1 * sx), 0), IMAGE_SIZE),
        min(max(_round_half_away(y1 * sy), 0), IMAGE_SIZE),
        min(max(_round_half_away(x2 * sx), 0), IMAGE_SIZE),
        min(max(_round_half_away(y2 * sy), 0), IMAGE_SIZE),
    )
    if out[0] >= out[2] or out[1] >= out[3]:
        raise ValidationError(f"bbox {bbox} degenerates to {out} after scaling")
    return out


def rasterize_gt(scaled_bboxes: list[tuple[int, int, int, int]]) -> np.ndarray:
    """One binary 224x224 map per box; a pixel is set iff its center lies in
    the half-open box [x1, x2) x [y1, y2). Returns (N, 224, 224) uint8."""
    if not scaled_bboxes:
        raise ValidationError("rasterize_gt needs at least one box")
    maps = np.zeros((len(scaled_bboxes), IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    for i, (x1, y1, x2, y2) in enumerate(scaled_bboxes):
        if not (0 <= x1 < x2 <= IMAGE_SIZE and 0 <= y1 < y2 <= IMAGE_SIZE):
            raise ValidationError(f"scaled bbox {(x1, y1, x2, y2)} outside the output grid")
        maps[i, y1:y2, x1:x2] = 1
    return maps


def gt_maps_for_record_list(records: list[AnnotationRecord]) -> np.ndarray:
    return rasterize_gt([scale_bbox(r.bbox) for r in records])


def image_to_tensor(image: np.ndarray, cfg: PreprocessConfig) -> torch.Tensor:
    """uint8 HxWx3 -> normalized float32 3x224x224 (bilinear, aspect-distorting)."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected an RGB HxWx3 array, got shape {arr.shape}")
    if not arr.flags.writeable:
        arr = arr.copy()
    x = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).float() / 255.0
    if x.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
        x = F.interpolate(
            x[None],
            size=(IMAGE_SIZE, IMAGE_SIZE),
            mode="bilinear",
            align_corners=False,
            antialias=True,
        )[0]
    mean = torch.tensor(cfg.img_mean).view(3, 1, 1)
    std = torch.tensor(cfg.img_std).view(3, 1, 1)
    return (x - mean) / std


# --------------------------------------------------------------------------
# Log-mel spectrogram front-end.
# --------------------------------------------------------------------------

def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Peak-normalized triangular filters, (n_mels, n_fft//2 + 1)."""
    f_max = sample_rate / 2.0
    mel_points = np.linspace(_hz_to_mel(0.0), _hz_to_mel(f_max), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, len(bin_freqs)))
    for k in range(n_mels):
        lo, center, hi = hz_points[k], hz_points[k + 1], hz_points[k + 2]
        rise = (bin_freqs - lo) / (center - lo)
        fall = (hi - bin_freqs) / (hi - center)
        fb[k] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


def audio_to_spectrogram(waveform: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Mono waveform -> log-mel array (n_mels, frames), floored at log(eps)."""
    wav = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if wav.size == 0:
        raise ValidationError("empty waveform")
    win = cfg.win_length
    hop = cfg.hop_length
    if wav.size < win:
        raise ValidationError(f"waveform shorter than one window ({wav.size} < {win})")
    n_frames = cfg.n_frames(wav.size)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = wav[idx] * (0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win))
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    mel = power @ mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels).T
    log_mel = np.log(np.maximum(mel, cfg.log_eps))
    return log_mel.T.astype(np.float32)  # (n_mels, frames)


# --------------------------------------------------------------------------
# Two-view augmentation (crop / flip / jitter), seed-deterministic.
# --------------------------------------------------------------------------

def _uniform(g: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * torch.rand(1, generator=g).item()


def _jitter_unit(img01: torch.Tensor, g: torch.Generator, strength: float) -> torch.Tensor:
    b = _uniform(g, 1 - strength, 1 + strength)
    c = _uniform(g, 1 - strength, 1 + strength)
    s = _uniform(g, 1 - strength, 1 + strength)
    out = img01 * b
    gray = out.mean()
    out = gray + (out - gray) * c
    per_px_gray = out.mean(dim=0, keepdim=True)
    out = per_px_gray + (out - per_px_gray) * s
    return out.clamp(0.0, 1.0)


def _one_view(img: torch.Tensor, g: torch.Generator, cfg: PreprocessConfig) -> torch.Tensor:
    _, h, w = img.shape
    area_frac = _uniform(g, cfg.crop_min_area, 1.0)
    log_ratio = _uniform(g, math.log(3 / 4), math.log(4 / 3))
    aspect = math.exp(log_ratio)
    cw = min(w, max(1, int(round(math.sqrt(area_frac * h * w * aspect)))))
    ch = min(h, max(1, int(round(math.sqrt(area_frac * h * w / aspect)))))
    left = int(_uniform(g, 0, w - cw + 1))
    top = int(_uniform(g, 0, h - ch + 1))
    view = img[:, top : top + ch, left : left + cw]
    view = F.interpolate(
        view[None], size=(h, w), mode="bilinear", align_corners=False, antialias=True
    )[0]
    if _uniform(g, 0.0, 1.0) < cfg.flip_p:
        view = torch.flip(view, dims=[2])
    if cfg.jitter > 0:
        mean = torch.tensor(cfg.img_mean).view(3, 1, 1)
        std = torch.tensor(cfg.img_std).view(3, 1, 1)
        unit = (view * std + mean).clamp(0.0, 1.0)
        view = (_jitter_unit(unit, g, cfg.jitter) - mean) / std
    return view


def augment_views(
    image: torch.Tensor, cfg: PreprocessConfig, seed: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Two stochastic views of a normalized 3x224x224 tensor.

    With augmentation disabled both views are the input itself. The same
    seed always reproduces the same pair of views.
    """
    if image.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ValidationError(f"expected (3, {IMAGE_SIZE}, {IMAGE_SIZE}), got {tuple(image.shape)}")
    if not cfg.aug_enabled:
        return image, image
    g = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    return _one_view(image, g, cfg), _one_view(image, g, cfg)
