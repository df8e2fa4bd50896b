"""Toy-scale tri-stream localization network.

A small visual convnet encodes the base image and two augmented views; a
small audio convnet embeds the log-mel spectrogram as a unit vector. An
audio-guided attention head turns per-location cosine similarity into a
coarse heatmap that is bilinearly upsampled to 224x224. An optional
predictive-coding block iteratively corrects the visual feature map toward
an audio-conditioned prediction before attention. Projector/predictor MLPs
on the pooled view features emit (p1, p2, z1, z2); the returned z vectors
are gradient-blocked.

Backbones are trained from scratch; widths, embedding size, and the coarse
grid are configurable.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ValidationError
from .ingest import SamplePair
from .preprocess import (
    IMAGE_SIZE,
    PreprocessConfig,
    audio_to_spectrogram,
    image_to_tensor,
)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vis_channels: tuple[int, ...] = (16, 32, 64, 128)
    aud_channels: tuple[int, ...] = (16, 32, 64)
    embed_dim: int = 128
    pcm_enabled: bool = True
    pcm_iters: int = 2
    heatmap_res: tuple[int, int] = (14, 14)
    use_class_labels: bool = False
    n_classes: int = 0
    attn_tau: float = 0.0
    attn_temp: float = 0.07

    def validate(self) -> "ModelConfig":
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be > 0")
        if self.pcm_iters < 1:
            raise ConfigError("pcm_iters must be >= 1")
        h, w = self.heatmap_res
        if h != w:
            raise ConfigError(f"heatmap_res must be square, got {self.heatmap_res}")
        if h <= 0 or IMAGE_SIZE % h != 0:
            raise ConfigError(
                f"heatmap_res {h} must divide the {IMAGE_SIZE}-pixel output grid evenly"
            )
        if not self.vis_channels or not self.aud_channels:
            raise ConfigError("encoder channel lists must be non-empty")
        if self.use_class_labels and self.pcm_enabled:
            raise ConfigError(
                "class labels belong to the no-refinement input format; disable one"
            )
        if self.use_class_labels and self.n_classes < 1:
            raise ConfigError("use_class_labels requires n_classes >= 1")
        if self.attn_temp <= 0:
            raise ConfigError("attn_temp must be > 0")
        _plan_strides(IMAGE_SIZE // h, len(self.vis_channels))  # raises if unreachable
        return self


def _plan_strides(factor: int, n_blocks: int) -> list[int]:
    """Distribute a total downsampling factor over conv blocks (first may be 4)."""
    strides = []
    rem = factor
    for i in range(n_blocks):
        if i == 0 and rem % 4 == 0 and rem >= 4:
            s = 4
        elif rem >= 2 and rem % 2 == 0:
            s = 2
        else:
            s = 1
        strides.append(s)
        rem //= s
    if rem != 1:
        raise ConfigError(
            f"cannot reach downsampling factor {factor} with {n_blocks} conv blocks"
        )
    return strides


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class VisualEncoder(nn.Module):
    """Strided convnet: 3x224x224 -> (C, h, w) map plus a pooled d-vector."""

    def __init__(self, channels: tuple[int, ...], embed_dim: int, out_res: int):
        super().__init__()
        strides = _plan_strides(IMAGE_SIZE // out_res, len(channels))
        blocks = []
        c_in = 3
        for i, (c_out, s) in enumerate(zip(channels, strides)):
            k, p = (5, 2) if i == 0 and s == 4 else (3, 1)
            blocks += [nn.Conv2d(c_in, c_out, k, stride=s, padding=p), _gn(c_out), nn.ReLU()]
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.pool_fc = nn.Linear(c_in, embed_dim)
        self.out_channels = c_in

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValidationError(f"expected (B, 3, H, W) views, got {tuple(x.shape)}")
        feat = self.blocks(x)
        pooled = self.pool_fc(feat.mean(dim=(2, 3)))
        return feat, pooled


class AudioEncoder(nn.Module):
    """Spectrogram convnet ending in an L2-normalized embedding."""

    def __init__(self, channels: tuple[int, ...], embed_dim: int):
        super().__init__()
        blocks = []
        c_in = 1
        for c_out in channels:
            blocks += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), _gn(c_out), nn.ReLU()]
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(c_in, embed_dim)

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        if spec.dim() != 4 or spec.shape[1] != 1:
            raise ValidationError(f"expected (B, 1, mels, frames), got {tuple(spec.shape)}")
        if torch.isnan(spec).any():
            raise ValidationError("NaN in spectrogram input")
        # per-sample standardization keeps the log floor from dominating
        mu = spec.mean(dim=(1, 2, 3), keepdim=True)
        sd = spec.std(dim=(1, 2, 3), keepdim=True)
        x = (spec - mu) / (sd + 1e-5)
        h = self.blocks(x).mean(dim=(2, 3))
        return F.normalize(self.fc(h), dim=1)


class PredictiveRefiner(nn.Module):
    """Iterative audio->visual correction with a zero-initialized gain.

    Each round predicts the visual feature map from the audio embedding,
    forms the prediction error, and nudges the features toward the
    prediction. Zero gain makes the block an exact identity, so enabling it
    changes nothing until training moves the gain.
    """

    def __init__(self, embed_dim: int, vis_channels: int):
        super().__init__()
        self.audio_to_visual = nn.Linear(embed_dim, vis_channels)
        self.gain = nn.Parameter(torch.zeros(vis_channels))

    def forward(self, vis_map: torch.Tensor, aud_vec: torch.Tensor, iters: int) -> torch.Tensor:
        if iters < 1:
            raise ConfigError(f"refinement iterations must be >= 1, got {iters}")
        pred = self.audio_to_visual(aud_vec)[:, :, None, None]
        out = vis_map
        for _ in range(iters):
            err = pred - out
            out = out + self.gain.view(1, -1, 1, 1) * err
        return out


class ProjectionMLP(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim), nn.LayerNorm(dim), nn.ReLU(), nn.Linear(dim, dim)
        )

    def forward(self, x):
        return self.net(x)


class PredictionMLP(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        hidden = max(dim // 2, 8)
        self.net = nn.Sequential(
            nn.Linear(dim, hidden), nn.LayerNorm(hidden), nn.ReLU(), nn.Linear(hidden, dim)
        )

    def forward(self, x):
        return self.net(x)


@dataclass
class ForwardOutput:
    heatmap_coarse: torch.Tensor  # (B, h, w) in (0, 1)
    heatmap_full: torch.Tensor  # (B, 224, 224) in [0, 1]
    p1: torch.Tensor  # (B, d) predictor outputs
    p2: torch.Tensor
    z1: torch.Tensor  # (B, d) projector outputs, gradient-blocked
    z2: torch.Tensor
    logits: torch.Tensor | None = None


def attention_localize(
    proj_map: torch.Tensor, aud_vec: torch.Tensor, tau: float, temp: float
) -> torch.Tensor:
    """Per-location cosine similarity squashed through sigmoid((sim-tau)/temp)."""
    v = F.normalize(proj_map, dim=1)
    a = F.normalize(aud_vec, dim=1)
    sim = torch.einsum("bchw,bc->bhw", v, a)
    return torch.sigmoid((sim - tau) / temp)


class TriStreamLocalizer(nn.Module):
    """Two visual views + audio; heatmap from the base image's features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        h, _ = cfg.heatmap_res
        self.visual = VisualEncoder(cfg.vis_channels, cfg.embed_dim, h)
        self.audio = AudioEncoder(cfg.aud_channels, cfg.embed_dim)
        self.attn_proj = nn.Conv2d(self.visual.out_channels, cfg.embed_dim, 1)
        self.refiner = (
            PredictiveRefiner(cfg.embed_dim, self.visual.out_channels)
            if cfg.pcm_enabled
            else None
        )
        self.projector = ProjectionMLP(cfg.embed_dim)
        self.predictor = PredictionMLP(cfg.embed_dim)
        self.class_head = (
            nn.Linear(cfg.embed_dim, cfg.n_classes) if cfg.use_class_labels else None
        )

    # expose the per-stream pieces for tests and inspection
    def encode_visual(self, view: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.visual(view)

    def encode_audio(self, spec: torch.Tensor) -> torch.Tensor:
        return self.audio(spec)

    def pcm_refine(self, vis_map: torch.Tensor, aud_vec: torch.Tensor, iters: int | None = None):
        if self.refiner is None:
            raise ConfigError("refinement is disabled in this configuration")
        return self.refiner(vis_map, aud_vec, self.cfg.pcm_iters if iters is None else iters)

    def ssl_head_parameters(self):
        """Projector + predictor group, trained at its own learning rate."""
        yield from self.projector.parameters()
        yield from self.predictor.parameters()

    def backbone_parameters(self):
        head_ids = {id(p) for p in self.ssl_head_parameters()}
        for p in self.parameters():
            if id(p) not in head_ids:
                yield p

    def forward(
        self,
        base: torch.Tensor,
        view1: torch.Tensor,
        view2: torch.Tensor,
        spec: torch.Tensor,
    ) -> ForwardOutput:
        aud = self.audio(spec)

        feat_base, pooled_base = self.visual(base)
        feat_attn = feat_base
        if self.refiner is not None:
            feat_attn = self.refiner(feat_attn, aud, self.cfg.pcm_iters)
        coarse = attention_localize(
            self.attn_proj(feat_attn), aud, self.cfg.attn_tau, self.cfg.attn_temp
        )
        full = F.interpolate(
            coarse[:, None],
            size=(IMAGE_SIZE, IMAGE_SIZE),
            mode="bilinear",
            align_corners=False,
        )[:, 0].clamp(0.0, 1.0)

        # identical view tensors (augmentation off) share one encoder pass
        if view1 is base:
            pooled1 = pooled_base
        else:
            _, pooled1 = self.visual(view1)
        if view2 is base:
            pooled2 = pooled_base
        elif view2 is view1:
            pooled2 = pooled1
        else:
            _, pooled2 = self.visual(view2)

        z1 = self.projector(pooled1)
        z2 = self.projector(pooled2)
        p1 = self.predictor(z1)
        p2 = self.predictor(z2)

        logits = self.class_head(pooled_base) if self.class_head is not None else None
        return ForwardOutput(
            heatmap_coarse=coarse,
            heatmap_full=full,
            p1=p1,
            p2=p2,
            z1=z1.detach(),
            z2=z2.detach(),
            logits=logits,
        )


# --------------------------------------------------------------------------
# Checkpoints: a versioned container that round-trips across machines.
# --------------------------------------------------------------------------

@dataclass
class CheckpointBundle:
    model: TriStreamLocalizer
    model_cfg: ModelConfig
    pre_cfg: PreprocessConfig
    global_step: int
    classes: list[str] = field(default_factory=list)
    optimizer_state: dict | None = None

    def heatmap_for_pair(self, pair: SamplePair) -> np.ndarray:
        """Eval-mode 224x224 heatmap for one pair (no augmentation)."""
        self.model.eval()
        base = image_to_tensor(pair.image, self.pre_cfg)[None]
        spec = torch.from_numpy(
            audio_to_spectrogram(pair.audio, self.pre_cfg)
        )[None, None]
        with torch.no_grad():
            out = self.model(base, base, base, spec)
        return out.heatmap_full[0].numpy()


def save_checkpoint(
    path: Path,
    model: TriStreamLocalizer,
    pre_cfg: PreprocessConfig,
    global_step: int,
    classes: list[str] | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "preprocess_config": asdict(pre_cfg),
        "state_dict": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "global_step": global_step,
        "classes": list(classes or []),
    }
    torch.save(payload, path)


def load_checkpoint(path: Path) -> CheckpointBundle:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValidationError(
            f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )
    mc = payload["model_config"]
    mc["vis_channels"] = tuple(mc["vis_channels"])
    mc["aud_channels"] = tuple(mc["aud_channels"])
    mc["heatmap_res"] = tuple(mc["heatmap_res"])
    model_cfg = ModelConfig(**mc)
    pc = payload["preprocess_config"]
    pc["img_mean"] = tuple(pc["img_mean"])
    pc["img_std"] = tuple(pc["img_std"])
    pre_cfg = PreprocessConfig(**pc)
    model = TriStreamLocalizer(model_cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return CheckpointBundle(
        model=model,
        model_cfg=model_cfg,
        pre_cfg=pre_cfg,
        global_step=int(payload["global_step"]),
        classes=list(payload.get("classes", [])),
        optimizer_state=payload.get("optimizer_state"),
    )
