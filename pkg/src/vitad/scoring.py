"""Cosine anomaly maps, the training losses, and image-level scoring.

Stage maps are always the per-position form: 1 - cos(F(h,w), F_hat(h,w))
with an additive 1e-8 guard in the denominator. The training loss can
instead flatten each stage to one vector per image (the default), or use
L1/MSE; the map definition does not change with the loss choice.

The final map is the elementwise sum of the constrained stage maps,
bilinearly upsampled once to image resolution (all stages share one
grid, so summing first is exact). The image score mean-pools the map
with a stride-1 square window and takes the max; window 1 is the plain
max.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import ShapeError, Tensor, absval, add, div, mul, rsub, sqrt, tmean, tsum
from .vit import ConfigError, StageFeatures, grid_to_tokens
from .imageops import bilinear_resize, box_mean_max

COS_EPS = 1e-8

LOSS_KINDS = ("cosine_flat", "cosine_pixel", "l1", "mse")


@dataclass
class AnomalyMap:
    pixel_map: np.ndarray
    image_score: float
    stage_maps: list[np.ndarray] = field(default_factory=list)


def stage_anomaly_map(f: np.ndarray | Tensor, f_hat: np.ndarray | Tensor) -> np.ndarray:
    """1 - cosine per position; [C,h,w] -> [h,w], [B,C,h,w] -> [B,h,w]."""
    a = f.data if isinstance(f, Tensor) else np.asarray(f)
    b = f_hat.data if isinstance(f_hat, Tensor) else np.asarray(f_hat)
    if a.shape != b.shape:
        raise ShapeError(f"feature shapes differ: {a.shape} vs {b.shape}")
    axis = a.ndim - 3
    dot = (a * b).sum(axis=axis)
    na = np.sqrt((a * a).sum(axis=axis))
    nb = np.sqrt((b * b).sum(axis=axis))
    return 1.0 - dot / (na * nb + COS_EPS)


def _pair_tokens(enc: StageFeatures, dec: StageFeatures, constrained) -> list[tuple[Tensor, Tensor]]:
    stages = sorted(constrained)
    if not stages:
        raise ConfigError("constrained stage set is empty")
    missing = set(stages) - (enc.available() & dec.available())
    if missing:
        raise ConfigError(f"constrained stages {sorted(missing)} not paired")
    return [(grid_to_tokens(enc.get(i)), grid_to_tokens(dec.get(i))) for i in stages]


def _cosine_distance_mean(f: Tensor, fh: Tensor) -> Tensor:
    """Mean over leading entries of 1 - cos along the last axis."""
    dot = tsum(mul(f, fh), axis=f.ndim - 1)
    nf = sqrt(tsum(mul(f, f), axis=f.ndim - 1))
    nh = sqrt(tsum(mul(fh, fh), axis=f.ndim - 1))
    cos = div(dot, add(mul(nf, nh), COS_EPS))
    return tmean(rsub(cos, 1.0))


def training_loss(
    enc: StageFeatures,
    dec: StageFeatures,
    constrained=(1, 2, 3),
    kind: str = "cosine_flat",
) -> Tensor:
    """Sum over constrained stages of the per-stage reconstruction penalty."""
    if kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {kind!r}")
    total = None
    for f, fh in _pair_tokens(enc, dec, constrained):
        if kind == "cosine_pixel":
            term = _cosine_distance_mean(f, fh)
        elif kind == "cosine_flat":
            b = f.shape[0]
            flat_f = f.reshape((b, f.shape[1] * f.shape[2]))
            flat_h = fh.reshape((b, fh.shape[1] * fh.shape[2]))
            term = _cosine_distance_mean(flat_f, flat_h)
        elif kind == "l1":
            term = tmean(absval(f - fh))
        else:
            diff = f - fh
            term = tmean(mul(diff, diff))
        total = term if total is None else add(total, term)
    return total


def final_anomaly_map(stage_maps: list[np.ndarray], out_size: int) -> np.ndarray:
    if not stage_maps:
        raise ShapeError("no stage maps to combine")
    shape = stage_maps[0].shape
    for m in stage_maps[1:]:
        if m.shape != shape:
            raise ShapeError(f"stage map shapes differ: {shape} vs {m.shape}")
    summed = np.zeros(shape, np.float32)
    for m in stage_maps:
        summed += m.astype(np.float32)
    return bilinear_resize(summed, out_size, out_size)


def image_score(pixel_map: np.ndarray, pool_window: int) -> float:
    return box_mean_max(np.asarray(pixel_map, np.float64), pool_window)


@dataclass
class ScoreConfig:
    # 0 selects one patch footprint at the output resolution
    pool_window: int = 0
    smooth_sigma: float = 0.0
    constrained_stages: tuple[int, ...] = (1, 2, 3)

    def resolve_window(self, out_size: int, tokens_per_side: int) -> int:
        if self.pool_window > 0:
            return self.pool_window
        return max(out_size // tokens_per_side, 1)


def score_image(
    enc: StageFeatures,
    dec: StageFeatures,
    out_size: int,
    cfg: ScoreConfig | None = None,
) -> AnomalyMap:
    """Full map path for one image: stage maps -> sum -> upsample -> score."""
    cfg = cfg or ScoreConfig()
    maps = []
    for i in sorted(cfg.constrained_stages):
        m = stage_anomaly_map(enc.get(i), dec.get(i))
        if m.ndim == 3:
            if m.shape[0] != 1:
                raise ShapeError("score_image expects single-image features")
            m = m[0]
        maps.append(m)
    pixel = final_anomaly_map(maps, out_size)
    if cfg.smooth_sigma > 0:
        pixel = gaussian_filter(pixel, sigma=cfg.smooth_sigma)
    window = cfg.resolve_window(out_size, maps[0].shape[-1])
    return AnomalyMap(pixel, image_score(pixel, window), maps)
