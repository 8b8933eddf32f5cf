"""Encoder -> fuser -> decoder composition.

The fuser turns the tapped encoder stages into the single feature the
decoder reconstructs from. The default is one linear layer on the last
stage; concat/add variants mix a chosen stage subset (0 selects the
patch-embed stem), and conv_bottleneck / vit_blocks stack extra depth
on top of the linear. All variants emit a [B, C, h, w] grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import REAL, ShapeError, Tensor, add, concat, gelu, matmul, slice_axis
from .vit import (
    ConfigError,
    StageFeatures,
    TransformerBlock,
    ViTConfig,
    ViTDecoder,
    ViTEncoder,
    grid_to_tokens,
    tokens_to_grid,
    trunc_normal,
)

FUSER_VARIANTS = (
    "last_stage_linear",
    "concat_stages",
    "add_stages",
    "conv_bottleneck",
    "vit_blocks",
    "identity",
)


@dataclass
class FuserConfig:
    variant: str = "last_stage_linear"
    # Empty selection means the variant default: the last stage for
    # linear/bottleneck/vit/identity, all stages 1..N for concat/add.
    stage_selection: tuple[int, ...] = ()
    layers: int = 1
    resize_policy: str = "identity"

    def validate(self, n_stages: int) -> None:
        if self.variant not in FUSER_VARIANTS:
            raise ConfigError(f"unknown fuser variant {self.variant!r}")
        if self.resize_policy != "identity":
            raise ConfigError("only the identity resize policy is implemented")
        if self.layers < 0:
            raise ConfigError("fuser layers must be >= 0")
        sel = self.resolved_selection(n_stages)
        if not sel:
            raise ConfigError("fuser stage selection is empty")
        if any(s < 0 or s > n_stages for s in sel):
            raise ConfigError(f"stage selection {sel} outside 0..{n_stages}")
        if self.variant in ("last_stage_linear", "identity") and sel != (n_stages,):
            raise ConfigError(f"{self.variant} uses exactly stage {n_stages}")

    def resolved_selection(self, n_stages: int) -> tuple[int, ...]:
        if self.stage_selection:
            return tuple(sorted(self.stage_selection))
        if self.variant in ("concat_stages", "add_stages"):
            return tuple(range(1, n_stages + 1))
        return (n_stages,)


class Fuser:
    def __init__(self, cfg: FuserConfig, vit_cfg: ViTConfig, rng: np.random.Generator):
        n = vit_cfg.encoder_divisions
        cfg.validate(n)
        self.cfg = cfg
        self.selection = cfg.resolved_selection(n)
        c = vit_cfg.embed_dim
        self.dim = c
        self.tensors: dict[str, Tensor] = {}

        def param(name, shape):
            t = Tensor(trunc_normal(rng, shape), requires_grad=True)
            self.tensors[name] = t
            return t

        def zeros(name, n_):
            t = Tensor(np.zeros(n_, REAL), requires_grad=True)
            self.tensors[name] = t
            return t

        v = cfg.variant
        if v == "identity":
            return
        in_width = len(self.selection) * c if v == "concat_stages" else c
        self.lin_w = param("lin_w", (in_width, c))
        self.lin_b = zeros("lin_b", c)
        if v == "conv_bottleneck":
            mid = max(c // 4, 1)
            self.conv_layers = []
            for i in range(cfg.layers):
                layer = (
                    param(f"conv.{i}.w1", (c, mid)),
                    zeros(f"conv.{i}.b1", mid),
                    param(f"conv.{i}.w2", (9 * mid, mid)),
                    zeros(f"conv.{i}.b2", mid),
                    param(f"conv.{i}.w3", (mid, c)),
                    zeros(f"conv.{i}.b3", c),
                )
                self.conv_layers.append(layer)
        elif v == "vit_blocks":
            self.blocks = []
            for i in range(cfg.layers):
                blk = TransformerBlock(
                    c, vit_cfg.num_heads, vit_cfg.mlp_ratio, rng, trainable=True
                )
                self.tensors.update(blk.named(f"block.{i}"))
                self.blocks.append(blk)

    def named(self, prefix: str = "fuser") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": t for k, t in self.tensors.items()}

    def __call__(self, feats: StageFeatures) -> Tensor:
        missing = set(self.selection) - feats.available()
        if missing:
            raise ShapeError(f"fuser needs stages {sorted(missing)} not present")
        v = self.cfg.variant
        picked = [feats.get(i) for i in self.selection]
        for g in picked:
            if g.shape[1] != self.dim and v != "concat_stages":
                raise ShapeError(
                    f"fuser built for {self.dim} channels, got {g.shape[1]}"
                )
        if v == "identity":
            return picked[-1]
        if v == "concat_stages":
            tok = concat([grid_to_tokens(g) for g in picked], 2)
        elif v == "add_stages":
            tok = grid_to_tokens(picked[0])
            for g in picked[1:]:
                tok = add(tok, grid_to_tokens(g))
        else:
            tok = grid_to_tokens(picked[-1])
        if tok.shape[2] != self.lin_w.shape[0]:
            raise ShapeError(
                f"fuser linear expects width {self.lin_w.shape[0]}, got {tok.shape[2]}"
            )
        tok = add(matmul(tok, self.lin_w), self.lin_b)
        side = picked[-1].shape[2]
        out = tokens_to_grid(tok, side)
        if v == "conv_bottleneck":
            for w1, b1, w2, b2, w3, b3 in self.conv_layers:
                out = self._bottleneck(out, w1, b1, w2, b2, w3, b3)
        elif v == "vit_blocks":
            tok = grid_to_tokens(out)
            for blk in self.blocks:
                tok = blk(tok)
            out = tokens_to_grid(tok, side)
        return out

    @staticmethod
    def _bottleneck(x: Tensor, w1, b1, w2, b2, w3, b3) -> Tensor:
        b, c, h, w = x.shape
        side = h
        tok = grid_to_tokens(x)
        mid = gelu(add(matmul(tok, w1), b1))
        mid_grid = tokens_to_grid(mid, side)
        patches = _shifted_windows(mid_grid)
        mid = gelu(add(matmul(grid_to_tokens(patches), w2), b2))
        tok = add(matmul(mid, w3), b3)
        return add(x, tokens_to_grid(tok, side))


def _shifted_windows(x: Tensor) -> Tensor:
    """[B,C,h,w] -> [B,9C,h,w]: the 3x3 neighborhood, zero padded."""
    b, c, h, w = x.shape
    zrow = Tensor(np.zeros((b, c, 1, w), dtype=x.data.dtype))
    padded = concat([zrow, x, zrow], 2)
    zcol = Tensor(np.zeros((b, c, h + 2, 1), dtype=x.data.dtype))
    padded = concat([zcol, padded, zcol], 3)
    shifts = []
    for dy in range(3):
        for dx in range(3):
            win = slice_axis(padded, 2, dy, dy + h)
            win = slice_axis(win, 3, dx, dx + w)
            shifts.append(win)
    return concat(shifts, 1)


class ViTAD:
    """Frozen ViT encoder, trainable fuser and ViT decoder."""

    def __init__(
        self,
        vit_cfg: ViTConfig | None = None,
        fuser_cfg: FuserConfig | None = None,
        seed: int = 0,
    ):
        self.vit_cfg = vit_cfg or ViTConfig()
        self.fuser_cfg = fuser_cfg or FuserConfig()
        self.seed = seed
        enc_ss, fus_ss, dec_ss = np.random.SeedSequence(seed).spawn(3)
        self.encoder = ViTEncoder(self.vit_cfg, np.random.default_rng(enc_ss))
        self.fuser = Fuser(self.fuser_cfg, self.vit_cfg, np.random.default_rng(fus_ss))
        self.decoder = ViTDecoder(self.vit_cfg, np.random.default_rng(dec_ss))

    def forward(self, images) -> tuple[StageFeatures, StageFeatures]:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, REAL))
        if images.ndim == 3:
            images = images.reshape((1,) + images.shape)
        enc = self.encoder.forward(images)
        fused = self.fuser(enc)
        dec = self.decoder.forward(fused)
        return enc, dec

    def named_tensors(self) -> dict[str, Tensor]:
        out = self.encoder.named("encoder")
        out.update(self.fuser.named("fuser"))
        out.update(self.decoder.named("decoder"))
        return out

    def trainable_tensors(self) -> dict[str, Tensor]:
        out = self.fuser.named("fuser")
        out.update(self.decoder.named("decoder"))
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named_tensors()
        missing = sorted(set(named) - set(arrays))
        extra = sorted(set(arrays) - set(named))
        if missing or extra:
            raise KeyError(
                f"state mismatch: missing {missing[:3]} unexpected {extra[:3]}"
            )
        for name, t in named.items():
            arr = np.asarray(arrays[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data[...] = arr


def vitad_forward(image, model: ViTAD) -> tuple[StageFeatures, StageFeatures]:
    return model.forward(image)
