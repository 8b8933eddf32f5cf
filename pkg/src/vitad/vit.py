"""Columnar plain-ViT encoder and decoder with stage taps.

The encoder is a standard pre-norm ViT whose blocks are grouped into
divisions; the feature tapped at each division boundary is one stage
F_i. The last stage is taken before the final layer norm when
``pre_norm_tap`` is set. The decoder is the same block type, randomly
initialized, consuming the fused feature and emitting reconstructed
stages paired with encoder stages N-1 down to 1 (or further down to the
stem for explicit division lists).

All token grids keep one resolution h = w = image_size / patch_size;
stages are exposed as [B, C, h, w] grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .tensor import (
    REAL,
    ShapeError,
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    reshape,
    slice_axis,
    softmax_lastdim,
    transpose,
)


class ConfigError(ValueError):
    """Raised when a model configuration violates its invariants."""


@dataclass
class ViTConfig:
    image_size: int = 256
    patch_size: int = 16
    embed_dim: int = 384
    num_heads: int = 6
    encoder_layers: int = 12
    encoder_divisions: int = 4
    decoder_layers: int = 9
    decoder_divisions: int = 3
    mlp_ratio: float = 4.0
    use_class_token: bool = False
    decoder_pos_embed: bool = True
    pre_norm_tap: bool = True
    # Non-uniform per-division layer counts. When given, they must agree
    # with the corresponding layer/division counts above.
    encoder_division_list: tuple[int, ...] | None = None
    decoder_division_list: tuple[int, ...] | None = None

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        for name in ("encoder", "decoder"):
            layers = getattr(self, f"{name}_layers")
            divisions = getattr(self, f"{name}_divisions")
            lst = getattr(self, f"{name}_division_list")
            if layers <= 0 or divisions <= 0:
                raise ConfigError(f"{name} layer/division counts must be positive")
            if lst is not None:
                if len(lst) != divisions:
                    raise ConfigError(
                        f"{name}_division_list has {len(lst)} entries, expected {divisions}"
                    )
                if any(n <= 0 for n in lst):
                    raise ConfigError(f"{name}_division_list entries must be positive")
                if sum(lst) != layers:
                    raise ConfigError(
                        f"{name}_division_list sums to {sum(lst)}, expected {layers}"
                    )
            elif layers % divisions != 0:
                raise ConfigError(
                    f"{name}_layers {layers} not divisible by {name}_divisions {divisions}"
                )
        if (
            self.decoder_division_list is None
            and self.decoder_divisions != self.encoder_divisions - 1
        ):
            raise ConfigError(
                "decoder_divisions must be encoder_divisions - 1 "
                "(override via an explicit decoder_division_list)"
            )
        if self.decoder_divisions > self.encoder_divisions:
            raise ConfigError(
                "decoder cannot have more divisions than the encoder has stages"
            )

    @property
    def tokens_per_side(self) -> int:
        return self.image_size // self.patch_size

    def encoder_sizes(self) -> list[int]:
        if self.encoder_division_list is not None:
            return list(self.encoder_division_list)
        return [self.encoder_layers // self.encoder_divisions] * self.encoder_divisions

    def decoder_sizes(self) -> list[int]:
        if self.decoder_division_list is not None:
            return list(self.decoder_division_list)
        return [self.decoder_layers // self.decoder_divisions] * self.decoder_divisions


@dataclass
class StageFeatures:
    """Ordered per-stage token grids with their stage indices.

    Encoder order is 1..N (plus the stage-0 stem kept aside); decoder
    order is N-1 downwards, so pairing by index is unambiguous even for
    asymmetric division lists.
    """

    stages: list[Tensor]
    indices: list[int]
    stem: Tensor | None = None

    def get(self, index: int) -> Tensor:
        if index in self.indices:
            return self.stages[self.indices.index(index)]
        if index == 0 and self.stem is not None:
            return self.stem
        raise KeyError(f"stage {index} not available (have {self.indices})")

    def available(self) -> set[int]:
        out = set(self.indices)
        if self.stem is not None:
            out.add(0)
        return out


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +/-2 std by inverse-CDF sampling."""
    lo, hi = ndtr(-2.0), ndtr(2.0)
    u = rng.random(size=shape) * (hi - lo) + lo
    return (ndtri(u) * std).astype(REAL)


def tokens_to_grid(x: Tensor, side: int) -> Tensor:
    b, t, c = x.shape
    if t != side * side:
        raise ShapeError(f"{t} tokens do not form a {side}x{side} grid")
    return reshape(transpose(x, (0, 2, 1)), (b, c, side, side))


def grid_to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return transpose(reshape(x, (b, c, h * w)), (0, 2, 1))


class TransformerBlock:
    """Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, rng, trainable: bool):
        if dim % num_heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        hidden = int(dim * mlp_ratio)
        t = trainable

        def w(shape):
            return Tensor(trunc_normal(rng, shape), requires_grad=t)

        def zeros(n):
            return Tensor(np.zeros(n, REAL), requires_grad=t)

        def ones(n):
            return Tensor(np.ones(n, REAL), requires_grad=t)

        self.ln1_g, self.ln1_b = ones(dim), zeros(dim)
        self.qkv_w, self.qkv_b = w((dim, 3 * dim)), zeros(3 * dim)
        self.out_w, self.out_b = w((dim, dim)), zeros(dim)
        self.ln2_g, self.ln2_b = ones(dim), zeros(dim)
        self.fc1_w, self.fc1_b = w((dim, hidden)), zeros(hidden)
        self.fc2_w, self.fc2_b = w((hidden, dim)), zeros(dim)

    _FIELDS = (
        "ln1_g", "ln1_b", "qkv_w", "qkv_b", "out_w", "out_b",
        "ln2_g", "ln2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b",
    )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{name}": getattr(self, name) for name in self._FIELDS}

    def attention(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        heads = self.num_heads
        hd = c // heads
        qkv = add(matmul(x, self.qkv_w), self.qkv_b)
        qkv = transpose(reshape(qkv, (b, t, 3, heads, hd)), (2, 0, 3, 1, 4))
        q = reshape(slice_axis(qkv, 0, 0, 1), (b, heads, t, hd))
        k = reshape(slice_axis(qkv, 0, 1, 2), (b, heads, t, hd))
        v = reshape(slice_axis(qkv, 0, 2, 3), (b, heads, t, hd))
        attn = softmax_lastdim(matmul(q, transpose(k, (0, 1, 3, 2))) * (hd ** -0.5))
        out = matmul(attn, v)
        out = reshape(transpose(out, (0, 2, 1, 3)), (b, t, c))
        return add(matmul(out, self.out_w), self.out_b)

    def mlp(self, x: Tensor) -> Tensor:
        h = gelu(add(matmul(x, self.fc1_w), self.fc1_b))
        return add(matmul(h, self.fc2_w), self.fc2_b)

    def __call__(self, x: Tensor) -> Tensor:
        x = add(x, self.attention(layer_norm(x, self.ln1_g, self.ln1_b)))
        x = add(x, self.mlp(layer_norm(x, self.ln2_g, self.ln2_b)))
        return x


class ViTEncoder:
    """Patchify + pre-norm blocks, frozen, tapped at division boundaries."""

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.frozen = True
        c = cfg.embed_dim
        p = cfg.patch_size
        t = cfg.tokens_per_side ** 2
        self.patch_w = Tensor(trunc_normal(rng, (3 * p * p, c)))
        self.patch_b = Tensor(np.zeros(c, REAL))
        pos_len = t + 1 if cfg.use_class_token else t
        self.pos = Tensor(trunc_normal(rng, (pos_len, c)))
        self.cls = Tensor(trunc_normal(rng, (1, c))) if cfg.use_class_token else None
        self.blocks = [
            TransformerBlock(c, cfg.num_heads, cfg.mlp_ratio, rng, trainable=False)
            for _ in range(cfg.encoder_layers)
        ]
        self.final_ln_g = Tensor(np.ones(c, REAL))
        self.final_ln_b = Tensor(np.zeros(c, REAL))

    def named(self, prefix: str = "encoder") -> dict[str, Tensor]:
        out = {
            f"{prefix}.patch_w": self.patch_w,
            f"{prefix}.patch_b": self.patch_b,
            f"{prefix}.pos": self.pos,
            f"{prefix}.final_ln_g": self.final_ln_g,
            f"{prefix}.final_ln_b": self.final_ln_b,
        }
        if self.cls is not None:
            out[f"{prefix}.cls"] = self.cls
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"{prefix}.blocks.{i}"))
        return out

    def patch_embed(self, images: Tensor) -> Tensor:
        """[B,3,H,W] -> [B,T,C] tokens with position embedding added."""
        cfg = self.cfg
        b, ch, hh, ww = images.shape
        if ch != 3 or hh != cfg.image_size or ww != cfg.image_size:
            raise ShapeError(
                f"expected [B,3,{cfg.image_size},{cfg.image_size}] input, got {images.shape}"
            )
        p = cfg.patch_size
        s = cfg.tokens_per_side
        x = reshape(images, (b, 3, s, p, s, p))
        x = transpose(x, (0, 2, 4, 1, 3, 5))
        x = reshape(x, (b, s * s, 3 * p * p))
        x = add(matmul(x, self.patch_w), self.patch_b)
        if self.cls is not None:
            cls = Tensor(
                np.broadcast_to(self.cls.data, (b, 1, cfg.embed_dim)).copy(),
                requires_grad=False,
            )
            x = concat([cls, x], 1)
        return add(x, self.pos)

    def _strip_cls(self, x: Tensor) -> Tensor:
        if self.cls is None:
            return x
        return slice_axis(x, 1, 1, x.shape[1])

    def forward(self, images: Tensor) -> StageFeatures:
        if not self.frozen:
            raise ConfigError("encoder must stay frozen")
        cfg = self.cfg
        side = cfg.tokens_per_side
        x = self.patch_embed(images)
        stem = tokens_to_grid(self._strip_cls(x), side)
        sizes = cfg.encoder_sizes()
        n = len(sizes)
        stages: list[Tensor] = []
        li = 0
        for d, count in enumerate(sizes, start=1):
            for _ in range(count):
                x = self.blocks[li](x)
                li += 1
            if d == n and not cfg.pre_norm_tap:
                x = layer_norm(x, self.final_ln_g, self.final_ln_b)
            stages.append(tokens_to_grid(self._strip_cls(x), side))
        return StageFeatures(stages=stages, indices=list(range(1, n + 1)), stem=stem)


class ViTDecoder:
    """Randomly initialized blocks reconstructing stages N-1 .. downwards."""

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        c = cfg.embed_dim
        t = cfg.tokens_per_side ** 2
        self.pos = (
            Tensor(trunc_normal(rng, (t, c)), requires_grad=True)
            if cfg.decoder_pos_embed
            else None
        )
        self.blocks = [
            TransformerBlock(c, cfg.num_heads, cfg.mlp_ratio, rng, trainable=True)
            for _ in range(cfg.decoder_layers)
        ]

    def named(self, prefix: str = "decoder") -> dict[str, Tensor]:
        out = {}
        if self.pos is not None:
            out[f"{prefix}.pos"] = self.pos
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"{prefix}.blocks.{i}"))
        return out

    def forward(self, fused: Tensor) -> StageFeatures:
        cfg = self.cfg
        if fused.ndim != 4 or fused.shape[1] != cfg.embed_dim:
            raise ShapeError(
                f"fused input must be [B,{cfg.embed_dim},h,w], got {fused.shape}"
            )
        side = fused.shape[2]
        x = grid_to_tokens(fused)
        if self.pos is not None:
            x = add(x, self.pos)
        sizes = cfg.decoder_sizes()
        n_enc = cfg.encoder_divisions
        stages: list[Tensor] = []
        li = 0
        for count in sizes:
            for _ in range(count):
                x = self.blocks[li](x)
                li += 1
            stages.append(tokens_to_grid(x, side))
        indices = [n_enc - 1 - j for j in range(len(sizes))]
        return StageFeatures(stages=stages, indices=indices)
