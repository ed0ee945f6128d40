"""Noise-predicting UNet conditioned on a reference glyph, a timestep and a style.

The noisy image and the reference glyph are stacked as two input channels.
The timestep and the style vector are each projected to the embedding width,
summed, and injected as a per-channel bias after the first convolution of
every residual block.

The channel ladder has ``2k + 1`` entries: ``k`` encoder stages (each followed
by a stride-2 downsample), a bottleneck, and ``k`` decoder stages (each
preceded by a nearest-neighbour upsample) that consume the mirrored encoder
activation through a skip concatenation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import IndexOutOfRange, InvalidConfig, ShapeMismatch, WeightSumError


@dataclass(frozen=True)
class DenoiserConfig:
    input_side: int = 32
    channel_ladder: tuple[int, ...] = (32, 64, 128, 64, 32)
    embedding_dim: int = 128
    attention_sides: tuple[int, ...] = (8,)
    num_styles: int = 2
    groups_per_norm: int = 8

    def __post_init__(self):
        object.__setattr__(self, "channel_ladder", tuple(int(c) for c in self.channel_ladder))
        object.__setattr__(self, "attention_sides", tuple(sorted({int(s) for s in self.attention_sides}, reverse=True)))

    @property
    def depth(self) -> int:
        """Number of downsampling stages ``k``."""
        return len(self.channel_ladder) // 2

    def stage_sides(self) -> list[int]:
        """Spatial side of every ladder stage, encoder through decoder."""
        k = self.depth
        return [self.input_side >> min(i, 2 * k - i) for i in range(2 * k + 1)]

    def validate(self) -> "DenoiserConfig":
        ladder = self.channel_ladder
        if len(ladder) % 2 != 1:
            raise InvalidConfig(f"channel ladder needs odd length, got {len(ladder)}")
        if any(c <= 0 for c in ladder):
            raise InvalidConfig("channel widths must be positive")
        if ladder != ladder[::-1]:
            raise InvalidConfig(f"channel ladder must be mirror-symmetric, got {list(ladder)}")
        side = self.input_side
        if side < 8 or side & (side - 1):
            raise InvalidConfig(f"input side must be a power of two >= 8, got {side}")
        if side >> self.depth < 2:
            raise InvalidConfig(f"{self.depth} halvings of {side} fall below 2x2")
        if self.embedding_dim < 2 or self.embedding_dim % 2:
            raise InvalidConfig(f"embedding_dim must be even and >= 2, got {self.embedding_dim}")
        if self.num_styles < 1:
            raise InvalidConfig("num_styles must be >= 1")
        g = self.groups_per_norm
        if g < 1 or any(c % g for c in ladder):
            raise InvalidConfig(f"every ladder width must be divisible by groups_per_norm={g}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_ladder"] = list(self.channel_ladder)
        d["attention_sides"] = list(self.attention_sides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(
            input_side=int(d["input_side"]),
            channel_ladder=tuple(d["channel_ladder"]),
            embedding_dim=int(d["embedding_dim"]),
            attention_sides=tuple(d.get("attention_sides", ())),
            num_styles=int(d["num_styles"]),
            groups_per_norm=int(d.get("groups_per_norm", 8)),
        )


DESK_CONFIG = DenoiserConfig()
FULL_CONFIG = DenoiserConfig(
    input_side=128,
    channel_ladder=(128, 128, 256, 256, 512, 512, 512, 512, 512, 256, 256, 128, 128),
    embedding_dim=512,
    attention_sides=(16, 8),
    num_styles=7,
    groups_per_norm=8,
)


def sinusoidal_encoding(t, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Raw interleaved (sin, cos) encoding of integer timesteps.

    Column ``2i`` holds ``sin(t * w_i)`` and ``2i + 1`` holds ``cos(t * w_i)``
    with ``w_i = 10000 ** (-i / (dim / 2))``.
    """
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = t[:, None] * freqs[None, :]
    enc = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(t.shape[0], dim)
    return enc.to(dtype)


def _norm(groups: int, channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = _norm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = _norm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(cond))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Single-head spatial self-attention with a residual connection."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm = _norm(groups, channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        weights = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", weights, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Stage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int, attention: bool):
        super().__init__()
        self.res = ResidualBlock(in_ch, out_ch, emb_dim, groups)
        self.attn = AttentionBlock(out_ch, groups) if attention else None

    def forward(self, x, cond):
        x = self.res(x, cond)
        if self.attn is not None:
            x = self.attn(x)
        return x


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Denoiser(nn.Module):
    """The UNet. Call as ``net(x_t, reference, t, style)``.

    ``x_t`` and ``reference`` are ``(B, 1, S, S)`` (or unbatched ``(1, S, S)``),
    ``t`` holds 1-based integer steps, ``style`` is ``(B, E)`` or ``(E,)``.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        E = config.embedding_dim
        g = config.groups_per_norm
        ladder = config.channel_ladder
        sides = config.stage_sides()
        k = config.depth
        attn = set(config.attention_sides)

        self.time_mlp = nn.Sequential(nn.Linear(E, E), nn.SiLU(), nn.Linear(E, E))
        self.style_table = nn.Embedding(config.num_styles, E)
        self.style_proj = nn.Linear(E, E)
        self.input_conv = nn.Conv2d(2, ladder[0], 3, padding=1)

        self.encoder = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = ladder[0]
        for i in range(k):
            self.encoder.append(Stage(prev, ladder[i], E, g, sides[i] in attn))
            self.down.append(Downsample(ladder[i]))
            prev = ladder[i]
        self.bottleneck = Stage(prev, ladder[k], E, g, sides[k] in attn)
        prev = ladder[k]
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for j in range(k + 1, 2 * k + 1):
            self.up.append(Upsample(prev))
            self.decoder.append(Stage(prev + ladder[2 * k - j], ladder[j], E, g, sides[j] in attn))
            prev = ladder[j]
        self.out_norm = _norm(g, prev)
        self.out_conv = nn.Conv2d(prev, 1, 3, padding=1)

    def embed_timestep(self, t) -> torch.Tensor:
        raw = sinusoidal_encoding(t, self.config.embedding_dim, dtype=self.out_conv.weight.dtype)
        return self.time_mlp(raw.to(self.out_conv.weight.device))

    def condition(self, t, style: torch.Tensor) -> torch.Tensor:
        return self.embed_timestep(t) + self.style_proj(style)

    def forward(self, x_t, reference, t, style, trace: list | None = None) -> torch.Tensor:
        unbatched = x_t.dim() == 3
        if unbatched:
            x_t, reference = x_t[None], reference[None]
        S = self.config.input_side
        if x_t.shape != reference.shape or tuple(x_t.shape[1:]) != (1, S, S):
            raise ShapeMismatch(
                f"expected x_t and reference of shape (B, 1, {S}, {S}), got {tuple(x_t.shape)} and {tuple(reference.shape)}"
            )
        B = x_t.shape[0]
        if style.dim() == 1:
            style = style[None].expand(B, -1)
        if tuple(style.shape) != (B, self.config.embedding_dim):
            raise ShapeMismatch(f"style must be ({B}, {self.config.embedding_dim}), got {tuple(style.shape)}")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and B > 1:
            t = t.expand(B)
        if t.numel() != B:
            raise ShapeMismatch(f"need one timestep per batch item, got {t.numel()} for batch {B}")

        cond = self.condition(t, style.to(x_t.dtype))
        h = self.input_conv(torch.cat([x_t, reference], dim=1))
        skips = []
        for i, (stage, down) in enumerate(zip(self.encoder, self.down)):
            h = stage(h, cond)
            skips.append(h)
            if trace is not None:
                trace.append(("encoder", i, tuple(h.shape)))
            h = down(h)
        h = self.bottleneck(h, cond)
        k = self.config.depth
        if trace is not None:
            trace.append(("bottleneck", k, tuple(h.shape)))
        for j, (up, stage) in enumerate(zip(self.up, self.decoder), start=k + 1):
            h = up(h)
            skip = skips[2 * k - j]
            if trace is not None:
                trace.append(("skip", 2 * k - j, tuple(skip.shape)))
            h = stage(torch.cat([h, skip], dim=1), cond)
            if trace is not None:
                trace.append(("decoder", j, tuple(h.shape)))
        out = self.out_conv(F.silu(self.out_norm(h)))
        return out[0] if unbatched else out


def build(config: DenoiserConfig, seed: int = 0) -> Denoiser:
    """Deterministically initialized network; the output convolution starts at zero."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = Denoiser(config)
    with torch.no_grad():
        net.out_conv.weight.zero_()
        net.out_conv.bias.zero_()
    return net


def count_parameters(config: DenoiserConfig) -> int:
    """Closed-form parameter count, kept independent of the module code."""
    config.validate()
    E = config.embedding_dim
    ladder = config.channel_ladder
    sides = config.stage_sides()
    attn = set(config.attention_sides)
    k = config.depth

    def conv(i, o, ks):
        return i * o * ks * ks + o

    def linear(i, o):
        return i * o + o

    def norm(c):
        return 2 * c

    def res(i, o):
        n = norm(i) + conv(i, o, 3) + linear(E, o) + norm(o) + conv(o, o, 3)
        return n + (conv(i, o, 1) if i != o else 0)

    def attention(c):
        return norm(c) + conv(c, 3 * c, 1) + conv(c, c, 1)

    total = 2 * linear(E, E) + config.num_styles * E + linear(E, E)
    total += conv(2, ladder[0], 3)
    prev = ladder[0]
    for i in range(k):
        total += res(prev, ladder[i]) + (attention(ladder[i]) if sides[i] in attn else 0)
        total += conv(ladder[i], ladder[i], 3)
        prev = ladder[i]
    total += res(prev, ladder[k]) + (attention(ladder[k]) if sides[k] in attn else 0)
    prev = ladder[k]
    for j in range(k + 1, 2 * k + 1):
        total += conv(prev, prev, 3)
        total += res(prev + ladder[2 * k - j], ladder[j]) + (attention(ladder[j]) if sides[j] in attn else 0)
        prev = ladder[j]
    total += norm(prev) + conv(prev, 1, 3)
    return total


def lookup_style(net: Denoiser, style_id: int) -> torch.Tensor:
    n = net.config.num_styles
    if int(style_id) != style_id or not (0 <= style_id < n):
        raise IndexOutOfRange(f"style id {style_id!r} outside [0, {n})")
    return net.style_table.weight[int(style_id)].detach().clone()


def mix_styles(embeddings, weights) -> torch.Tensor:
    """Convex mixture ``sum_i w_i * e_i``; weights must be non-negative and sum to 1."""
    embeddings = list(embeddings)
    weights = [float(w) for w in weights]
    if not embeddings or len(embeddings) != len(weights):
        raise WeightSumError(f"need one weight per embedding, got {len(weights)} for {len(embeddings)}")
    if any(w < 0 or not math.isfinite(w) for w in weights):
        raise WeightSumError(f"mixture weights must be finite and non-negative, got {weights}")
    if abs(math.fsum(weights) - 1.0) > 1e-9:
        raise WeightSumError(f"mixture weights must sum to 1, got {math.fsum(weights)!r}")
    shapes = {tuple(e.shape) for e in embeddings}
    if len(shapes) != 1:
        raise ShapeMismatch(f"embeddings differ in shape: {sorted(shapes)}")
    out = weights[0] * embeddings[0]
    for w, e in zip(weights[1:], embeddings[1:]):
        out = out + w * e
    return out
