"""Embedding networks: five interchangeable encoders mapping a batch of
1x28x28 images to 64-dimensional vectors behind one interface.

All encoders are three-level contractions (28 -> 14 -> 7 -> 3 for the
pooling ones) with a fully connected head to the embedding width. The
``width`` multiplier scales channel counts so small desk-scale instances
keep the full structure.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError
from .layers import (
    AAConv2d,
    AttentionGate,
    BatchNorm,
    Conv2d,
    FireModule,
    InceptionModule,
    Layer,
    Linear,
    RecurrentResidualUnit,
)

EMBED_DIM = 64
IMAGE_SIZE = 28

BACKBONE_KINDS = ("unet", "attention_unet", "squeeze", "inception", "r2u")


@dataclass
class BackboneConfig:
    """Declarative description of one embedding network.

    kind-specific knobs: ``sr_ratio``/``expand_split`` for squeeze,
    ``t_steps`` for r2u, ``aa_depth`` (+ attention dims) for the U-Net
    variants. ``attn_d_k``/``attn_d_v`` of 0 mean "choose automatically":
    d_v takes half the substituted layer's output channels split across
    heads, d_k matches d_v.
    """

    kind: str = "unet"
    width: int = 1
    aa_depth: int = 0
    attn_heads: int = 2
    attn_d_k: int = 0
    attn_d_v: int = 0
    sr_ratio: float = 0.75
    expand_split: float = 0.5
    t_steps: int = 2

    def validate(self):
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError(f"unknown backbone kind {self.kind!r}; choose from {BACKBONE_KINDS}")
        if self.width < 1:
            raise ConfigError(f"width multiplier must be >= 1, got {self.width}")
        if not 0 <= self.aa_depth <= 3:
            raise ConfigError(f"aa_depth must be in 0..3, got {self.aa_depth}")
        if self.aa_depth and self.kind not in ("unet", "attention_unet"):
            raise ConfigError(f"aa_depth applies to the U-Net variants, not {self.kind!r}")
        if self.attn_heads < 1:
            raise ConfigError("attn_heads must be >= 1")
        if self.attn_d_k < 0 or self.attn_d_v < 0:
            raise ConfigError("attention dims must be >= 0 (0 = auto)")
        if not 0.0 < self.sr_ratio <= 1.0:
            raise ConfigError(f"sr_ratio must be in (0,1], got {self.sr_ratio}")
        if not 0.0 < self.expand_split < 1.0:
            raise ConfigError(f"expand_split must be in (0,1), got {self.expand_split}")
        if self.t_steps < 0:
            raise ConfigError(f"t_steps must be >= 0, got {self.t_steps}")
        return self


@dataclass
class EmbeddingBatch:
    """[B,64] embeddings plus the producing backbone kind."""

    values: Tensor
    kind: str

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != EMBED_DIM:
            raise DimensionError(
                f"embedding batch must be [B,{EMBED_DIM}], got {self.values.shape}")


def _check_images(x):
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != IMAGE_SIZE or x.shape[3] != IMAGE_SIZE:
        raise DimensionError(f"expected images [B,1,{IMAGE_SIZE},{IMAGE_SIZE}], got {x.shape}")


class Backbone(Layer):
    kind = "?"

    def embed(self, images):
        return EmbeddingBatch(self.forward(images), self.kind)


def _make_conv_or_aa(name, cin, cout, rng, cfg, substitute):
    """A 3x3 same-pad conv layer, or its attention-augmented replacement.

    The replacement keeps the same output channel count: the attention
    branch claims heads*d_v of it, the conv branch the remainder.
    """
    if not substitute:
        return Conv2d(name, cin, cout, 3, rng, padding=1)
    heads = cfg.attn_heads
    d_v = cfg.attn_d_v or max(1, cout // (2 * heads))
    d_k = cfg.attn_d_k or d_v
    conv_channels = cout - heads * d_v
    if conv_channels < 1:
        raise ConfigError(
            f"aa_conv at {name}: heads*d_v = {heads * d_v} leaves no conv channels of {cout}")
    return AAConv2d(name, cin, conv_channels, rng, k=3, heads=heads, d_k=d_k, d_v=d_v)


class _ContractionBlock(Layer):
    """Two 3x3 same-pad convs with ReLU; pooling is applied by the caller."""

    def __init__(self, name, cin, cout, rng, cfg, first_index):
        super().__init__()
        self.conv1 = _make_conv_or_aa(f"{name}.conv1", cin, cout, rng, cfg,
                                      substitute=first_index < cfg.aa_depth)
        self.conv2 = _make_conv_or_aa(f"{name}.conv2", cout, cout, rng, cfg,
                                      substitute=first_index + 1 < cfg.aa_depth)

    def forward(self, x):
        return ag.relu(self.conv2(ag.relu(self.conv1(x))))


def _contraction_channels(width):
    base = 8 * width
    return [base, 2 * base, 4 * base]


class UNetEmbed(Backbone):
    """Contraction-only U-Net: three blocks of (conv, conv, 2x2 maxpool),
    channel count doubling per block, fully connected head to 64."""

    kind = "unet"

    def __init__(self, name, rng, cfg):
        super().__init__()
        channels = _contraction_channels(cfg.width)
        self.blocks = []
        cin, conv_index = 1, 0
        for i, cout in enumerate(channels, start=1):
            self.blocks.append(
                _ContractionBlock(f"{name}.block{i}", cin, cout, rng, cfg, conv_index))
            cin = cout
            conv_index += 2
        self.fc = Linear(f"{name}.fc", channels[-1] * 3 * 3, EMBED_DIM, rng)

    def forward(self, x):
        _check_images(x)
        for block in self.blocks:
            x = ag.maxpool2d(block(x), k=2, stride=2)
        return self.fc(ag.flatten(x))


class AttentionUNetEmbed(Backbone):
    """U-Net contraction with attention gates between encoder levels.

    Each finer level is gated, before pooling, by a preliminary pass of the
    next (coarser) level upsampled to its grid; the coarser block is then
    re-applied to the gated, pooled features. With saturated gates
    (alpha -> 1) this reduces exactly to the plain contraction.
    """

    kind = "attention_unet"

    def __init__(self, name, rng, cfg):
        super().__init__()
        channels = _contraction_channels(cfg.width)
        self.blocks = []
        cin, conv_index = 1, 0
        for i, cout in enumerate(channels, start=1):
            self.blocks.append(
                _ContractionBlock(f"{name}.block{i}", cin, cout, rng, cfg, conv_index))
            cin = cout
            conv_index += 2
        self.gates = [
            AttentionGate(f"{name}.gate{i}", c_gate=channels[i], c_x=channels[i - 1], rng=rng)
            for i in (1, 2)
        ]
        self.fc = Linear(f"{name}.fc", channels[-1] * 3 * 3, EMBED_DIM, rng)

    def forward(self, x):
        _check_images(x)
        b1, b2, b3 = self.blocks
        g1, g2 = self.gates

        f1 = b1(x)
        f2_pre = b2(ag.maxpool2d(f1, k=2, stride=2))
        a1 = g1(f2_pre, f1)
        f2 = b2(ag.maxpool2d(a1, k=2, stride=2))
        f3_pre = b3(ag.maxpool2d(f2, k=2, stride=2))
        a2 = g2(f3_pre, f2)
        f3 = b3(ag.maxpool2d(a2, k=2, stride=2))
        return self.fc(ag.flatten(ag.maxpool2d(f3, k=2, stride=2)))


class SqueezeEmbed(Backbone):
    """Stem conv to r channels, three fire modules with simple bypass,
    one late 2x2 maxpool (delayed downsampling), global average pool, FC."""

    kind = "squeeze"

    def __init__(self, name, rng, cfg):
        super().__init__()
        r = 16 * cfg.width
        s = max(1, round(cfg.sr_ratio * r))
        self.stem = Conv2d(f"{name}.stem", 1, r, 3, rng, padding=1)
        self.fires = [
            FireModule(f"{name}.fire{i}", r, s, r, rng,
                       split=cfg.expand_split, bypass="simple")
            for i in (1, 2, 3)
        ]
        self.fc = Linear(f"{name}.fc", r, EMBED_DIM, rng)

    def forward(self, x):
        _check_images(x)
        x = ag.relu(self.stem(x))
        for fire in self.fires:
            x = fire(x)
        x = ag.maxpool2d(x, k=2, stride=2)
        x = ag.mean_(x, axis=(2, 3))
        return self.fc(x)


class InceptionEmbed(Backbone):
    """Two stride-2 stem convs (28 -> 14 -> 7), inception module to 256
    channels, flatten to 12544, FC to 64, batchnorm, leaky ReLU."""

    kind = "inception"
    leaky_slope = 0.01

    def __init__(self, name, rng, cfg):
        super().__init__()
        c1 = 8 * cfg.width
        c2 = 16 * cfg.width
        self.stem1 = Conv2d(f"{name}.stem1", 1, c1, 3, rng, stride=2, padding=1)
        self.stem2 = Conv2d(f"{name}.stem2", c1, c2, 3, rng, stride=2, padding=1)
        self.inception = InceptionModule(f"{name}.inception", c2, rng)
        flat = self.inception.out_channels * 7 * 7
        self.fc = Linear(f"{name}.fc", flat, EMBED_DIM, rng)
        self.bn = BatchNorm(f"{name}.bn", EMBED_DIM)

    def forward(self, x):
        _check_images(x)
        x = ag.relu(self.stem1(x))
        x = ag.relu(self.stem2(x))
        x = self.inception(x)
        x = ag.flatten(x)
        x = self.bn(self.fc(x))
        return ag.leaky_relu(x, self.leaky_slope)


class R2UEmbed(Backbone):
    """Three encoder levels of (1x1 channel lift, recurrent-residual unit,
    2x2 maxpool), channels doubling per level, FC head."""

    kind = "r2u"

    def __init__(self, name, rng, cfg):
        super().__init__()
        channels = _contraction_channels(cfg.width)
        self.lifts = []
        self.units = []
        cin = 1
        for i, cout in enumerate(channels, start=1):
            self.lifts.append(Conv2d(f"{name}.lift{i}", cin, cout, 1, rng))
            self.units.append(
                RecurrentResidualUnit(f"{name}.unit{i}", cout, rng, t_steps=cfg.t_steps))
            cin = cout
        self.fc = Linear(f"{name}.fc", channels[-1] * 3 * 3, EMBED_DIM, rng)

    def forward(self, x):
        _check_images(x)
        for lift, unit in zip(self.lifts, self.units):
            x = ag.maxpool2d(unit(lift(x)), k=2, stride=2)
        return self.fc(ag.flatten(x))


_BACKBONES = {
    "unet": UNetEmbed,
    "attention_unet": AttentionUNetEmbed,
    "squeeze": SqueezeEmbed,
    "inception": InceptionEmbed,
    "r2u": R2UEmbed,
}


def build_backbone(cfg, rng, name="backbone"):
    cfg.validate()
    return _BACKBONES[cfg.kind](name, rng, cfg)
