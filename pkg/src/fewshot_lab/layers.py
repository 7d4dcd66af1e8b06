"""Differentiable building blocks: convolution, linear, batchnorm wrappers
plus the composite units the embedding networks are assembled from
(multi-head self-attention over feature maps, attention-augmented
convolution, recurrent-residual unit, attention gate, fire module,
inception module).

Weight initialization: fan-in scaled zero-mean normal (std = sqrt(2/fan_in))
for layers feeding ReLU-family activations, uniform +-sqrt(1/fan_in) for
plain linear maps. Biases start at zero.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Parameter
from .errors import ConfigError, ContractError, DimensionError


class Layer:
    """Base class: parameter/buffer collection and train/eval mode."""

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for value in self.__dict__.values():
            if isinstance(value, Layer):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Layer):
                        yield item

    def named_parameters(self):
        """Dict of name -> Parameter; raises on duplicate names."""
        out = {}

        def collect(layer):
            for value in layer.__dict__.values():
                items = value if isinstance(value, (list, tuple)) else (value,)
                for item in items:
                    if isinstance(item, Parameter):
                        if item.name in out:
                            raise ContractError(f"duplicate parameter name {item.name!r}")
                        out[item.name] = item
                    elif isinstance(item, Layer):
                        collect(item)

        collect(self)
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def buffers(self):
        """Dict of name -> plain ndarray (non-learned persistent state)."""
        out = {}

        def collect(layer):
            own = getattr(layer, "_buffers", None)
            if own:
                for name, arr in own.items():
                    if name in out:
                        raise ContractError(f"duplicate buffer name {name!r}")
                    out[name] = arr
            for child in layer._children():
                collect(child)

        collect(self)
        return out

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def train(self, mode=True):
        self.training = mode
        for child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)


# ---------------------------------------------------------------------------
# primitive layers

class Conv2d(Layer):
    def __init__(self, name, cin, cout, k, rng, stride=1, padding=0, bias=True,
                 init="relu"):
        super().__init__()
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.padding = stride, padding
        fan_in = cin * k * k
        if init == "relu":
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        else:
            bound = math.sqrt(1.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias") if bias else None

    def forward(self, x):
        return ag.conv2d(x, self.weight, self.bias,
                         stride=self.stride, padding=self.padding)


class Linear(Layer):
    def __init__(self, name, din, dout, rng, bias=True):
        super().__init__()
        bound = math.sqrt(1.0 / din)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(din, dout)),
                                f"{name}.weight")
        self.bias = Parameter(np.zeros(dout), f"{name}.bias") if bias else None

    def forward(self, x):
        return ag.linear(x, self.weight, self.bias)


class BatchNorm(Layer):
    """Batch normalization over [B,F] or [B,C,H,W] inputs."""

    def __init__(self, name, num_features, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(np.ones(num_features), f"{name}.gamma")
        self.beta = Parameter(np.zeros(num_features), f"{name}.beta")
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self._buffers = {
            f"{name}.running_mean": self.running_mean,
            f"{name}.running_var": self.running_var,
        }

    def forward(self, x):
        return ag.batchnorm(x, self.gamma, self.beta,
                            self.running_mean, self.running_var,
                            training=self.training,
                            eps=self.eps, momentum=self.momentum)


# ---------------------------------------------------------------------------
# multi-head self-attention over a feature map

class MultiHeadSelfAttention2d(Layer):
    """Self-attention across all spatial positions of a [B,C,H,W] map.

    The map is flattened to H*W tokens of width C; per head,
    out = softmax(Q K^T / sqrt(d_k)) V with Q/K/V linear projections of the
    tokens; head outputs are concatenated and mixed by an output projection.
    Result is reshaped back to [B, heads*d_v, H, W].
    """

    def __init__(self, name, cin, rng, heads=2, d_k=8, d_v=8):
        super().__init__()
        if heads < 1 or d_k < 1 or d_v < 1:
            raise ConfigError(f"attention dims must be >= 1, got heads={heads}, d_k={d_k}, d_v={d_v}")
        self.cin, self.heads, self.d_k, self.d_v = cin, heads, d_k, d_v
        bound = math.sqrt(1.0 / cin)

        def proj(suffix, dout):
            return Parameter(rng.uniform(-bound, bound, size=(cin, dout)),
                             f"{name}.{suffix}")

        self.w_q = proj("w_q", heads * d_k)
        self.w_k = proj("w_k", heads * d_k)
        self.w_v = proj("w_v", heads * d_v)
        bo = math.sqrt(1.0 / (heads * d_v))
        self.w_o = Parameter(
            rng.uniform(-bo, bo, size=(heads * d_v, heads * d_v)), f"{name}.w_o")

    @property
    def out_channels(self):
        return self.heads * self.d_v

    def forward(self, x, return_attention=False):
        b, c, h, w = x.shape
        if c != self.cin:
            raise DimensionError(f"mhsa: expected {self.cin} channels, got {c}")
        hw = h * w
        tokens = ag.reshape(ag.transpose(x, (0, 2, 3, 1)), (b * hw, c))

        def split_heads(t, width):
            # [B*HW, heads*width] -> [B*heads, HW, width]
            t = ag.reshape(t, (b, hw, self.heads, width))
            t = ag.transpose(t, (0, 2, 1, 3))
            return ag.reshape(t, (b * self.heads, hw, width))

        q = split_heads(ag.matmul(tokens, self.w_q), self.d_k)
        k = split_heads(ag.matmul(tokens, self.w_k), self.d_k)
        v = split_heads(ag.matmul(tokens, self.w_v), self.d_v)

        scores = ag.matmul(q, ag.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(self.d_k))
        attn = ag.softmax(scores, axis=2)
        ctx = ag.matmul(attn, v)  # [B*heads, HW, d_v]

        ctx = ag.reshape(ctx, (b, self.heads, hw, self.d_v))
        ctx = ag.transpose(ctx, (0, 2, 1, 3))
        ctx = ag.reshape(ctx, (b * hw, self.heads * self.d_v))
        out = ag.matmul(ctx, self.w_o)
        out = ag.transpose(ag.reshape(out, (b, h, w, self.out_channels)), (0, 3, 1, 2))
        if return_attention:
            return out, attn.data.reshape(b, self.heads, hw, hw)
        return out


class AAConv2d(Layer):
    """Attention-augmented convolution: channel-concat of a shape-preserving
    conv and multi-head self-attention over the same input."""

    def __init__(self, name, cin, conv_channels, rng, k=3, heads=2, d_k=8, d_v=8):
        super().__init__()
        if k % 2 != 1:
            raise ConfigError(f"aa_conv: kernel must be odd to preserve shape, got {k}")
        if conv_channels < 1:
            raise ConfigError("aa_conv: conv branch needs at least one channel")
        self.conv = Conv2d(f"{name}.conv", cin, conv_channels, k, rng,
                           stride=1, padding=k // 2)
        self.attn = MultiHeadSelfAttention2d(f"{name}.attn", cin, rng,
                                             heads=heads, d_k=d_k, d_v=d_v)

    @property
    def out_channels(self):
        return self.conv.cout + self.attn.out_channels

    def forward(self, x):
        return ag.concat([self.conv(x), self.attn(x)], axis=1)


# ---------------------------------------------------------------------------
# recurrent-residual unit

class RecurrentResidualUnit(Layer):
    """Channel-preserving recurrent convolution wrapped in a residual add.

    h(0) = relu(conv_f(x)); h(t) = relu(conv_f(x) + conv_r(h(t-1))) for
    t = 1..T; output is x + h(T). conv_f carries the single bias term,
    conv_r is bias-free.
    """

    def __init__(self, name, channels, rng, t_steps=2, k=3):
        super().__init__()
        if t_steps < 0:
            raise ConfigError(f"recurrence steps must be >= 0, got {t_steps}")
        self.channels = channels
        self.t_steps = t_steps
        self.conv_f = Conv2d(f"{name}.conv_f", channels, channels, k, rng,
                             stride=1, padding=k // 2, bias=True)
        self.conv_r = Conv2d(f"{name}.conv_r", channels, channels, k, rng,
                             stride=1, padding=k // 2, bias=False)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise DimensionError(
                f"recurrent unit: expected {self.channels} channels, got {x.shape[1]}")
        drive = self.conv_f(x)  # same value every step, computed once
        h = ag.relu(drive)
        for _ in range(self.t_steps):
            h = ag.relu(drive + self.conv_r(h))
        return x + h


# ---------------------------------------------------------------------------
# attention gate

class AttentionGate(Layer):
    """Soft mask in (0,1) computed from a gating signal g and features x.

    alpha = sigmoid(psi(relu(Wg g + Wx x))); returns x * alpha broadcast
    over channels. A coarser g is upsampled (nearest-neighbor) to x's grid.
    """

    def __init__(self, name, c_gate, c_x, rng, inter=None):
        super().__init__()
        inter = inter or max(c_x, 1)
        self.conv_g = Conv2d(f"{name}.conv_g", c_gate, inter, 1, rng)
        self.conv_x = Conv2d(f"{name}.conv_x", c_x, inter, 1, rng)
        self.conv_psi = Conv2d(f"{name}.conv_psi", inter, 1, 1, rng, init="linear")

    def _align(self, g, x):
        gh, gw = g.shape[2], g.shape[3]
        xh, xw = x.shape[2], x.shape[3]
        if (gh, gw) == (xh, xw):
            return g
        if xh % gh or xw % gw or xh // gh != xw // gw:
            raise DimensionError(
                f"attention gate: cannot align gate {g.shape} to features {x.shape}")
        return ag.upsample_nearest2d(g, xh // gh)

    def coefficients(self, g, x):
        g = self._align(g, x)
        pre = ag.relu(self.conv_g(g) + self.conv_x(x))
        return ag.sigmoid(self.conv_psi(pre))  # [B,1,H,W]

    def forward(self, g, x):
        return ag.mul(x, self.coefficients(g, x))


# ---------------------------------------------------------------------------
# fire module

BYPASS_KINDS = ("none", "simple", "complex")


class FireModule(Layer):
    """Squeeze (s 1x1 filters) then expand (r filters split between 1x1 and
    3x3 banks), ReLU after both phases. ``bypass="simple"`` adds the input
    to the output and requires matching channel counts.

    ``split`` is the fraction of expand filters that are 1x1; the expand
    banks concatenate (1x1 bank first) to exactly r channels.
    """

    def __init__(self, name, cin, s, r, rng, split=0.5, bypass="none"):
        super().__init__()
        if bypass not in BYPASS_KINDS:
            raise ConfigError(f"unknown bypass kind {bypass!r}")
        if bypass == "complex":
            raise ConfigError("complex bypass is declared but not supported; use 'simple' or 'none'")
        if s < 1 or r < 2:
            raise ConfigError(f"fire module needs s >= 1 and r >= 2, got s={s}, r={r}")
        r1 = int(round(split * r))
        if not 1 <= r1 <= r - 1:
            raise ConfigError(f"expand split {split} leaves an empty bank for r={r}")
        if bypass == "simple" and cin != r:
            raise ConfigError(
                f"simple bypass needs input channels == r, got {cin} != {r}")
        self.s, self.r, self.split, self.bypass = s, r, split, bypass
        self.squeeze = Conv2d(f"{name}.squeeze", cin, s, 1, rng)
        self.expand1 = Conv2d(f"{name}.expand1", s, r1, 1, rng)
        self.expand3 = Conv2d(f"{name}.expand3", s, r - r1, 3, rng, padding=1)

    @property
    def sr_ratio(self):
        return self.s / self.r

    def forward(self, x):
        sq = ag.relu(self.squeeze(x))
        out = ag.relu(ag.concat([self.expand1(sq), self.expand3(sq)], axis=1))
        if self.bypass == "simple":
            out = out + x
        return out


# ---------------------------------------------------------------------------
# inception module

class InceptionModule(Layer):
    """Four shape-preserving branches concatenated on channels, 64 each:
    (a) 1x1; (b) 1x1 -> 3x3; (c) 1x1 -> 3x3 -> 3x3 (a 5x5 factorized into
    two 3x3, the only factorized branch); (d) 3x3 stride-1 same-pad maxpool
    -> 1x1. Input must be spatially 7x7; output is [B,256,7,7].
    """

    BRANCH = 64
    MID = 32

    def __init__(self, name, cin, rng):
        super().__init__()
        m, o = self.MID, self.BRANCH
        self.b1 = Conv2d(f"{name}.b1", cin, o, 1, rng)
        self.b2_reduce = Conv2d(f"{name}.b2_reduce", cin, m, 1, rng)
        self.b2 = Conv2d(f"{name}.b2", m, o, 3, rng, padding=1)
        self.b3_reduce = Conv2d(f"{name}.b3_reduce", cin, m, 1, rng)
        self.b3_a = Conv2d(f"{name}.b3_a", m, m, 3, rng, padding=1)
        self.b3_b = Conv2d(f"{name}.b3_b", m, o, 3, rng, padding=1)
        self.b4 = Conv2d(f"{name}.b4", cin, o, 1, rng)

    @property
    def out_channels(self):
        return 4 * self.BRANCH

    def forward(self, x):
        if x.shape[2] != 7 or x.shape[3] != 7:
            raise DimensionError(f"inception module expects 7x7 input, got {x.shape}")
        a = ag.relu(self.b1(x))
        b = ag.relu(self.b2(ag.relu(self.b2_reduce(x))))
        c = ag.relu(self.b3_b(ag.relu(self.b3_a(ag.relu(self.b3_reduce(x))))))
        d = ag.relu(self.b4(ag.maxpool2d(x, k=3, stride=1, padding=1)))
        return ag.concat([a, b, c, d], axis=1)
