"""Backbone building blocks: embedding stems, attention token mixers,
gated feed-forward blocks and the attention-augmented downsampling path.

The backbone keeps feature maps in (B, C, H, W); attention modules flatten
the spatial grid to N = H*W tokens internally and restore the map layout on
the way out.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import BatchNorm2d, Conv2d, Linear, Module, ModuleList


class GlaceStem(Module):
    """Three-stage embedding: two stride-2 conv+BN+GELU reductions followed
    by a stride-1 conv+BN refinement. Total stride 4. The final BN has no
    activation after it, so a zero input maps to the BN shift."""

    def __init__(self, width, rng, in_channels=3):
        super().__init__()
        if width % 2:
            raise ConfigError(f"stem width must be even, got {width}")
        half = width // 2
        self.conv1 = Conv2d(in_channels, half, 3, rng, stride=2, padding=1)
        self.bn1 = BatchNorm2d(half)
        self.conv2 = Conv2d(half, width, 3, rng, stride=2, padding=1)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, width, 3, rng, stride=1, padding=1)
        self.bn3 = BatchNorm2d(width)

    def forward(self, x):
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(
                f"stem needs spatial dims divisible by 4, got "
                f"{x.shape[2]}x{x.shape[3]}")
        y = T.gelu(self.bn1(self.conv1(x)))
        y = T.gelu(self.bn2(self.conv2(y)))
        return self.bn3(self.conv3(y))


class PatchStem(Module):
    """Single 7x7 stride-4 patchify convolution, the plain alternative to
    the staged stem."""

    def __init__(self, width, rng, in_channels=3):
        super().__init__()
        self.conv = Conv2d(in_channels, width, 7, rng, stride=4, padding=3)
        self.bn = BatchNorm2d(width)

    def forward(self, x):
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(
                f"stem needs spatial dims divisible by 4, got "
                f"{x.shape[2]}x{x.shape[3]}")
        return self.bn(self.conv(x))


class SqueezeExcite(Module):
    """Global-context channel gate: squeeze to per-channel means, pass
    through a bottleneck MLP, scale channels by the sigmoid output."""

    def __init__(self, channels, rng, reduction=4):
        super().__init__()
        if channels % reduction != 0:
            raise ConfigError(
                "squeeze-excite channels (%d) must be divisible by the "
                "reduction factor (%d)" % (channels, reduction))
        hidden = channels // reduction
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng, zero_bias=True)
        self.channels = channels

    def scale(self, x):
        B, C = x.shape[0], x.shape[1]
        pooled = T.reshape(T.adaptive_avg_pool2d(x, (1, 1)), (B, C))
        s = T.sigmoid(self.fc2(T.relu(self.fc1(pooled))))
        return T.reshape(s, (B, C, 1, 1))

    def forward(self, x):
        return T.mul(x, self.scale(x))


class ChannelAttention(Module):
    """CBAM channel half: a bottleneck MLP shared by the average- and
    max-pooled descriptors, responses summed then squashed."""

    def __init__(self, channels, rng, reduction=8):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng, zero_bias=True)

    def forward(self, x):
        B, C = x.shape[0], x.shape[1]
        avg = T.reshape(T.adaptive_avg_pool2d(x, (1, 1)), (B, C))
        mx = T.amax(T.reshape(x, (B, C, -1)), axis=2)
        a = self.fc2(T.relu(self.fc1(avg)))
        m = self.fc2(T.relu(self.fc1(mx)))
        s = T.sigmoid(T.add(a, m))
        return T.mul(x, T.reshape(s, (B, C, 1, 1)))


class SpatialAttention(Module):
    """CBAM spatial half: 7x7 conv over stacked channel-mean and
    channel-max maps, sigmoid, broadcast multiply."""

    def __init__(self, rng, kernel=7):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel, rng, padding=kernel // 2)

    def forward(self, x):
        avg = T.tmean(x, axis=1, keepdims=True)
        mx = T.amax(x, axis=1, keepdims=True)
        s = T.sigmoid(self.conv(T.concat([avg, mx], axis=1)))
        return T.mul(x, s)


class CBAM(Module):
    def __init__(self, channels, rng, reduction=8):
        super().__init__()
        self.channel = ChannelAttention(channels, rng, reduction)
        self.spatial = SpatialAttention(rng)

    def forward(self, x):
        return self.spatial(self.channel(x))


class AgentAttention(Module):
    """Attention routed through a small set of agent tokens.

    Agents are an adaptive average pooling of the query map onto a square
    grid. They first attend over all keys (aggregation), then queries attend
    over the agents (broadcast), so cost is linear in token count. With
    identity_agents=True the pooling is bypassed and the queries themselves
    act as agents, which restores full quadratic attention and permutation
    equivariance; it exists for testing.
    """

    def __init__(self, channels, heads, n_agents, rng):
        super().__init__()
        if channels % heads:
            raise ConfigError(
                f"channels {channels} not divisible by heads {heads}")
        side = int(round(np.sqrt(n_agents)))
        if side * side != n_agents:
            raise ConfigError(
                f"n_agents must be a perfect square, got {n_agents}")
        self.heads = heads
        self.n_agents = n_agents
        self.agent_side = side
        self.channels = channels
        self.wq = Linear(channels, channels, rng)
        self.wk = Linear(channels, channels, rng)
        self.wv = Linear(channels, channels, rng)
        self.wo = Linear(channels, channels, rng, zero_bias=True)

    def _split_heads(self, t, B, N):
        h = self.heads
        d = self.channels // h
        return T.transpose(T.reshape(t, (B, N, h, d)), (0, 2, 1, 3))

    def forward(self, x, identity_agents=False):
        B, C, H, W = x.shape
        if C != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {C}")
        N = H * W
        h = self.heads
        d = C // h
        tokens = T.transpose(T.reshape(x, (B, C, N)), (0, 2, 1))
        q = self._split_heads(self.wq(tokens), B, N)
        k = self._split_heads(self.wk(tokens), B, N)
        v = self._split_heads(self.wv(tokens), B, N)
        if identity_agents:
            agents = q
            na = N
        else:
            side = self.agent_side
            if side > H or side > W:
                raise ShapeError(
                    f"agent grid {side}x{side} larger than feature map "
                    f"{H}x{W}")
            qmap = T.reshape(T.transpose(q, (0, 1, 3, 2)), (B * h, d, H, W))
            pooled = T.adaptive_avg_pool2d(qmap, (side, side))
            agents = T.transpose(
                T.reshape(pooled, (B, h, d, side * side)), (0, 1, 3, 2))
            na = side * side
        inv_sqrt_d = 1.0 / np.sqrt(d)
        s1 = T.softmax(
            T.matmul(agents, T.transpose(k, (0, 1, 3, 2))) * inv_sqrt_d,
            axis=-1)
        v_agg = T.matmul(s1, v)
        s2 = T.softmax(
            T.matmul(q, T.transpose(agents, (0, 1, 3, 2))) * inv_sqrt_d,
            axis=-1)
        y = T.matmul(s2, v_agg)
        merged = T.reshape(T.transpose(y, (0, 2, 1, 3)), (B, N, C))
        out = self.wo(merged)
        return T.reshape(T.transpose(out, (0, 2, 1)), (B, C, H, W))


class FullAttention(Module):
    """Plain softmax attention over all token pairs. Reference mixer for
    cost comparisons; not part of the assembled model."""

    def __init__(self, channels, heads, rng):
        super().__init__()
        if channels % heads:
            raise ConfigError(
                f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.channels = channels
        self.wq = Linear(channels, channels, rng)
        self.wk = Linear(channels, channels, rng)
        self.wv = Linear(channels, channels, rng)
        self.wo = Linear(channels, channels, rng, zero_bias=True)

    def forward(self, x):
        B, C, H, W = x.shape
        N = H * W
        h = self.heads
        d = C // h
        tokens = T.transpose(T.reshape(x, (B, C, N)), (0, 2, 1))

        def split(t):
            return T.transpose(T.reshape(t, (B, N, h, d)), (0, 2, 1, 3))

        q = split(self.wq(tokens))
        k = split(self.wk(tokens))
        v = split(self.wv(tokens))
        s = T.softmax(
            T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d)),
            axis=-1)
        y = T.matmul(s, v)
        merged = T.reshape(T.transpose(y, (0, 2, 1, 3)), (B, N, C))
        out = self.wo(merged)
        return T.reshape(T.transpose(out, (0, 2, 1)), (B, C, H, W))


class ConvMixer(Module):
    """Depthwise 7x7 plus pointwise projection; stand-in token mixer when
    attention is ablated."""

    def __init__(self, channels, rng):
        super().__init__()
        self.dw = Conv2d(channels, channels, 7, rng, padding=3,
                         groups=channels)
        self.pw = Conv2d(channels, channels, 1, rng)

    def forward(self, x):
        return self.pw(self.dw(x))


class GEFB(Module):
    """Gated enhanced feed-forward block.

    Value path: pointwise expand, GELU, depthwise 3x3. Gate path: pointwise
    expand, sigmoid. The gated product is projected back and added to the
    input. The output projection starts at zero, so a fresh block is exactly
    the identity.
    """

    def __init__(self, channels, rng, expansion=2):
        super().__init__()
        hidden = channels * expansion
        self.pw_value = Conv2d(channels, hidden, 1, rng)
        self.dw = Conv2d(hidden, hidden, 3, rng, padding=1, groups=hidden)
        self.pw_gate = Conv2d(channels, hidden, 1, rng)
        self.pw_gate.bias.data[:] = 0.0
        self.pw_out = Conv2d(hidden, channels, 1, rng, zero_init=True)

    def forward(self, x):
        u = self.dw(T.gelu(self.pw_value(x)))
        g = T.sigmoid(self.pw_gate(x))
        return T.add(x, self.pw_out(T.mul(u, g)))


class MLPBlock(Module):
    """Ungated two-layer feed-forward residual block, the GEFB fallback.
    Output projection is zero-initialized for the same identity-at-init
    property."""

    def __init__(self, channels, rng, expansion=2):
        super().__init__()
        hidden = channels * expansion
        self.pw1 = Conv2d(channels, hidden, 1, rng)
        self.pw2 = Conv2d(hidden, channels, 1, rng, zero_init=True)

    def forward(self, x):
        return T.add(x, self.pw2(T.gelu(self.pw1(x))))


class BackboneBlock(Module):
    """One backbone stage block: pre-norm token mixing with a residual,
    channel recalibration, then the gated feed-forward."""

    def __init__(self, channels, heads, n_agents, rng, use_attention=True,
                 use_gefb=True, use_se=True, gefb_expansion=2):
        super().__init__()
        self.norm = BatchNorm2d(channels)
        if use_attention:
            self.mixer = AgentAttention(channels, heads, n_agents, rng)
        else:
            self.mixer = ConvMixer(channels, rng)
        if use_se:
            self.se = SqueezeExcite(channels, rng)
        self.use_se = use_se
        if use_gefb:
            self.ffn = GEFB(channels, rng, expansion=gefb_expansion)
        else:
            self.ffn = MLPBlock(channels, rng, expansion=gefb_expansion)
        self.use_attention = use_attention

    def forward(self, x, identity_agents=False):
        if self.use_attention:
            mixed = self.mixer(self.norm(x), identity_agents=identity_agents)
        else:
            mixed = self.mixer(self.norm(x))
        y = T.add(x, mixed)
        if self.use_se:
            y = self.se(y)
        return self.ffn(y)


class DownsampleBlock(Module):
    """Stride-2 transition that doubles channels, then refines the result
    with channel and spatial attention."""

    def __init__(self, channels, rng, use_cbam=True):
        super().__init__()
        self.conv = Conv2d(channels, channels * 2, 3, rng, stride=2,
                           padding=1)
        self.bn = BatchNorm2d(channels * 2)
        if use_cbam:
            self.cbam = CBAM(channels * 2, rng)
        self.use_cbam = use_cbam

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(
                f"downsample needs even spatial dims, got "
                f"{x.shape[2]}x{x.shape[3]}")
        y = T.gelu(self.bn(self.conv(x)))
        return self.cbam(y) if self.use_cbam else y


class Backbone(Module):
    """Four stages of blocks with stride-2 transitions; returns the feature
    pyramid (one map per stage, strides 4/8/16/32 relative to the input)."""

    def __init__(self, widths, depths, n_agents, rng, use_attention=True,
                 use_gefb=True, use_se=True, use_cbam=True,
                 gefb_expansion=2, heads_divisor=32):
        super().__init__()
        if len(widths) != len(depths):
            raise ConfigError("stage widths and depths differ in length")
        for a, b in zip(widths, widths[1:]):
            if b != 2 * a:
                raise ConfigError(
                    f"stage widths must double ({a} -> {b})")
        self.stages = ModuleList()
        self.transitions = ModuleList()
        for i, (c, depth) in enumerate(zip(widths, depths)):
            heads = max(1, c // heads_divisor)
            blocks = ModuleList(
                BackboneBlock(c, heads, n_agents, rng,
                              use_attention=use_attention,
                              use_gefb=use_gefb,
                              use_se=use_se,
                              gefb_expansion=gefb_expansion)
                for _ in range(depth))
            self.stages.append(blocks)
            if i + 1 < len(widths):
                self.transitions.append(
                    DownsampleBlock(c, rng, use_cbam=use_cbam))

    def forward(self, x):
        feats = []
        y = x
        for i, blocks in enumerate(self.stages):
            for blk in blocks:
                y = blk(y)
            feats.append(y)
            if i < len(self.transitions):
                y = self.transitions[i](y)
        return feats
