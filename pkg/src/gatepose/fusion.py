"""Multi-scale fusion and the heatmap decoder.

Pyramid levels are aligned to a common target grid (the stride-16 level by
default): finer maps are average-pooled down, coarser maps are upsampled
with either the offset-predicting sampler or fixed bilinear interpolation.
Aligned maps are concatenated along channels and refined by a pointwise
projection; the decoder then runs two stride-2 transposed convolutions and
a pointwise head to produce one heatmap per joint at 1/4 input resolution.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import BatchNorm2d, Conv2d, Deconv2d, Module, ModuleList


def _base_grid(H, W, scale):
    """Half-pixel source coordinates for integer-factor upsampling,
    (H*scale, W*scale, 2) with [..., 0] = x."""
    xs = (np.arange(W * scale) + 0.5) / scale - 0.5
    ys = (np.arange(H * scale) + 0.5) / scale - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


class BilinearUpsample(Module):
    """Fixed bilinear upsampling by an integer factor."""

    def __init__(self, scale):
        super().__init__()
        if scale < 2:
            raise ConfigError(f"upsample scale must be >= 2, got {scale}")
        self.scale = scale

    def forward(self, x):
        B, C, H, W = x.shape
        grid = _base_grid(H, W, self.scale)
        coords = T.Tensor(np.broadcast_to(grid, (B,) + grid.shape))
        return T.grid_sample_bilinear(x, coords)


class Dysample(Module):
    """Content-aware upsampler.

    A zero-initialized pointwise conv predicts 2*scale^2 offset channels,
    pixel-shuffled into an (x, y) offset field on the output grid, scaled by
    0.25 and added to the half-pixel bilinear base coordinates. At init the
    offsets vanish, so the module starts as exact bilinear upsampling.
    """

    def __init__(self, channels, scale, rng):
        super().__init__()
        if scale not in (2, 4):
            raise ConfigError(
                f"offset upsampler supports scale 2 or 4, got {scale}")
        self.scale = scale
        self.offset = Conv2d(channels, 2 * scale * scale, 1, rng,
                             zero_init=True)

    def forward(self, x):
        B, C, H, W = x.shape
        s = self.scale
        off = self.offset(x)
        off = T.reshape(off, (B, 2, s, s, H, W))
        off = T.transpose(off, (0, 1, 4, 2, 5, 3))
        off = T.reshape(off, (B, 2, H * s, W * s))
        off = T.transpose(off, (0, 2, 3, 1))
        grid = _base_grid(H, W, s)
        coords = T.add(T.mul(off, 0.25), T.Tensor(grid))
        return T.grid_sample_bilinear(x, coords)


class PoolDown(Module):
    """Average-pool a finer level down by an integer factor."""

    def __init__(self, factor):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        return T.avg_pool2d(x, self.factor)


class Passthrough(Module):
    def forward(self, x):
        return x


class FusionHead(Module):
    """Concatenate pyramid levels on a common grid and project.

    widths/strides describe the pyramid; target_stride picks the grid. The
    concatenated tensor keeps the level order, so channel slices recover the
    aligned inputs.
    """

    def __init__(self, widths, strides, target_stride, fusion_width, rng,
                 use_dysample=True):
        super().__init__()
        self.widths = list(widths)
        self.strides = list(strides)
        self.target_stride = target_stride
        self.resize = ModuleList()
        for w, s in zip(widths, strides):
            if s == target_stride:
                self.resize.append(Passthrough())
            elif s < target_stride:
                if target_stride % s:
                    raise ConfigError(
                        f"stride {s} does not divide target "
                        f"{target_stride}")
                self.resize.append(PoolDown(target_stride // s))
            else:
                if s % target_stride:
                    raise ConfigError(
                        f"target stride {target_stride} does not divide "
                        f"{s}")
                scale = s // target_stride
                if use_dysample:
                    self.resize.append(Dysample(w, scale, rng))
                else:
                    self.resize.append(BilinearUpsample(scale))
        self.total_width = sum(widths)
        self.refine = Conv2d(self.total_width, fusion_width, 1, rng)
        self.bn = BatchNorm2d(fusion_width)

    def forward(self, feats):
        """Returns (fused, refined): the raw channel concat and the
        projected map."""
        if len(feats) != len(self.resize):
            raise ShapeError(
                f"expected {len(self.resize)} pyramid levels, got "
                f"{len(feats)}")
        aligned = [op(f) for op, f in zip(self.resize, feats)]
        hw = aligned[0].shape[2:]
        for a in aligned[1:]:
            if a.shape[2:] != hw:
                raise ShapeError(
                    f"aligned levels disagree on grid: {a.shape[2:]} vs "
                    f"{hw}")
        fused = T.concat(aligned, axis=1)
        refined = T.gelu(self.bn(self.refine(fused)))
        return fused, refined


class Decoder(Module):
    """Two stride-2 transposed convolutions and a pointwise head."""

    def __init__(self, in_width, widths, n_joints, rng):
        super().__init__()
        if len(widths) != 2:
            raise ConfigError(
                f"decoder expects two stage widths, got {len(widths)}")
        d1, d2 = widths
        self.deconv1 = Deconv2d(in_width, d1, 4, rng, stride=2, padding=1)
        self.bn1 = BatchNorm2d(d1)
        self.deconv2 = Deconv2d(d1, d2, 4, rng, stride=2, padding=1)
        self.bn2 = BatchNorm2d(d2)
        self.head = Conv2d(d2, n_joints, 1, rng)

    def forward(self, x):
        y = T.gelu(self.bn1(self.deconv1(x)))
        y = T.gelu(self.bn2(self.deconv2(y)))
        return self.head(y)


def argmax_keypoints(heatmaps):
    """Decode (B, J, H, W) heatmaps to (B, J, 3) rows of [x, y, score].

    Takes the row-major argmax per channel, then shifts a quarter pixel
    toward the larger horizontal/vertical neighbor (skipped at borders).
    """
    hm = heatmaps.data if isinstance(heatmaps, T.Tensor) else heatmaps
    if hm.ndim != 4:
        raise ShapeError("argmax_keypoints expects (B, J, H, W)")
    B, J, H, W = hm.shape
    out = np.zeros((B, J, 3))
    for b in range(B):
        for j in range(J):
            flat = int(np.argmax(hm[b, j]))
            y, x = divmod(flat, W)
            px, py = float(x), float(y)
            if 0 < x < W - 1:
                px += 0.25 * np.sign(hm[b, j, y, x + 1] - hm[b, j, y, x - 1])
            if 0 < y < H - 1:
                py += 0.25 * np.sign(hm[b, j, y + 1, x] - hm[b, j, y - 1, x])
            out[b, j] = (px, py, hm[b, j, y, x])
    return out
