"""Model assembly: configuration record, the assembled network, and the
forward pass that carries an image to per-joint heatmaps.

The network is stem -> four-stage backbone -> multi-scale fusion ->
deconvolution decoder. A token bank rides along for the selective
distillation loss; it shares the pooled fusion features but is not part of
the image-to-heatmap path.
"""

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import Backbone, GlaceStem, PatchStem
from .errors import ConfigError
from .fusion import Decoder, FusionHead
from .losses import TokenBank
from .nn import Module

PYRAMID_STRIDES = (4, 8, 16, 32)


@dataclass
class ModelConfig:
    """Complete architectural and training hyperparameter record.

    The four use_* toggles mirrored in the ablation matrix swap a component
    for its plain fallback (patchify stem, depthwise-conv mixer, ungated
    MLP, fixed bilinear upsampling); use_cbam and use_se simply bypass the
    recalibration stages. Toggles never change tensor shapes.
    """

    input_size: tuple = (256, 192)
    in_channels: int = 3
    stem_width: int = 96
    stage_channels: tuple = (96, 192, 384, 768)
    stage_depths: tuple = (2, 2, 4, 2)
    heads_divisor: int = 32
    n_agents: int = 16
    gefb_expansion: int = 2
    n_joints: int = 17
    fusion_width: int = 256
    fusion_target_stride: int = 16
    decoder_widths: tuple = (128, 64)
    n_tokens: int = 8
    token_dim: int = 256
    heatmap_sigma: float = 2.0
    use_glace: bool = True
    use_agent_attention: bool = True
    use_gefb: bool = True
    use_dysample: bool = True
    use_cbam: bool = True
    use_se: bool = True
    gt_weight: float = 1.0
    lambda_od: float = 0.5
    lambda_td: float = 0.1
    learning_rate: float = 2e-3
    teacher_checkpoint: str = None
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.stage_channels = tuple(int(v) for v in self.stage_channels)
        self.stage_depths = tuple(int(v) for v in self.stage_depths)
        self.decoder_widths = tuple(int(v) for v in self.decoder_widths)

    def validate(self):
        H, W = self.input_size
        if H % 32 or W % 32 or H <= 0 or W <= 0:
            raise ConfigError(
                f"input_size: spatial dims must be positive multiples of "
                f"32, got {H}x{W}")
        if len(self.stage_channels) != 4:
            raise ConfigError(
                f"stage_channels: expected 4 stages, got "
                f"{len(self.stage_channels)}")
        if len(self.stage_depths) != 4:
            raise ConfigError(
                f"stage_depths: expected 4 stages, got "
                f"{len(self.stage_depths)}")
        for a, b in zip(self.stage_channels, self.stage_channels[1:]):
            if b != 2 * a:
                raise ConfigError(
                    f"stage_channels: widths must double, got {a} -> {b}")
        if any(c <= 0 for c in self.stage_channels):
            raise ConfigError("stage_channels: widths must be positive")
        if any(d < 1 for d in self.stage_depths):
            raise ConfigError("stage_depths: every stage needs >= 1 block")
        if self.stem_width != self.stage_channels[0]:
            raise ConfigError(
                f"stem_width: must match first stage width "
                f"{self.stage_channels[0]}, got {self.stem_width}")
        if self.use_glace and self.stem_width % 2:
            raise ConfigError(
                f"stem_width: staged stem needs an even width, got "
                f"{self.stem_width}")
        side = int(round(np.sqrt(self.n_agents)))
        if side * side != self.n_agents or self.n_agents < 1:
            raise ConfigError(
                f"n_agents: must be a positive perfect square, got "
                f"{self.n_agents}")
        if side > min(H, W) // PYRAMID_STRIDES[-1]:
            raise ConfigError(
                f"n_agents: agent grid {side}x{side} exceeds the coarsest "
                f"feature map {H // 32}x{W // 32}")
        for c in self.stage_channels:
            heads = max(1, c // self.heads_divisor)
            if c % heads:
                raise ConfigError(
                    f"heads_divisor: width {c} not divisible by the "
                    f"implied head count {heads}")
        if self.fusion_target_stride not in PYRAMID_STRIDES:
            raise ConfigError(
                f"fusion_target_stride: must be one of {PYRAMID_STRIDES}, "
                f"got {self.fusion_target_stride}")
        if len(self.decoder_widths) != 2:
            raise ConfigError(
                f"decoder_widths: expected 2 entries, got "
                f"{len(self.decoder_widths)}")
        for field_name in ("n_joints", "fusion_width", "n_tokens",
                           "token_dim", "gefb_expansion", "in_channels"):
            if getattr(self, field_name) < 1:
                raise ConfigError(f"{field_name}: must be >= 1")
        if self.heatmap_sigma <= 0:
            raise ConfigError("heatmap_sigma: must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate: must be nonnegative")
        return self

    def heatmap_size(self):
        """Decoder output grid: two 2x deconvolutions from the fusion
        target grid, so stride target/4 relative to the input."""
        H, W = self.input_size
        s = self.fusion_target_stride // 4
        return (H // s, W // s)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(
                f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(d)


def default_config(**overrides):
    return dataclasses.replace(ModelConfig(), **overrides)


def tiny_config(**overrides):
    """Small configuration that runs the full pipeline in seconds."""
    cfg = ModelConfig(
        input_size=(64, 64),
        stem_width=32,
        stage_channels=(32, 64, 128, 256),
        stage_depths=(1, 1, 1, 1),
        n_agents=4,
        n_joints=8,
        fusion_width=128,
        decoder_widths=(64, 32),
        n_tokens=4,
        token_dim=64,
        heatmap_sigma=1.5,
        learning_rate=8e-3,
    )
    return dataclasses.replace(cfg, **overrides)


@dataclass
class ForwardResult:
    """Everything one forward pass produces.

    pyramid: per-stage feature maps at strides 4/8/16/32.
    fused: channel concat of the aligned pyramid (width = sum of stages).
    refined: fused map after the pointwise projection + BN + GELU.
    pooled: globally averaged refined features, (B, fusion_width).
    heatmaps: decoder output, (B, J, H/4, W/4) under the default target.
    """

    pyramid: list
    fused: T.Tensor
    refined: T.Tensor
    pooled: T.Tensor
    heatmaps: T.Tensor


class Model(Module):
    """The assembled pose network. Construction is deterministic given the
    config: one seeded generator feeds every layer in a fixed order."""

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        if config.use_glace:
            self.stem = GlaceStem(config.stem_width, rng,
                                  in_channels=config.in_channels)
        else:
            self.stem = PatchStem(config.stem_width, rng,
                                  in_channels=config.in_channels)
        self.backbone = Backbone(
            config.stage_channels, config.stage_depths, config.n_agents,
            rng,
            use_attention=config.use_agent_attention,
            use_gefb=config.use_gefb,
            use_se=config.use_se,
            use_cbam=config.use_cbam,
            gefb_expansion=config.gefb_expansion,
            heads_divisor=config.heads_divisor)
        self.fusion = FusionHead(
            config.stage_channels, PYRAMID_STRIDES,
            config.fusion_target_stride, config.fusion_width, rng,
            use_dysample=config.use_dysample)
        self.decoder = Decoder(config.fusion_width, config.decoder_widths,
                               config.n_joints, rng)
        hm_h, hm_w = config.heatmap_size()
        self.token_bank = TokenBank(
            config.n_tokens, config.token_dim, config.fusion_width,
            (config.n_joints, hm_h, hm_w), rng)

    def forward(self, x):
        if not isinstance(x, T.Tensor):
            x = T.Tensor(x)
        feats = self.backbone(self.stem(x))
        fused, refined = self.fusion(feats)
        B, C = refined.shape[0], refined.shape[1]
        pooled = T.reshape(T.adaptive_avg_pool2d(refined, (1, 1)), (B, C))
        heatmaps = self.decoder(refined)
        return ForwardResult(pyramid=feats, fused=fused, refined=refined,
                             pooled=pooled, heatmaps=heatmaps)


def build(config):
    """Construct a Model after validating the config."""
    return Model(config)


def count_params(model):
    return model.count_params()
