"""Synthetic pose data: a canonical stick figure under random similarity
transforms, rendered with anti-aliased limbs over a noise background.

Every sample draws from its own generator seeded by (dataset seed, sample
index), so generation is order-independent and bitwise reproducible.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .losses import render_gaussian_targets


@dataclass(frozen=True)
class SkeletonTemplate:
    """Canonical pose in unit coordinates (x right, y down) plus the limb
    segments connecting the joints."""

    name: str
    joints: tuple
    limbs: tuple

    @property
    def n_joints(self):
        return len(self.joints)


# COCO keypoint order: nose, eyes, ears, shoulders, elbows, wrists, hips,
# knees, ankles (left before right within each pair).
COCO17 = SkeletonTemplate(
    name="coco17",
    joints=(
        (0.50, 0.12), (0.53, 0.09), (0.47, 0.09), (0.57, 0.11),
        (0.43, 0.11), (0.60, 0.25), (0.40, 0.25), (0.66, 0.40),
        (0.34, 0.40), (0.70, 0.55), (0.30, 0.55), (0.57, 0.52),
        (0.43, 0.52), (0.58, 0.72), (0.42, 0.72), (0.59, 0.92),
        (0.41, 0.92),
    ),
    limbs=(
        (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11),
        (6, 12), (5, 6), (5, 7), (6, 8), (7, 9), (8, 10), (1, 2),
        (0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6),
    ),
)

# Reduced figure for the tiny configuration: head, neck, hands, pelvis,
# feet, chest.
STICK8 = SkeletonTemplate(
    name="stick8",
    joints=(
        (0.50, 0.10), (0.50, 0.28), (0.72, 0.52), (0.28, 0.52),
        (0.50, 0.55), (0.62, 0.92), (0.38, 0.92), (0.50, 0.40),
    ),
    limbs=(
        (0, 1), (1, 7), (7, 4), (1, 2), (1, 3), (4, 5), (4, 6),
    ),
)

_BUILTIN = {t.n_joints: t for t in (COCO17, STICK8)}


def template_for(n_joints):
    """Built-in skeleton with the requested joint count."""
    try:
        return _BUILTIN[n_joints]
    except KeyError:
        raise ConfigError(
            f"no built-in skeleton with {n_joints} joints; available: "
            f"{sorted(_BUILTIN)}") from None


@dataclass
class DatasetSpec:
    n_samples: int = 8
    seed: int = 0
    template: SkeletonTemplate = COCO17
    jitter_sigma: float = 0.015
    occlusion_prob: float = 0.05
    noise_level: float = 0.25


@dataclass
class PoseSample:
    image: np.ndarray       # (3, H, W) in [0, 1]
    keypoints: np.ndarray   # (J, 2) as (x, y) in image pixels
    visibility: np.ndarray  # (J,) bool
    heatmaps: np.ndarray    # (J, H/d, W/d) Gaussian targets


def _segment_distance(px, py, a, b):
    """Distance from every grid point to segment a-b."""
    ab = b - a
    denom = float(ab @ ab)
    apx = px - a[0]
    apy = py - a[1]
    if denom == 0.0:
        return np.hypot(apx, apy)
    t = np.clip((apx * ab[0] + apy * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(apx - t * ab[0], apy - t * ab[1])


def _render_figure(keypoints, limbs, H, W, limb_width, joint_radius):
    """Soft coverage mask of the stick figure, values in [0, 1] with a
    one-pixel anti-aliasing ramp at every edge."""
    ys, xs = np.mgrid[0:H, 0:W]
    px = xs + 0.5
    py = ys + 0.5
    mask = np.zeros((H, W))
    for i, j in limbs:
        d = _segment_distance(px, py, keypoints[i], keypoints[j])
        np.maximum(mask, np.clip(limb_width + 1.0 - d, 0.0, 1.0), out=mask)
    for k in range(len(keypoints)):
        d = np.hypot(px - keypoints[k, 0], py - keypoints[k, 1])
        np.maximum(mask, np.clip(joint_radius + 1.0 - d, 0.0, 1.0),
                   out=mask)
    return mask


def _generate_sample(spec, index, H, W, heatmap_sigma, downscale):
    rng = np.random.default_rng([spec.seed, index])
    tpl = spec.template
    base = np.asarray(tpl.joints, dtype=np.float64)
    jittered = base + rng.normal(0.0, spec.jitter_sigma, size=base.shape)

    extent = 0.72 * min(H, W)
    scale = rng.uniform(0.7, 1.3) * extent
    theta = rng.uniform(-np.pi / 6, np.pi / 6)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    center = np.array([W / 2, H / 2])
    center = center + rng.uniform(-0.12, 0.12, size=2) * np.array([W, H])
    kp = (jittered - 0.5) * scale @ rot.T + center

    visible = rng.random(tpl.n_joints) >= spec.occlusion_prob
    inside = ((kp[:, 0] >= 0) & (kp[:, 0] < W)
              & (kp[:, 1] >= 0) & (kp[:, 1] < H))
    visible &= inside

    limb_width = max(1.0, 0.02 * min(H, W))
    figure = _render_figure(kp, tpl.limbs, H, W, limb_width,
                            limb_width + 1.0)
    bg = rng.uniform(0.0, spec.noise_level, size=(3, H, W))
    color = rng.uniform(0.55, 1.0, size=3)
    image = np.clip(bg * (1.0 - figure) + color[:, None, None] * figure,
                    0.0, 1.0)

    hm, vis = render_gaussian_targets(
        kp[None] / downscale, visible[None], H // downscale,
        W // downscale, sigma=heatmap_sigma)
    return PoseSample(image=image, keypoints=kp, visibility=vis[0],
                      heatmaps=hm[0])


def generate_dataset(spec, image_size, heatmap_sigma=2.0, downscale=4,
                     n_joints=None):
    """Deterministic list of PoseSamples.

    image_size is (H, W); target heatmaps are rendered at 1/downscale
    resolution. When n_joints is given it must match the template.
    """
    if n_joints is not None and n_joints != spec.template.n_joints:
        raise ConfigError(
            f"skeleton {spec.template.name} has "
            f"{spec.template.n_joints} joints, config wants {n_joints}")
    H, W = image_size
    if H % downscale or W % downscale:
        raise ConfigError(
            f"image size {H}x{W} not divisible by heatmap downscale "
            f"{downscale}")
    return [_generate_sample(spec, i, H, W, heatmap_sigma, downscale)
            for i in range(spec.n_samples)]


def dataset_for_config(config, n_samples=8, seed=None,
                       occlusion_prob=None):
    """Dataset matched to a model config: joint count, input size, heatmap
    grid and Gaussian width all taken from the config."""
    spec = DatasetSpec(
        n_samples=n_samples,
        seed=config.seed if seed is None else seed,
        template=template_for(config.n_joints),
    )
    if occlusion_prob is not None:
        spec.occlusion_prob = occlusion_prob
    H, W = config.input_size
    downscale = H // config.heatmap_size()[0]
    return generate_dataset(spec, (H, W),
                            heatmap_sigma=config.heatmap_sigma,
                            downscale=downscale,
                            n_joints=config.n_joints)
