"""Shared fixtures. The micro config keeps unit tests fast: a model small
enough that a full forward runs in milliseconds but still exercises every
stage of the pipeline."""

import numpy as np
import pytest

from gatepose.data import PoseSample
from gatepose.losses import render_gaussian_targets
from gatepose.model import ModelConfig
from gatepose.train import make_batch


def micro_config(**overrides):
    base = dict(
        input_size=(32, 32),
        stem_width=4,
        stage_channels=(4, 8, 16, 32),
        stage_depths=(1, 1, 1, 1),
        n_agents=1,
        n_joints=2,
        fusion_width=16,
        decoder_widths=(8, 8),
        n_tokens=2,
        token_dim=8,
        heatmap_sigma=1.0,
        learning_rate=1e-2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_samples(cfg, n=2, seed=0):
    """Synthetic samples sized for cfg, bypassing the skeleton templates
    (useful when cfg.n_joints has no registered skeleton)."""
    gen = np.random.default_rng(seed)
    H, W = cfg.input_size
    hm_h, hm_w = cfg.heatmap_size()
    scale = H // hm_h
    out = []
    for _ in range(n):
        kp_hm = np.stack([
            gen.uniform(1, hm_w - 1, size=(cfg.n_joints,)),
            gen.uniform(1, hm_h - 1, size=(cfg.n_joints,))], axis=-1)
        vis = np.ones((1, cfg.n_joints), dtype=bool)
        heatmaps, vis = render_gaussian_targets(
            kp_hm[None], vis, hm_h, hm_w, sigma=cfg.heatmap_sigma)
        out.append(PoseSample(image=gen.uniform(0, 1, size=(3, H, W)),
                              keypoints=kp_hm * scale,
                              visibility=vis[0],
                              heatmaps=heatmaps[0]))
    return out


def random_batch(cfg, B=2, seed=0):
    return make_batch(random_samples(cfg, n=B, seed=seed))


@pytest.fixture
def micro():
    return micro_config()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
