"""Training and evaluation loops over synthetic pose batches.

Batches are deterministic slices of the sample list, so a fixed seed and
fixed dataset reproduce the exact loss trajectory. The teacher, when
configured, is a frozen checkpoint of the same architecture evaluated
under no_grad each step.
"""

import sys
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import TrainingDiverged
from .fusion import argmax_keypoints
from .losses import mse_heatmap, pck, total_loss
from .optim import Adam


@dataclass
class Batch:
    images: np.ndarray       # (B, 3, H, W)
    keypoints: np.ndarray    # (B, J, 2) in image pixels
    visibility: np.ndarray   # (B, J) bool
    heatmaps: np.ndarray     # (B, J, h, w) rendered targets


def make_batch(samples):
    return Batch(
        images=np.stack([s.image for s in samples]),
        keypoints=np.stack([s.keypoints for s in samples]),
        visibility=np.stack([s.visibility for s in samples]),
        heatmaps=np.stack([s.heatmaps for s in samples]),
    )


def _teacher_heatmaps(teacher, images):
    teacher.eval()
    with T.no_grad():
        return teacher(T.Tensor(images)).heatmaps.data


def train_step(model, batch, optimizer, teacher=None):
    """One forward/backward/update. Raises TrainingDiverged on a
    non-finite loss; gradients are cleared before returning."""
    cfg = model.config
    model.train()
    model.zero_grad()
    result = model(T.Tensor(batch.images))
    teacher_hm = None
    if teacher is not None:
        teacher_hm = _teacher_heatmaps(teacher, batch.images)
    loss, report = total_loss(
        result.heatmaps, batch.heatmaps, batch.visibility,
        teacher_heatmaps=teacher_hm,
        token_bank=model.token_bank,
        pooled=result.pooled,
        gt_weight=cfg.gt_weight,
        lambda_od=cfg.lambda_od,
        lambda_td=cfg.lambda_td)
    if not np.isfinite(report.total):
        raise TrainingDiverged(f"loss is {report.total}")
    T.backward(loss)
    optimizer.step()
    model.zero_grad()
    return report


def _batch_indices(step, n, batch_size):
    if n <= batch_size:
        return list(range(n))
    return [(step * batch_size + j) % n for j in range(batch_size)]


def load_teacher(path):
    from .checkpoint import load
    teacher, _, _ = load(path)
    teacher.eval()
    return teacher


def calibrate_batchnorm(model, samples, passes=30, batch_size=8):
    """Refresh batch-norm running statistics under the current weights.

    During optimization the running averages trail the moving parameters,
    so eval-mode outputs lag what the network actually learned. A few
    train-mode forward passes (no updates) close the gap; with momentum
    0.1, thirty passes leave under 5% of the stale estimate.
    """
    model.train()
    n = len(samples)
    with T.no_grad():
        for p in range(passes):
            idx = _batch_indices(p, n, batch_size)
            batch = make_batch([samples[i] for i in idx])
            model(T.Tensor(batch.images))


def train_loop(model, samples, steps, optimizer=None, teacher=None,
               batch_size=8, log_every=0, log=None, calibrate=True):
    """Run train_step for the given number of steps; returns the list of
    per-step LossReports.

    With calibrate=True (the default) the batch-norm running statistics
    are refreshed after the last step. A zero-step run skips calibration
    so it leaves the model bitwise untouched.
    """
    if optimizer is None:
        optimizer = Adam(model.named_parameters(),
                         lr=model.config.learning_rate)
    if teacher is None and model.config.teacher_checkpoint:
        teacher = load_teacher(model.config.teacher_checkpoint)
    if log is None:
        log = sys.stderr
    history = []
    n = len(samples)
    for step in range(steps):
        idx = _batch_indices(step, n, batch_size)
        batch = make_batch([samples[i] for i in idx])
        report = train_step(model, batch, optimizer, teacher=teacher)
        history.append(report)
        if log_every and (step + 1) % log_every == 0:
            terms = " ".join(f"{k}={v:.6f}" for k, v in
                             report.terms.items())
            print(f"step {step + 1}/{steps} total={report.total:.6f} "
                  f"{terms}", file=log)
    if calibrate and steps > 0:
        calibrate_batchnorm(model, samples, batch_size=batch_size)
    return history


def evaluate(model, samples, alpha=0.1, batch_size=16):
    """Eval-mode metrics over a sample list.

    Returns {"pck": ..., "mse": ..., "n_samples": ...}; pck is NaN when no
    joint is visible anywhere. mse is the visibility-masked heatmap error
    aggregated over all samples.
    """
    model.eval()
    hm_h, hm_w = model.config.heatmap_size()
    scale = model.config.input_size[0] // hm_h
    correct = 0.0
    n_vis = 0
    sq_sum = 0.0
    px_count = 0
    for start in range(0, len(samples), batch_size):
        batch = make_batch(samples[start:start + batch_size])
        with T.no_grad():
            result = model(T.Tensor(batch.images))
        pred = argmax_keypoints(result.heatmaps)
        gt_hm = batch.keypoints / scale
        score, nv = pck(pred[..., :2], gt_hm, batch.visibility, alpha,
                        hm_h, hm_w)
        if nv:
            correct += score * nv
            n_vis += nv
        mse_val = mse_heatmap(result.heatmaps, batch.heatmaps,
                              batch.visibility).item()
        nvb = int(batch.visibility.sum())
        sq_sum += mse_val * nvb * hm_h * hm_w
        px_count += nvb * hm_h * hm_w
    return {
        "pck": correct / n_vis if n_vis else float("nan"),
        "mse": sq_sum / px_count if px_count else 0.0,
        "n_samples": len(samples),
    }
