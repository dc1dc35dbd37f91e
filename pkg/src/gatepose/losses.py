"""Training objectives: visibility-masked heatmap regression, teacher
output distillation, and the selective token-bank distillation term.

All loss functions return scalar Tensors wired into the autodiff tape;
targets and teacher outputs enter as plain arrays so no gradient ever flows
into them.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import Linear, Module


def _as_array(x):
    return x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)


def mse_heatmap(pred, target, visibility):
    """Mean squared error over the pixels of visible joint channels.

    visibility is (B, J); invisible channels contribute nothing to either
    the numerator or the pixel count. With no visible joints the loss is a
    constant zero.
    """
    td = _as_array(target)
    vis = np.asarray(visibility, dtype=np.float64)
    if pred.shape != td.shape:
        raise ShapeError(
            f"heatmap shapes differ: {pred.shape} vs {td.shape}")
    if vis.shape != pred.shape[:2]:
        raise ShapeError(
            f"visibility must be (B, J) = {pred.shape[:2]}, got {vis.shape}")
    n_vis = vis.sum()
    if n_vis == 0:
        return T.Tensor(0.0)
    B, J, H, W = pred.shape
    diff = T.sub(pred, T.Tensor(td))
    masked = T.mul(T.mul(diff, diff), T.Tensor(vis.reshape(B, J, 1, 1)))
    return T.tsum(masked) / (n_vis * H * W)


def output_distillation(student, teacher):
    """Plain MSE against frozen teacher heatmaps, every channel counted."""
    td = _as_array(teacher)
    if student.shape != td.shape:
        raise ShapeError(
            f"student/teacher shapes differ: {student.shape} vs {td.shape}")
    diff = T.sub(student, T.Tensor(td))
    return T.tmean(T.mul(diff, diff))


class TokenBank(Module):
    """Learned pose tokens plus the shared head that turns (token, pooled
    feature) pairs into heatmap predictions."""

    def __init__(self, n_tokens, token_dim, feat_dim, heatmap_shape, rng):
        super().__init__()
        self.n_tokens = n_tokens
        self.token_dim = token_dim
        self.heatmap_shape = tuple(heatmap_shape)
        out_dim = int(np.prod(heatmap_shape))
        bound = float(np.sqrt(1.0 / token_dim))
        self.tokens = T.Tensor(
            rng.uniform(-bound, bound, size=(n_tokens, token_dim)),
            requires_grad=True)
        self.head = Linear(token_dim + feat_dim, out_dim, rng)

    def predict_all(self, pooled):
        """(B, feat_dim) pooled features -> (B, M, J*H*W) predictions,
        one per token."""
        B = pooled.shape[0]
        M, D = self.n_tokens, self.token_dim
        F = pooled.shape[1]
        toks = T.expand(T.reshape(self.tokens, (1, M, D)), (B, M, D))
        feats = T.expand(T.reshape(pooled, (B, 1, F)), (B, M, F))
        return self.head(T.concat([toks, feats], axis=2))


def token_distillation(bank, pooled, target_heatmaps):
    """Best-token selection loss.

    Every token produces a heatmap prediction from the pooled features; the
    token with the lowest MSE against the ground-truth heatmaps is selected
    per sample and only its prediction receives gradient. Returns the
    selected indices and the scalar loss.
    """
    tgt = _as_array(target_heatmaps)
    B = tgt.shape[0]
    flat_tgt = tgt.reshape(B, 1, -1)
    preds = bank.predict_all(pooled)
    if preds.shape[2] != flat_tgt.shape[2]:
        raise ShapeError(
            f"token head predicts {preds.shape[2]} values, targets have "
            f"{flat_tgt.shape[2]}")
    errs = np.mean((preds.data - flat_tgt) ** 2, axis=2)
    t_star = np.argmin(errs, axis=1)
    onehot = np.zeros((B, bank.n_tokens, 1))
    onehot[np.arange(B), t_star, 0] = 1.0
    selected = T.tsum(T.mul(preds, T.Tensor(onehot)), axis=1)
    diff = T.sub(selected, T.Tensor(flat_tgt.reshape(B, -1)))
    loss = T.tmean(T.mul(diff, diff))
    return t_star, loss


def render_gaussian_targets(keypoints, visibility, H, W, sigma=2.0):
    """Unnormalized Gaussian peaks on the heatmap grid.

    keypoints is (B, J, 2) as (x, y) in heatmap pixels. Each visible joint
    gets exp(-r^2 / (2 sigma^2)) inside a +-3 sigma window; joints whose
    center falls outside the frame are marked invisible and left blank.
    Returns (targets (B, J, H, W), adjusted visibility (B, J)).
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    vis = np.asarray(visibility).astype(bool).copy()
    if kp.ndim != 3 or kp.shape[2] != 2:
        raise ShapeError(f"keypoints must be (B, J, 2), got {kp.shape}")
    B, J = kp.shape[:2]
    out = np.zeros((B, J, H, W))
    r = int(np.ceil(3 * sigma))
    for b in range(B):
        for j in range(J):
            if not vis[b, j]:
                continue
            cx, cy = kp[b, j]
            if not (0 <= cx < W and 0 <= cy < H):
                vis[b, j] = False
                continue
            x0 = max(0, int(np.floor(cx)) - r)
            x1 = min(W, int(np.floor(cx)) + r + 1)
            y0 = max(0, int(np.floor(cy)) - r)
            y1 = min(H, int(np.floor(cy)) + r + 1)
            xs = np.arange(x0, x1)
            ys = np.arange(y0, y1)
            gx = np.exp(-((xs - cx) ** 2) / (2 * sigma ** 2))
            gy = np.exp(-((ys - cy) ** 2) / (2 * sigma ** 2))
            out[b, j, y0:y1, x0:x1] = gy[:, None] * gx[None, :]
    return out, vis


def pck(pred_xy, gt_xy, visibility, alpha, H, W):
    """Share of visible joints within alpha * heatmap diagonal of the truth.

    Returns (score, n_visible); score is NaN when nothing is visible.
    """
    pred = np.asarray(pred_xy, dtype=np.float64)[..., :2]
    gt = np.asarray(gt_xy, dtype=np.float64)[..., :2]
    vis = np.asarray(visibility).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred/gt shapes differ: {pred.shape} vs {gt.shape}")
    thr = alpha * np.sqrt(H * H + W * W)
    n_vis = int(vis.sum())
    if n_vis == 0:
        return float("nan"), 0
    dist = np.linalg.norm(pred - gt, axis=-1)
    correct = (dist <= thr) & vis
    return float(correct.sum() / n_vis), n_vis


@dataclass
class LossReport:
    """Scalar breakdown of one optimization step."""

    total: float
    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)


def total_loss(pred_heatmaps, target_heatmaps, visibility, *,
               teacher_heatmaps=None, token_bank=None, pooled=None,
               gt_weight=1.0, lambda_od=0.5, lambda_td=0.1):
    """Weighted sum of the ground-truth term and whichever distillation
    terms are configured. Absent teachers/banks simply drop their term."""
    terms = {}
    weights = {}
    gt = mse_heatmap(pred_heatmaps, target_heatmaps, visibility)
    terms["gt_mse"] = gt.item()
    weights["gt_mse"] = gt_weight
    loss = T.mul(gt, gt_weight)
    if teacher_heatmaps is not None:
        od = output_distillation(pred_heatmaps, teacher_heatmaps)
        terms["output_distill"] = od.item()
        weights["output_distill"] = lambda_od
        loss = T.add(loss, T.mul(od, lambda_od))
    if token_bank is not None:
        if pooled is None:
            raise ValueError("token distillation needs pooled features")
        _, td = token_distillation(token_bank, pooled, target_heatmaps)
        terms["token_distill"] = td.item()
        weights["token_distill"] = lambda_td
        loss = T.add(loss, T.mul(td, lambda_td))
    return loss, LossReport(total=loss.item(), terms=terms, weights=weights)
