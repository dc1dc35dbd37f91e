"""Pose-estimation research stack: tensor engine with reverse-mode
autodiff, attention/gated backbone, multi-scale fusion, heatmap decoder,
distillation losses and a synthetic-data training CLI."""

from .checkpoint import load, save
from .data import (COCO17, STICK8, DatasetSpec, PoseSample, SkeletonTemplate,
                   dataset_for_config, generate_dataset, template_for)
from .errors import (ConfigError, FormatError, GatePoseError, ShapeError,
                     StateError, TrainingDiverged)
from .fusion import argmax_keypoints
from .losses import (LossReport, TokenBank, mse_heatmap, output_distillation,
                     pck, render_gaussian_targets, token_distillation,
                     total_loss)
from .model import (ForwardResult, Model, ModelConfig, build, count_params,
                    default_config, tiny_config)
from .optim import Adam
from .tensor import Tensor, backward, count_macs, no_grad, set_debug_checks
from .train import (Batch, calibrate_batchnorm, evaluate, make_batch,
                    train_loop, train_step)

__version__ = "0.1.0"
