"""Desk-scale logit-distillation laboratory.

A numpy library for studying logit distillation: the exact split of the
classical KD loss into a target-class term and a coupling-weighted
non-target term, the decoupled alpha/beta objective, analytic gradients,
a minimal MLP trainer, and an experiment harness for ablations.
"""

from .core import (
    BinaryProbs,
    binary_probs,
    kl_divergence,
    log_sum_exp,
    nontarget_probs,
    softmax,
)
from .losses import (
    DistillConfig,
    LossOutput,
    cross_entropy,
    distill_loss,
    dkd_loss,
    kd_decomposition,
    kd_loss,
    loss_gradient_check,
    nckd_loss,
    tckd_loss,
)

__all__ = [
    "BinaryProbs",
    "DistillConfig",
    "LossOutput",
    "binary_probs",
    "cross_entropy",
    "distill_loss",
    "dkd_loss",
    "kd_decomposition",
    "kd_loss",
    "kl_divergence",
    "log_sum_exp",
    "loss_gradient_check",
    "nckd_loss",
    "nontarget_probs",
    "softmax",
    "tckd_loss",
]

__version__ = "0.1.0"
