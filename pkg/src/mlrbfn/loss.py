"""Class-wise binary cross-entropy on log-probability outputs.

The C-class problem is scored as C independent binary problems: the
true-class entry contributes -log p and every other entry contributes
-log(1 - p), all computed in log space so confidences near 0 and 1
stay well-conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, LabelError

# Shift applied to every log-probability before scoring; keeps 1 - p
# strictly positive so log_sub_exp stays in-domain at p == 1.
LOG_PROB_SHIFT = 1e-6


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def log_bce(log_probs: Tensor, labels: np.ndarray, num_classes: int) -> Tensor:
    """Mean binary cross-entropy over all m*C class-wise entries.

    ``log_probs`` is an (m, C) tensor of log-probabilities (entries
    <= 0); ``labels`` is an integer vector in [0, C).  Differentiable
    w.r.t. ``log_probs``.
    """
    if np.any(log_probs.data > 0):
        raise DomainError("log_bce expects log-probabilities <= 0")
    if log_probs.cols != num_classes:
        raise DomainError(
            f"log_probs has {log_probs.cols} columns, expected {num_classes}"
        )
    dtype = log_probs.data.dtype
    targets = one_hot(labels, num_classes).astype(dtype)
    shifted = log_probs - LOG_PROB_SHIFT
    log_one_minus = ad.log_sub_exp(Tensor(np.zeros((1, 1), dtype=dtype)), shifted)
    hits = Tensor(targets) * shifted
    misses = Tensor(1.0 - targets) * log_one_minus
    return -ad.mean_all(hits + misses)


@dataclass
class LossValue:
    """Scalar loss plus its per-class breakdown for diagnostics."""

    total: float
    per_class: np.ndarray  # mean contribution of each class column

    def __post_init__(self):
        assert self.total >= 0 or np.isnan(self.total)


def loss_breakdown(
    log_probs: np.ndarray, labels: np.ndarray, num_classes: int
) -> LossValue:
    """Non-differentiable evaluation of log_bce with per-class terms."""
    targets = one_hot(labels, num_classes)
    shifted = np.asarray(log_probs, dtype=np.float64) - LOG_PROB_SHIFT
    log_one_minus = np.log(-np.expm1(shifted))
    terms = -(targets * shifted + (1.0 - targets) * log_one_minus)
    return LossValue(total=float(terms.mean()), per_class=terms.mean(axis=0))
