"""Heads that merge the CNN prediction with the transformer prediction.

AKF: softmax(α · (λ·l1(y_cnn) + (1-λ)·l1(y_trans))), λ scheduled 0.7 -> 0.3.
CKF: Linear_c(Dropout(concat(Linear_k(y_cnn), Linear_k(y_trans)))).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ConfigError, Dropout, Linear, Module
from .tensor import ContractError, ShapeError, Tensor

L1_EPS = 1e-8


@dataclass(frozen=True)
class AKFConfig:
    lambda_start: float = 0.7
    lambda_end: float = 0.3
    alpha: float = 10.0
    total_epochs: int = 1


@dataclass(frozen=True)
class CKFConfig:
    k: int = 64
    dropout_rate: float = 0.5


def lambda_schedule(epoch: int, cfg: AKFConfig) -> float:
    """Linear decay from ``lambda_start`` at epoch 0 to ``lambda_end`` at the last epoch."""
    if cfg.total_epochs < 1:
        raise ContractError(f"total_epochs must be positive, got {cfg.total_epochs}")
    if not 0 <= epoch < cfg.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if cfg.total_epochs == 1:
        return cfg.lambda_start
    last = cfg.total_epochs - 1
    if epoch == 0:
        return cfg.lambda_start
    if epoch == last:
        return cfg.lambda_end
    return (cfg.lambda_start * (last - epoch) + cfg.lambda_end * epoch) / last


def l1_normalize(v: Tensor, eps: float = L1_EPS) -> Tensor:
    """v / (Σ|v| + eps) along the last axis."""
    return v / (T.tsum(T.tabs(v), axis=-1, keepdims=True) + eps)


def akf_scores(y_cnn: Tensor, y_trans: Tensor, lam: float, alpha: float) -> Tensor:
    """The α-scaled fused vector fed to softmax."""
    if y_cnn.shape != y_trans.shape:
        raise ShapeError(f"AKF inputs differ in shape: {y_cnn.shape} vs {y_trans.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must be in [0, 1], got {lam}")
    if alpha <= 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    fused = l1_normalize(y_cnn) * lam + l1_normalize(y_trans) * (1.0 - lam)
    return fused * alpha


def akf_forward(y_cnn: Tensor, y_trans: Tensor, lam: float, alpha: float) -> Tensor:
    return T.softmax(akf_scores(y_cnn, y_trans, lam, alpha), axis=-1)


class AKF(Module):
    """Parameter-free fusion; ``lam`` is set by the trainer each epoch."""

    kind = "akf"

    def __init__(self, cfg: AKFConfig = AKFConfig()):
        self.cfg = cfg
        self.alpha = cfg.alpha
        self.lam = cfg.lambda_end

    def forward(self, y_cnn: Tensor, y_trans: Tensor) -> Tensor:
        return akf_scores(y_cnn, y_trans, self.lam, self.alpha)


class CKF(Module):
    kind = "ckf"

    def __init__(self, n: int, m: int, num_classes: int, cfg: CKFConfig, rng: np.random.Generator):
        if cfg.k < 1:
            raise ConfigError(f"CKF alignment width must be positive, got {cfg.k}")
        self.cfg = cfg
        self.n, self.m = n, m
        self.align_cnn = Linear(n, cfg.k, rng)
        self.align_trans = Linear(m, cfg.k, rng)
        self.dropout = Dropout(cfg.dropout_rate, np.random.default_rng(rng.integers(2**63)))
        self.classify = Linear(2 * cfg.k, num_classes, rng)

    def forward(self, y_cnn: Tensor, y_trans: Tensor) -> Tensor:
        if y_cnn.shape[-1] != self.n or y_trans.shape[-1] != self.m:
            raise ShapeError(f"CKF expects widths ({self.n}, {self.m}), got {y_cnn.shape}, {y_trans.shape}")
        z = T.concat([self.align_cnn(y_cnn), self.align_trans(y_trans)], axis=-1)
        return self.classify(self.dropout(z))


def ckf_forward(y_cnn: Tensor, y_trans: Tensor, head: CKF, training: bool) -> Tensor:
    """Pre-softmax CKF logits; dropout is active only when ``training``."""
    prev = head.training
    head.train(training)
    try:
        return head(y_cnn, y_trans)
    finally:
        head.train(prev)
