"""AdamW + warmup/cosine training loop with per-epoch AKF weight scheduling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .fusion import AKF, AKFConfig, lambda_schedule
from .nn import ConfigError
from .tensor import cross_entropy

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,train_loss,train_acc,test_acc,lr,lambda"
NO_DECAY_SUFFIXES = ("cls_token", "pos_embed")


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    base_lr: float = 5e-4
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    deterministic: bool = False
    augment: bool = True

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.min_lr < self.base_lr:
            raise ConfigError(f"min_lr {self.min_lr} must be below base_lr {self.base_lr}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} must be in [0, epochs={self.epochs})")


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float, min_lr: float) -> float:
    """Linear warmup 0 -> base_lr over ``warmup_steps``, then cosine to ``min_lr`` at ``total_steps``.

    The optimizer's update number ``i`` (0-based) uses ``lr_schedule(i + 1, ...)``,
    so the first update is non-zero and the last one runs at ``min_lr``.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    t = (step - warmup_steps) / span if span > 0 else 1.0
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t))


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
    """One decoupled-weight-decay Adam update (``t`` is the 1-based step).

    Returns new ``(param, m, v)``; the inputs are not modified.
    """
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    param = param - lr * weight_decay * param
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


def decays(name: str, param) -> bool:
    """Weight decay applies to matrices/kernels, not to biases, norms or token embeddings."""
    return param.ndim > 1 and not name.endswith(NO_DECAY_SUFFIXES)


class AdamW:
    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.05):
        self.named = list(named_params)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}
        self.decay = {n: decays(n, p) for n, p in self.named}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        for name, p in self.named:
            if p.grad is None:
                continue
            wd = self.weight_decay if self.decay[name] else 0.0
            new, self.m[name], self.v[name] = adamw_step(p.data, p.grad.astype(p.dtype, copy=False), self.m[name],
                                                         self.v[name], self.t, lr, self.betas, self.eps, wd)
            p.data = new.astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def state_tensors(self) -> dict:
        out = {}
        for name, _ in self.named:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict, t: int) -> None:
        for name, _ in self.named:
            self.m[name] = np.array(tensors[f"optim.m.{name}"])
            self.v[name] = np.array(tensors[f"optim.v.{name}"])
        self.t = int(t)


def _first_nonfinite(named_arrays) -> str | None:
    for name, arr in named_arrays:
        if arr is not None and not np.all(np.isfinite(arr)):
            return name
    return None


def evaluate(model, data, batch_size: int = 64, lam: float | None = None) -> dict:
    """Top-1 accuracy of the fused output and of each branch on its own.

    AKF models are scored at ``lam`` (default: the end of the training
    schedule).  Parameters and normalization statistics are left untouched.
    """
    was_training = model.training
    model.eval()
    fusion = model.fusion
    prev_lam = getattr(fusion, "lam", None)
    if isinstance(fusion, AKF):
        fusion.lam = fusion.cfg.lambda_end if lam is None else lam
    hits = {"fused": 0, "cnn": 0, "mfca": 0}
    n = len(data)
    try:
        with T.no_grad():
            for lo in range(0, n, batch_size):
                b = data.batch(np.arange(lo, min(lo + batch_size, n)))
                fused, cnn, trans = model(b.images)
                for key, out in (("fused", fused), ("cnn", cnn), ("mfca", trans)):
                    hits[key] += int((out.data.argmax(axis=1) == b.labels).sum())
    finally:
        if isinstance(fusion, AKF):
            fusion.lam = prev_lam
        model.train(was_training)
    return {k: v / n for k, v in hits.items()}


@dataclass
class TrainResult:
    history: list
    best_checkpoint: Path | None
    last_checkpoint: Path | None


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def train(model, train_data, test_data, cfg: TrainConfig, out_dir=None, config_text: str = "",
          resume: str | Path | None = None, max_epochs: int | None = None, on_epoch=None,
          on_step=None) -> TrainResult:
    """Run the optimization loop.

    Writes ``metrics.csv`` and ``checkpoints/{best,last}`` under ``out_dir``
    when given.  ``resume`` continues from a saved checkpoint; ``max_epochs``
    stops early after that many epochs of this call (the schedule still spans
    ``cfg.epochs``).  ``on_epoch(row)`` and ``on_step(step, loss)`` are
    optional progress callbacks.
    """
    cfg.validate()
    T.set_deterministic(cfg.deterministic)
    if train_data.num_classes != model.cfg.num_classes:
        raise ConfigError(f"dataset has {train_data.num_classes} classes, model expects {model.cfg.num_classes}")
    n = len(train_data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup_steps = steps_per_epoch * cfg.warmup_epochs
    opt = AdamW(model.named_parameters(), cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    akf_cfg = AKFConfig(model.cfg.akf.lambda_start, model.cfg.akf.lambda_end, model.cfg.akf.alpha, cfg.epochs)
    is_akf = isinstance(model.fusion, AKF)

    out = Path(out_dir) if out_dir is not None else None
    start_epoch = 0
    best_acc = -1.0
    history = []
    if resume is not None:
        state = load_checkpoint(resume, model, opt)
        start_epoch = int(state["epoch"]) + 1
        best_acc = float(state.get("best_acc", -1.0))
        rng.bit_generator.state = state["trainer_rng"]
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        if resume is None or not metrics_path.exists():
            metrics_path.write_text(METRICS_HEADER + "\n", encoding="utf-8", newline="\n")
        else:
            keep = metrics_path.read_text(encoding="utf-8").splitlines()[: start_epoch + 1]
            metrics_path.write_text("\n".join(keep) + "\n", encoding="utf-8", newline="\n")

    best_path = last_path = None
    stop = cfg.epochs if max_epochs is None else min(cfg.epochs, start_epoch + max_epochs)
    for epoch in range(start_epoch, stop):
        lam = lambda_schedule(epoch, akf_cfg) if is_akf else None
        model.set_lambda(lam) if is_akf else None
        model.train()
        order = rng.permutation(n)
        loss_sum, correct, lr = 0.0, 0, 0.0
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            batch = train_data.batch(idx, augment=cfg.augment, rng=rng)
            fused, cnn, trans = model(batch.images)
            loss = cross_entropy(fused, batch.labels)
            if not np.isfinite(loss.data):
                culprit = _first_nonfinite([("cnn_logits", cnn.data), ("trans_output", trans.data),
                                            ("fused", fused.data)] + [(k, p.data) for k, p in model.named_parameters()])
                raise NonFiniteError(f"non-finite loss at epoch {epoch}; first non-finite tensor: {culprit or 'loss'}")
            opt.zero_grad()
            loss.backward()
            lr = lr_schedule(opt.t + 1, total_steps, warmup_steps, cfg.base_lr, cfg.min_lr)
            opt.step(lr)
            if on_step is not None:
                on_step(opt.t, loss.item())
            loss_sum += loss.item() * len(idx)
            correct += int((fused.data.argmax(axis=1) == batch.labels).sum())
        test_acc = evaluate(model, test_data, max(cfg.batch_size, 1))["fused"]
        row = {"epoch": epoch, "train_loss": loss_sum / n, "train_acc": correct / n, "test_acc": test_acc,
               "lr": lr, "lambda": lam}
        history.append(row)
        log.info("epoch %d loss %.4f train_acc %.4f test_acc %.4f", epoch, row["train_loss"], row["train_acc"], test_acc)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(",".join([str(epoch), _fmt(row["train_loss"]), _fmt(row["train_acc"]),
                                   _fmt(test_acc), _fmt(lr), _fmt(lam)]) + "\n")
        if out is not None:
            state = {"epoch": epoch, "best_acc": max(best_acc, test_acc), "trainer_rng": rng.bit_generator.state,
                     "lambda": lam, "deterministic": cfg.deterministic}
            if test_acc > best_acc:
                best_path = save_checkpoint(out / "checkpoints" / "best", model, opt, state, config_text)
            last_path = save_checkpoint(out / "checkpoints" / "last", model, opt, state, config_text)
        best_acc = max(best_acc, test_acc)
        if on_epoch is not None:
            on_epoch(row)
    if is_akf:
        model.set_lambda(akf_cfg.lambda_end)
    return TrainResult(history, best_path, last_path)


# -- overfit smoke recipe ------------------------------------------------------------

# 64 images / batch 32 = 2 steps per epoch -> 200 optimizer steps
SMOKE_CONFIG = TrainConfig(epochs=100, batch_size=32, base_lr=5e-3, min_lr=5e-5, weight_decay=0.05,
                           warmup_epochs=2, seed=0, deterministic=True, augment=False)


@dataclass
class SmokeRun:
    model: object
    data: object
    result: TrainResult
    step_losses: list
    seconds: float


def overfit_smoke(fusion: str = "akf", seed: int = 0, out_dir=None, epochs: int | None = None,
                  max_epochs: int | None = None, resume=None, cfg: TrainConfig = SMOKE_CONFIG) -> SmokeRun:
    """Train the tiny variant on 8 classes x 8 synthetic 32x32 images."""
    import dataclasses
    import time

    from .data import make_synthetic
    from .model import TINY, build_model

    if epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=epochs, warmup_epochs=min(cfg.warmup_epochs, epochs - 1))
    cfg = dataclasses.replace(cfg, seed=seed)
    data = make_synthetic(num_classes=8, per_class=8, size=32, seed=0)
    model = build_model(TINY.replace(fusion=fusion), seed=seed)
    losses = []
    start = time.perf_counter()
    result = train(model, data, data, cfg, out_dir, config_text=f"variant=tiny\nfusion={fusion}\nseed={seed}\n",
                   resume=resume, max_epochs=max_epochs, on_step=lambda _, loss: losses.append(loss))
    return SmokeRun(model, data, result, losses, time.perf_counter() - start)
