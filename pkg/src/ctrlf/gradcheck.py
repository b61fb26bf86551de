"""Central finite-difference checks of autodiff gradients, in float64.

A *fragment* is a closure computing a scalar loss plus the named leaf tensors
whose gradients are checked.  ``suite()`` builds one fragment per model piece.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .convpath import MBConv, MBConvBlockConfig
from .fusion import CKF, CKFConfig, akf_forward
from .mfca import CrossAttentionExchange, TokenSet, TransformerBlock
from .model import TINY, build_model
from .tensor import ContractError, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = REL_FLOOR):
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), floor)


@dataclass
class Fragment:
    name: str
    loss: Callable[[], Tensor]
    params: list  # [(name, Tensor)]
    reset: Callable[[], None] | None = None  # restores hidden randomness before every evaluation


@dataclass
class GradcheckReport:
    name: str
    tolerance: float
    checked: int
    max_rel_error: float
    failures: list = field(default_factory=list)  # (param, index, analytic, numeric, rel_error)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "ok" if self.passed else "FAIL"
        line = f"{self.name:<18} {status:<4} max rel err {self.max_rel_error:.2e} over {self.checked} entries"
        if self.failures:
            names = sorted({f[0] for f in self.failures})
            line += " | offending: " + ", ".join(names)
        return line


def _evaluate(frag: Fragment) -> float:
    if frag.reset is not None:
        frag.reset()
    with T.no_grad():
        return float(frag.loss().data)


def gradcheck(frag: Fragment, n_samples: int = 50, step: float = DEFAULT_STEP,
              tolerance: float = DEFAULT_TOLERANCE, seed: int = 0) -> GradcheckReport:
    """Compare autodiff against central differences on ``n_samples`` random entries."""
    for name, p in frag.params:
        if p.dtype != np.float64:
            raise ContractError(f"gradcheck needs float64 tensors; {name} is {p.dtype}")
    for _, p in frag.params:
        p.grad = None
    if frag.reset is not None:
        frag.reset()
    frag.loss().backward()
    grads = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in frag.params}

    sizes = np.array([p.data.size for _, p in frag.params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    failures = []
    for flat in np.sort(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, p = frag.params[k]
        idx = np.unravel_index(int(flat - offsets[k]), p.data.shape)
        orig = p.data[idx]
        p.data[idx] = orig + step
        up = _evaluate(frag)
        p.data[idx] = orig - step
        down = _evaluate(frag)
        p.data[idx] = orig
        numeric = (up - down) / (2 * step)
        analytic = float(grads[name][idx])
        err = float(relative_error(analytic, numeric))
        worst = max(worst, err)
        if err >= tolerance:
            failures.append((name, tuple(int(i) for i in idx), analytic, numeric, err))
    return GradcheckReport(frag.name, tolerance, len(picks), worst, failures)


# -- fragment factories ----------------------------------------------------------------

def _projection(rng, shape):
    """Fixed random weights turning a tensor output into a scalar loss."""
    return rng.normal(size=shape)


def _module_params(prefix: str, module) -> list:
    return [(f"{prefix}.{n}", p) for n, p in module.named_parameters()]


def mbconv_fragment(seed: int = 0) -> Fragment:
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        block = MBConv(MBConvBlockConfig(8, 8, 1, 4, 0.25), rng)
        x = Tensor(rng.normal(size=(2, 8, 5, 5)), requires_grad=True)
    w = _projection(rng, (2, 8, 5, 5))
    return Fragment("mbconv_se", lambda: T.tsum(block(x) * w), [("input", x)] + _module_params("mbconv", block))


def encoder_fragment(seed: int = 0, dim: int = 16, tokens: int = 4, heads: int = 4) -> Fragment:
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        block = TransformerBlock(dim, heads, 4, rng)
        x = Tensor(rng.normal(size=(2, tokens + 1, dim)), requires_grad=True)
    w = _projection(rng, (2, tokens + 1, dim))
    return Fragment("encoder_block", lambda: T.tsum(block(x) * w), [("input", x)] + _module_params("encoder", block))


def cross_attention_fragment(seed: int = 0, large_dim: int = 16, small_dim: int = 12, heads: int = 2) -> Fragment:
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        block = CrossAttentionExchange(large_dim, small_dim, heads, rng)
        xl = Tensor(rng.normal(size=(2, 5, large_dim)), requires_grad=True)
        xs = Tensor(rng.normal(size=(2, 4, small_dim)), requires_grad=True)
    wl = _projection(rng, (2, 5, large_dim))
    ws = _projection(rng, (2, 4, small_dim))

    def loss():
        large, small = block(TokenSet(xl, "large"), TokenSet(xs, "small"))
        return T.tsum(large.tokens * wl) + T.tsum(small.tokens * ws)

    return Fragment("cross_attention", loss, [("large_tokens", xl), ("small_tokens", xs)]
                    + _module_params("exchange", block))


def _away_from_zero(rng, shape, margin: float = 0.2):
    v = rng.normal(size=shape)
    return np.sign(v) * (margin + np.abs(v))


def akf_fragment(seed: int = 0, classes: int = 10, lam: float = 0.45, alpha: float = 10.0) -> Fragment:
    rng = np.random.default_rng(seed)
    yc = Tensor(_away_from_zero(rng, (3, classes)), requires_grad=True, dtype=np.float64)
    yt = Tensor(_away_from_zero(rng, (3, classes)), requires_grad=True, dtype=np.float64)
    w = _projection(rng, (3, classes))
    return Fragment("akf", lambda: T.tsum(akf_forward(yc, yt, lam, alpha) * w), [("y_cnn", yc), ("y_trans", yt)])


def ckf_fragment(seed: int = 0, classes: int = 6, k: int = 8) -> Fragment:
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        head = CKF(classes, classes, classes, CKFConfig(k, 0.5), rng)
        yc = Tensor(rng.normal(size=(3, classes)), requires_grad=True)
        yt = Tensor(rng.normal(size=(3, classes)), requires_grad=True)
    w = _projection(rng, (3, classes))
    start = head.dropout.rng.bit_generator.state

    def reset():
        head.dropout.rng.bit_generator.state = start

    return Fragment("ckf", lambda: T.tsum(head(yc, yt) * w), [("y_cnn", yc), ("y_trans", yt)]
                    + _module_params("ckf", head), reset)


def model_fragment(seed: int = 0, fusion: str = "akf") -> Fragment:
    """The whole tiny model, cross-entropy on two random images."""
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        model = build_model(TINY.replace(fusion=fusion), seed=seed)
    cfg = model.cfg
    x = Tensor(rng.normal(size=(2, 3, cfg.resolution, cfg.resolution)), dtype=np.float64)
    labels = rng.integers(0, cfg.num_classes, size=2)
    model.set_lambda(0.5)
    rngs = {n: m.rng for n, m in model.named_modules() if hasattr(m, "rng")}
    starts = {n: r.bit_generator.state for n, r in rngs.items()}

    def reset():
        for n, r in rngs.items():
            r.bit_generator.state = starts[n]

    return Fragment(f"tiny_model_{fusion}", lambda: T.cross_entropy(model(x)[0], labels),
                    list(model.named_parameters()), reset)


FRAGMENTS = {
    "mbconv_se": mbconv_fragment,
    "encoder_block": encoder_fragment,
    "cross_attention": cross_attention_fragment,
    "akf": akf_fragment,
    "ckf": ckf_fragment,
    "tiny_model": model_fragment,
}


def suite(names=None, n_samples: int = 50, tolerance: float = DEFAULT_TOLERANCE, seed: int = 0):
    """Run the named fragments (all by default); returns a list of reports."""
    names = list(FRAGMENTS) if names is None else list(names)
    return [gradcheck(FRAGMENTS[n](seed), n_samples=n_samples, tolerance=tolerance, seed=seed) for n in names]
