"""Closed-form parameter and FLOP counts for a :class:`VariantConfig`.

FLOPs follow the multiply-accumulate convention (1 MAC = 1 FLOP):
convolutions cost k²·C_in·C_out·H_out·W_out/groups, linear layers in·out
per row, attention adds N_q·N_kv·h·d_k for the scores and again for the
weighted sum.  Norms, activations, softmax, pooling and elementwise ops are
free.  Parameters are counted exactly, norms and embeddings included.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

from .model import VariantConfig
from .nn import ConfigError, se_width
from .mfca import valid_patch_sizes

log = logging.getLogger(__name__)


@dataclass
class CostReport:
    params: dict[str, int] = field(default_factory=dict)
    flops: dict[str, int] = field(default_factory=dict)

    def add(self, module: str, params: int, flops: int) -> None:
        self.params[module] = self.params.get(module, 0) + int(params)
        self.flops[module] = self.flops.get(module, 0) + int(flops)

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    def table(self) -> str:
        rows = [f"{'module':<16}{'params':>14}{'FLOPs':>16}"]
        for name in self.params:
            rows.append(f"{name:<16}{self.params[name]:>14,}{self.flops[name]:>16,}")
        rows.append(f"{'total':<16}{self.total_params:>14,}{self.total_flops:>16,}")
        rows.append(f"total: {self.total_params / 1e6:.2f}M params, {self.total_flops / 1e9:.2f}G FLOPs")
        return "\n".join(rows)


def _linear(fan_in: int, fan_out: int, rows: int = 1, bias: bool = True) -> tuple[int, int]:
    return fan_in * fan_out + (fan_out if bias else 0), rows * fan_in * fan_out


def _conv(cin: int, cout: int, k: int, out_side: int, groups: int = 1) -> tuple[int, int]:
    return k * k * cin * cout // groups, k * k * cin * cout * out_side * out_side // groups


def _norm(c: int) -> int:
    return 2 * c


def _attention(dim: int, heads: int, n_q: int, n_kv: int) -> tuple[int, int]:
    inner = (dim // heads) * heads
    params = 3 * (dim * inner + inner) + inner * dim + dim
    flops = (n_q * dim * inner          # queries
             + 2 * n_kv * dim * inner   # keys, values
             + 2 * n_q * n_kv * inner   # scores, weighted sum
             + n_q * inner * dim)       # output projection
    return params, flops


def _conv_path(cfg: VariantConfig, rep: CostReport) -> None:
    side = cfg.resolution
    p, f = _conv(3, cfg.stem_width, 3, side)
    rep.add("stem", p + _norm(cfg.stem_width), f)
    cin = cfg.stem_width
    for s, (cout, n) in enumerate(zip(cfg.channels, cfg.blocks), start=1):
        for i in range(n):
            stride = 2 if i == 0 else 1
            hid = 4 * cin
            sq = se_width(cin, cfg.se_ratio)
            out_side = side // stride
            p1, f1 = _conv(cin, hid, 1, side)
            p2, f2 = _conv(hid, hid, 3, out_side, groups=hid)
            pr, fr = _linear(hid, sq)
            pe, fe = _linear(sq, hid)
            p3, f3 = _conv(hid, cout, 1, out_side)
            rep.add(f"stage{s}", p1 + p2 + p3 + pr + pe + _norm(hid) * 2 + _norm(cout), f1 + f2 + f3 + fr + fe)
            side, cin = out_side, cout
    rep.add("cnn_head", *_linear(cin, cfg.num_classes))


def _branch(name: str, channels: int, side: int, patch: int, dim: int, depth: int, ratio: int,
            heads: int, rep: CostReport) -> int:
    n = (side // patch) ** 2
    tokens = n + 1
    p, f = _linear(patch * patch * channels, dim, rows=n)
    rep.add(f"embed_{name}", p + dim + tokens * dim, f)
    for _ in range(depth):
        pa, fa = _attention(dim, heads, tokens, tokens)
        p1, f1 = _linear(dim, dim * ratio, rows=tokens)
        p2, f2 = _linear(dim * ratio, dim, rows=tokens)
        rep.add(f"encoder_{name}", pa + p1 + p2 + 2 * _norm(dim), fa + f1 + f2)
    return n


def _cross(src: int, dst: int, dst_patches: int, heads: int) -> tuple[int, int]:
    pa, fa = _attention(dst, heads, 1, dst_patches + 1)
    p1, f1 = _linear(src, dst)
    p2, f2 = _linear(dst, src)
    return p1 + 2 * dst + pa + p2, f1 + fa + f2


def count_costs(cfg: VariantConfig) -> CostReport:
    """Analytic parameter and FLOP count for one image at ``cfg.resolution``."""
    cfg.validate()
    rep = CostReport()
    _conv_path(cfg, rep)
    m = cfg.mfca
    lg, sm = m.large, m.small
    n_l = _branch("large", cfg.channels[1], cfg.s2_side, lg.patch_size, lg.embed_dim, lg.depth,
                  lg.ffn_ratio, m.heads, rep)
    n_s = _branch("small", cfg.channels[3], cfg.s4_side, sm.patch_size, sm.embed_dim, sm.depth,
                  sm.ffn_ratio, m.heads, rep)
    for _ in range(m.rounds):
        a = _cross(lg.embed_dim, sm.embed_dim, n_s, m.heads)
        b = _cross(sm.embed_dim, lg.embed_dim, n_l, m.heads)
        rep.add("cross_attention", a[0] + b[0], a[1] + b[1])
    for dim in (lg.embed_dim, sm.embed_dim):
        p, f = _linear(dim, cfg.num_classes)
        rep.add("mfca_head", p + (_norm(dim) if m.head_norm else 0), f)
    if cfg.fusion == "ckf":
        c, k = cfg.num_classes, cfg.ckf.k
        pa, fa = _linear(c, k)
        pc, fc = _linear(2 * k, c)
        rep.add("fusion", 2 * pa + pc, 2 * fa + fc)
    else:
        rep.add("fusion", 0, 0)
    return rep


def sweep_patch_sizes(cfg: VariantConfig, min_patch: int = 1) -> tuple[list[int], list[int]]:
    """Every patch size >= ``min_patch`` dividing each tapped feature side."""
    if cfg.resolution % 16:
        raise ConfigError(f"input resolution {cfg.resolution} is not divisible by 16")
    large = [p for p in valid_patch_sizes(cfg.s2_side) if p >= min_patch]
    small = [p for p in valid_patch_sizes(cfg.s4_side) if p >= min_patch]
    return large, small


def patch_sweep(cfg: VariantConfig, patch_sizes_large=None, patch_sizes_small=None):
    """Cost grid over (large, small) patch pairs.

    Returns a list of rows ``(patch_large, patch_small, report_or_None)``;
    pairs that do not divide the feature maps carry ``None`` and log a warning.
    """
    default_l, default_s = sweep_patch_sizes(cfg)
    patch_sizes_large = default_l if patch_sizes_large is None else list(patch_sizes_large)
    patch_sizes_small = default_s if patch_sizes_small is None else list(patch_sizes_small)
    rows = []
    for pl in patch_sizes_large:
        for ps in patch_sizes_small:
            try:
                rows.append((pl, ps, count_costs(cfg.with_patches(pl, ps))))
            except ConfigError as exc:
                log.warning("skipping patch pair (%d, %d): %s", pl, ps, exc)
                rows.append((pl, ps, None))
    return rows


def sweep_csv(rows) -> str:
    """CSV ``patch_large,patch_small,params,flops`` of the valid sweep rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patch_large", "patch_small", "params", "flops"])
    for pl, ps, rep in rows:
        if rep is not None:
            w.writerow([pl, ps, rep.total_params, rep.total_flops])
    return buf.getvalue()
