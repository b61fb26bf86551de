"""Acceptance criteria.  Each test prints a single ``[PASS]``/``[FAIL]`` line.

Reference cost figures are compared at a pinned relative tolerance of 10%;
everything else is checked against independent computations.
"""

import time

import numpy as np
import pytest

from ctrlf import tensor as T
from ctrlf.checkpoint import load_checkpoint, save_checkpoint
from ctrlf.costs import count_costs, patch_sweep, sweep_patch_sizes
from ctrlf.fusion import AKFConfig, akf_forward, lambda_schedule
from ctrlf.gradcheck import FRAGMENTS, suite
from ctrlf.mfca import CrossAttentionExchange, PatchEmbed, TokenSet
from ctrlf.model import CTRLF_B, CTRLF_S, build_model
from ctrlf.tensor import Tensor
from ctrlf.training import evaluate, overfit_smoke

COST_RTOL = 0.10
RATIO_RANGE = (2.7, 3.1)
RATIO_RANGE_S = (2.8, 3.1)
GRADCHECK_TOL = 1e-4
GRADCHECK_BUDGET_S = 300.0
SMOKE_STEPS = 200
SMOKE_BUDGET_S = 180.0
FUSION_PAIRS = 1000
SCALE_ATOL = 1e-6
SCALE_RANGE = (0.1, 100.0)

# reference (params, FLOPs) at 224x224 with 102 classes
REFERENCE_COSTS = {
    ("ctrlf-s", "akf"): (9.97e6, 1.43e9),
    ("ctrlf-s", "ckf"): (9.99e6, 1.43e9),
    ("ctrlf-b", "akf"): (21.36e6, 3.29e9),
    ("ctrlf-b", "ckf"): (21.39e6, 3.29e9),
}
# CTRLF-S + CKF patch sweep rows: (large, small) -> (params, FLOPs)
REFERENCE_SWEEP = {
    (2, 2): (9.20e6, 3.75e9),
    (8, 2): (9.99e6, 1.43e9),
    (8, 7): (11.46e6, 1.37e9),
    (14, 2): (12.15e6, 1.33e9),
}


def within(value, target, rtol=COST_RTOL):
    return abs(value - target) <= rtol * target


def _fmt(x):
    return f"{x / 1e6:.2f}M" if x < 1e8 else f"{x / 1e9:.2f}G"


def test_c1_cost_table(verdict):
    checks = []
    base = {"ctrlf-s": CTRLF_S, "ctrlf-b": CTRLF_B}
    for (name, fusion), (params, flops) in REFERENCE_COSTS.items():
        rep = count_costs(base[name].replace(fusion=fusion, num_classes=102))
        checks.append((f"{name}/{fusion} params {_fmt(rep.total_params)} vs {_fmt(params)}",
                       within(rep.total_params, params)))
        checks.append((f"{name}/{fusion} FLOPs {_fmt(rep.total_flops)} vs {_fmt(flops)}",
                       within(rep.total_flops, flops)))
    verdict("C1 cost table within 10%", checks)


def test_c2_patch_sweep(verdict):
    cfg = CTRLF_S.replace(fusion="ckf", num_classes=102)
    reps = {k: count_costs(cfg.with_patches(*k)) for k in REFERENCE_SWEEP}
    order = [(2, 2), (8, 2), (8, 7), (14, 2)]
    flops = [reps[k].total_flops for k in order]
    params = [reps[k].total_params for k in order]
    checks = [("FLOPs ordering (2,2)>(8,2)>(8,7)>(14,2)", all(a > b for a, b in zip(flops, flops[1:]))),
              ("params ordering (2,2)<(8,2)<(8,7)<(14,2)", all(a < b for a, b in zip(params, params[1:])))]
    for k, (p, f) in REFERENCE_SWEEP.items():
        checks.append((f"{k} params {_fmt(reps[k].total_params)} vs {_fmt(p)}", within(reps[k].total_params, p)))
        checks.append((f"{k} FLOPs {_fmt(reps[k].total_flops)} vs {_fmt(f)}", within(reps[k].total_flops, f)))
    rows = patch_sweep(cfg)
    grid = {(pl, ps): r for pl, ps, r in rows if r is not None}
    large, small = sweep_patch_sizes(cfg)
    mono = True
    for ps in small:
        col = [grid[pl, ps] for pl in large if (pl, ps) in grid]
        mono &= all(a.total_flops >= b.total_flops and a.total_params <= b.total_params for a, b in zip(col, col[1:]))
    for pl in large:
        row = [grid[pl, ps] for ps in small if (pl, ps) in grid]
        mono &= all(a.total_flops >= b.total_flops and a.total_params <= b.total_params for a, b in zip(row, row[1:]))
    checks.append((f"grid of {len(grid)} cells monotone in both patch sizes", mono and len(grid) > 4))
    verdict("C2 patch sweep", checks)


def test_c3_resolution_scaling(verdict):
    checks = []
    for cfg, (lo, hi) in ((CTRLF_S, RATIO_RANGE_S), (CTRLF_B, RATIO_RANGE)):
        ratio = count_costs(cfg.replace(resolution=384)).total_flops / count_costs(cfg).total_flops
        checks.append((f"{cfg.name} FLOPs ratio {ratio:.3f} in [{lo}, {hi}]", lo <= ratio <= hi))
    verdict("C3 resolution scaling 384/224", checks)


def test_c4_accuracy_figures_out_of_scope(verdict):
    pytest.skip("full-scale accuracy needs GPU-days of training; covered by C5-C9 instead")


def test_c5_gradcheck_suite(verdict):
    start = time.perf_counter()
    reports = suite(n_samples=50, tolerance=GRADCHECK_TOL)
    seconds = time.perf_counter() - start
    checks = [(r.summary(), r.passed and r.max_rel_error < GRADCHECK_TOL) for r in reports]
    checks.append((f"{len(reports)} fragments cover {sorted(FRAGMENTS)}", len(reports) >= 5))
    checks.append((f"suite took {seconds:.1f}s (< {GRADCHECK_BUDGET_S:.0f}s)", seconds < GRADCHECK_BUDGET_S))
    verdict("C5 float64 gradient checks", checks)


@pytest.mark.slow
def test_c6_overfit_smoke(verdict, smoke_akf, smoke_ckf):
    checks = []
    for name, run in (("akf", smoke_akf), ("ckf", smoke_ckf)):
        cfg = run.model.cfg
        checks.append((f"{name} tiny variant layout", cfg.blocks == (1, 1, 1, 1) and cfg.channels == (8, 16, 32, 64)
                       and cfg.mfca.small.embed_dim == 32 and cfg.mfca.large.embed_dim == 64
                       and cfg.mfca.rounds == 1 and cfg.resolution == 32))
        acc = evaluate(run.model, run.data)["fused"]
        checks.append((f"{name} train accuracy {acc:.4f}", acc == 1.0))
        checks.append((f"{name} {len(run.step_losses)} steps", len(run.step_losses) <= SMOKE_STEPS))
        checks.append((f"{name} runtime {run.seconds:.0f}s", run.seconds < SMOKE_BUDGET_S))
    verdict("C6 overfit smoke, 8 classes x 8 images", checks)


def test_c7_fusion_invariants(verdict):
    rng = np.random.default_rng(2024)
    f64 = lambda a: Tensor(a, dtype=np.float64)  # noqa: E731
    yc = rng.normal(size=(FUSION_PAIRS, 10))
    yt = rng.normal(size=(FUSION_PAIRS, 10))
    at_one = akf_forward(f64(yc), f64(yt), 1.0, 10.0).data.argmax(axis=1)
    at_zero = akf_forward(f64(yc), f64(yt), 0.0, 10.0).data.argmax(axis=1)
    # the 1e-8 epsilon in the L1 normalisation breaks exact invariance once
    # the L1 norm nears 1e-2, so scales stay where the norm is well above it
    scales = np.exp(rng.uniform(np.log(SCALE_RANGE[0]), np.log(SCALE_RANGE[1]), size=(FUSION_PAIRS, 1)))
    smallest = float((np.abs(yc).sum(1, keepdims=True) * scales).min())
    dev = 0.0
    for lam in (0.0, 0.3, 0.5, 0.7, 1.0):
        base = akf_forward(f64(yc), f64(yt), lam, 10.0).data
        dev = max(dev, np.abs(akf_forward(f64(yc * scales), f64(yt), lam, 10.0).data - base).max(),
                  np.abs(akf_forward(f64(yc), f64(yt * scales), lam, 10.0).data - base).max())
    sched = AKFConfig(total_epochs=100)
    checks = [(f"lambda=1 argmax == CNN argmax on {FUSION_PAIRS} pairs", np.array_equal(at_one, yc.argmax(axis=1))),
              (f"lambda=0 argmax == transformer argmax on {FUSION_PAIRS} pairs",
               np.array_equal(at_zero, yt.argmax(axis=1))),
              (f"positive rescaling max deviation {dev:.1e} (smallest L1 norm {smallest:.2f})", dev < SCALE_ATOL),
              ("lambda endpoints 0.7 / 0.3", lambda_schedule(0, sched) == 0.7 and lambda_schedule(99, sched) == 0.3)]
    verdict("C7 AKF invariants", checks)


def test_c8_structural_invariants(verdict, rng):
    checks = []
    ex = CrossAttentionExchange(256, 128, 6, rng)
    large = TokenSet(Tensor(rng.normal(size=(2, 50, 256)).astype(np.float32)), "large")
    small = TokenSet(Tensor(rng.normal(size=(2, 50, 128)).astype(np.float32)), "small")
    with T.no_grad():
        new_l, new_s = ex(large, small)
    checks.append(("exchange leaves patch tokens bit-identical",
                   np.array_equal(new_l.patches.data, large.patches.data)
                   and np.array_equal(new_s.patches.data, small.patches.data)))
    large_sizes, small_sizes = sweep_patch_sizes(CTRLF_S)
    counts_ok = True
    for side, ch, sizes in ((CTRLF_S.s2_side, 4, large_sizes), (CTRLF_S.s4_side, 4, small_sizes)):
        for p in sizes:
            emb = PatchEmbed(ch, side, p, 8, rng)
            with T.no_grad():
                n = emb(Tensor(np.zeros((1, ch, side, side), np.float32))).patches.shape[1]
            counts_ok &= n == (side // p) ** 2
    checks.append((f"token counts over {len(large_sizes)}+{len(small_sizes)} patch sizes", counts_ok))
    model = build_model(CTRLF_S)
    with T.no_grad():
        s2, s4, _ = model.conv(Tensor(np.zeros((1, 3, 224, 224), np.float32)))
    checks.append((f"S2 tap {s2.shape[2:]} and S4 tap {s4.shape[2:]}", s2.shape[2:] == (56, 56)
                   and s4.shape[2:] == (14, 14)))
    verdict("C8 structural invariants", checks)


@pytest.mark.slow
def test_c9_determinism(verdict, smoke_akf, tmp_path):
    first_csv = smoke_akf.result.last_checkpoint.parent.parent / "metrics.csv"
    again = overfit_smoke("akf", seed=0, out_dir=tmp_path / "again")
    checks = [("metrics CSVs byte-identical", first_csv.read_bytes() == (tmp_path / "again" / "metrics.csv").read_bytes())]

    model = again.model
    save_checkpoint(tmp_path / "a", model)
    restored = build_model(model.cfg, seed=123)
    load_checkpoint(tmp_path / "a", restored)
    save_checkpoint(tmp_path / "b", restored)
    same_bytes = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                     for f in ("tensors.bin", "tensors.txt"))
    with T.no_grad():
        x = Tensor(again.data.images[:16])
        outs_a = [o.data for o in model.eval()(x)]
        outs_b = [o.data for o in restored.eval()(x)]
    checks.append(("checkpoint save/load/save byte-identical", same_bytes))
    checks.append(("restored model outputs bit-identical", all(np.array_equal(a, b) for a, b in zip(outs_a, outs_b))))
    verdict("C9 determinism", checks)
