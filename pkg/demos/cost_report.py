"""
Where the parameters and multiply-adds go
=========================================

The cost engine counts every weight and every multiply-accumulate
analytically.  This walk-through prints the per-component table for the
small preset, then sweeps the two patch sizes.
"""

from ctrlf.costs import count_costs, patch_sweep
from ctrlf.model import CTRLF_B, CTRLF_S

# per-component breakdown at 224x224 with 102 classes
rep = count_costs(CTRLF_S)
print(rep.table())

# the two fusion heads differ only by the CKF alignment layers
for base in (CTRLF_S, CTRLF_B):
    akf = count_costs(base).total_params
    ckf = count_costs(base.replace(fusion="ckf")).total_params
    print(f"{base.name}: AKF {akf / 1e6:.2f}M, CKF {ckf / 1e6:.2f}M (+{ckf - akf} params)")

# bigger inputs: FLOPs grow roughly with the pixel count
for res in (224, 384):
    print(res, f"{count_costs(CTRLF_S.replace(resolution=res)).total_flops / 1e9:.2f}G")

# smaller patches mean more tokens: FLOPs go up, the embedding shrinks
print("large small   params      FLOPs")
for pl, ps, r in patch_sweep(CTRLF_S, [2, 4, 8, 14, 28], [1, 2, 7]):
    print(f"{pl:5d} {ps:5d} {r.total_params / 1e6:8.2f}M {r.total_flops / 1e9:9.2f}G")
