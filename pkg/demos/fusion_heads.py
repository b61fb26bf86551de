"""
Two ways of merging the branch predictions
==========================================

AKF blends L1-normalised logits with a weight that slides from the CNN
towards the transformer during training.  CKF learns the merge instead.
"""

import numpy as np

from ctrlf.fusion import AKFConfig, CKF, CKFConfig, akf_forward, lambda_schedule
from ctrlf.tensor import Tensor

rng = np.random.default_rng(0)
y_cnn = Tensor(np.array([[3.0, 1.0, 0.5, -1.0]]))
y_trans = Tensor(np.array([[0.2, 0.1, 2.5, 0.0]]))

# at lambda=1 the CNN decides, at lambda=0 the transformer does
for lam in (1.0, 0.7, 0.5, 0.3, 0.0):
    p = akf_forward(y_cnn, y_trans, lam, alpha=10.0).data[0]
    print(f"lambda={lam:.1f}  probs={np.round(p, 3)}  argmax={p.argmax()}")

# the schedule used during training, one value per epoch
cfg = AKFConfig(total_epochs=6)
print("schedule:", [round(lambda_schedule(e, cfg), 3) for e in range(6)])

# scaling one input by a positive factor changes nothing
a = akf_forward(y_cnn, y_trans, 0.5, 10.0).data
b = akf_forward(Tensor(y_cnn.data * 40.0), y_trans, 0.5, 10.0).data
print("max change after x40 rescale:", np.abs(a - b).max())

# CKF: align both vectors to k dims, concatenate, dropout, classify
head = CKF(4, 4, 4, CKFConfig(k=8), rng).eval()
print("CKF logits:", np.round(head(y_cnn, y_trans).data, 3))
