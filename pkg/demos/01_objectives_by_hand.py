"""
The training objectives on matrices small enough to read
=========================================================

"""

import numpy as np

from vlplab import losses as L
from vlplab import tensorlab as tl
from vlplab.sinkhorn import mix_with_identity, sinkhorn_normalize
from vlplab.tensorlab import Tensor

np.set_printoptions(precision=4, suppress=True)

# two image embeddings and their two captions, already lined up
img = Tensor([[1.0, 0.0], [0.0, 1.0]])
txt = Tensor([[0.9, 0.1], [0.2, 0.8]])

# InfoNCE in one direction; the logit scale plays the role of 1/temperature
for scale in (1.0, 10.0, 100.0):
    print("scale", scale, "image->text", L.contrastive_directional(img, txt, scale).item())

# label smoothing softens the identity target
print(L.smoothed_targets(4, 0.1))
print("smoothed loss", L.contrastive_symmetric(img, txt, 10.0, L.smoothed_targets(2, 0.1)).item())

# predictor-style consistency: 2 - 2 cos per row
print("consistency", L.consistency_loss(txt, img).item())

# Barlow cross-correlation is norm-scaled but not mean-centered
c = L.barlow_cross_correlation(img, txt)
print(c.data)
print("redundancy loss", L.barlow_loss(c).item())

# Sinkhorn turns a similarity matrix into balanced soft assignments
sims = tl.cosine_sim_matrix(img, txt).data
q = sinkhorn_normalize(sims, epsilon=0.05, n_iters=3)
print(q.q, "rows", q.q.sum(axis=1), "cols", q.q.sum(axis=0))

# the modified swapped loss anchors those assignments to the diagonal
print(mix_with_identity(q, 0.5).q)
views = [Tensor(np.random.default_rng(k).normal(size=(4, 3))) for k in range(4)]
for lam in (0.0, 0.5, 1.0):
    print("lam", lam, "swapped loss", L.swalip_modified(*views, lam=lam).item())

# gradients come from the tape and can be checked against finite differences
report = tl.finite_diff_grad_check(lambda a, b: L.contrastive_symmetric(a, b, 5.0), [img, txt])
print("gradient check passed:", report.passed, "worst relative error", report.max_rel_error)
