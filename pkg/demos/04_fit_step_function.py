"""
Fitting a discontinuous target under a Lipschitz bound
======================================================

The step ``y = x + 1[x > 0]`` has an infinite slope at 0, so a model with
Lipschitz bound L fits it best by using the whole budget near 0. The
tightness is the estimated constant over L. This is a shortened run; the
``tightness`` command runs the full protocol.
"""

from blnn import training as tr
from blnn.estimator import tightness

L = 5.0
net = tr.default_blnn(L=L, seed=0, input_gain=5.0)
cfg = tr.TrainConfig(epochs=300, batch_size=30, lr=0.05, lr_schedule="cosine", lr_min=5e-4, seed=0)
report = tr.train_regression(net, tr.make_step_dataset(seed=0), cfg)
est = tr.empirical_bilip(lambda X: tr.predict(net, X), 1000, -1.0, 1.0, seed=0)
print(f"final loss {report.losses[-1]:.4f} after {report.seconds:.0f}s")
print(f"estimated constants [{est.invlip_hat:.3f}, {est.lip_hat:.3f}]  tightness {tightness(est.lip_hat, L):.1f}%")

# the spectral-normalized baseline under the same bound, with plain Adam at
# 0.01 for 200 full-batch epochs. Longer training pushes it much closer to L.
sn = tr.make_sn_mlp(scale=L, seed=0)
tr.train_regression(sn, tr.make_step_dataset(seed=0), tr.TrainConfig(epochs=200, lr=0.01, seed=0))
est = tr.empirical_bilip(lambda X: tr.predict(sn, X), 1000, -1.0, 1.0, seed=0)
print(f"SN baseline tightness {tightness(est.lip_hat, L):.1f}%")
