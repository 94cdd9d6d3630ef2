"""
Saving a model and estimating its constants
===========================================

Models round-trip through JSON. The ``estimate`` command does the same as
below from the shell: ``blnn estimate -p model=zero.json``.
"""

from blnn import model as bm
from blnn.estimator import estimate_bilip

# G = 0 makes the map x -> (alpha + beta) x exactly
bm.save_model(bm.Blnn(bm.zero_core(1), bm.BlnnConfig(1.0, 3.0)), "zero.json")
net, solver = bm.load_model("zero.json")
est = estimate_bilip(lambda X: bm.blnn_forward(net, X, solver)[0], -1, 1, n_samples=300)
print(est.to_json())
