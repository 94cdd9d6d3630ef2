"""
Uncertainty on two moons
========================

A DUQ head (RBF kernels to moving-average class centroids) sits on a
bi-Lipschitz feature map. The inverse Lipschitz bound keeps distant inputs
apart in feature space, so certainty drops away from the data. A large
alpha spreads the features so far that every kernel value vanishes, and
the model is left guessing. Runs take a couple of minutes.
"""

from blnn import duq

for alpha, beta in [(2.0, 4.0), (5.0, 3.0)]:
    rep = duq.run_two_moons(alpha, beta, epochs=12, sigma=0.25, grid_size=60)
    print(f"({alpha}, {beta})  accuracy {rep.accuracy:.3f}  AUROC vs background {rep.auroc:.3f}")
    duq.write_grid_csv(rep.grid, f"certainty_a{alpha:g}_b{beta:g}.csv")
