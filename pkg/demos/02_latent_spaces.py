"""
Latent spaces: bottleneck sweep and the linear limit
====================================================

Trains autoencoders of increasing bottleneck width on the single-NL
training snapshots and compares a linear-activation autoencoder with the
exact PCA reconstruction at the same rank.
"""

import numpy as np

from nnmrom import autoencoder as ae
from nnmrom.config import load_run_config

cfg = load_run_config("single_nl_20dof")
_, train, test = cfg.simulate()
X = train[0].displacements

# %% Sweep
# A short sweep (two restarts, reduced epochs) is enough to see the error
# fall with the number of retained coordinates.
short = ae.AeConfig(lr=2e-3, max_epochs=300, patience=30)
sweep = ae.bottleneck_sweep(20, train, test, [1, 2, 4, 8, 12], restarts=2, config=short)
for k, err in sweep.best().items():
    print(f"bottleneck {k:2d}  test normalized mse {err:.5f}")
sweep.to_csv("sweep_demo.csv")

# %% Linear autoencoder against PCA
# With identity activations the optimal autoencoder spans the leading
# principal subspace, so its error can approach but not beat PCA.
Xn = (X - X.mean(axis=1, keepdims=True)) / X.std(axis=1, keepdims=True)
lin = ae.AeConfig(lr=5e-3, max_epochs=400, patience=50)
for k in (2, 4, 8):
    m, _ = ae.train_ae(ae.build_paper_ae(20, k, activation="linear"), X, lin)
    print(f"rank {k}: linear AE {ae.normalized_mse(m, X):.5f}   PCA {ae.pca_reconstruction_mse(Xn, k):.5f}")
