"""
A stateful autoregressive LSTM on a known recurrence
====================================================

The regressor sees the forcing at step t and its own previous output.
Here the target is the scalar recurrence y_t = 0.9 y_(t-1) + x_t, which it
should reproduce free-running on input it has never seen.
"""

import numpy as np

from nnmrom import lstm, nn


def recurrence(x, a=0.9):
    y, prev = np.empty_like(x), 0.0
    for t, v in enumerate(x):
        prev = a * prev + v
        y[t] = prev
    return y


rng = np.random.default_rng(0)
seqs = []
for _ in range(2):
    x = rng.standard_normal(1500)
    seqs.append((x[None, :], recurrence(x)[None, :]))

# %% Gradient check
# Hand-derived BPTT gradients against central differences on a tiny model.
small = lstm.build_regressor(1, 1, cells=(3,), lookback=5, seed=1)
X, Y = rng.standard_normal((5, 2, 1)), rng.standard_normal((5, 1, 1))
err = nn.grad_check(lambda: lstm.sequence_loss_and_grads(small, X, Y), small.params())
print(f"largest relative gradient error: {err:.2e}")

# %% Training with teacher forcing
cfg = lstm.LstmConfig(cells=(10,), lookback=20, epochs=300, lr=1e-2, lr_final_factor=0.05, residual=True)
reg = lstm.build_regressor(1, 1, cells=cfg.cells, lookback=cfg.lookback, residual=True)
reg, hist = lstm.train_teacher_forced(reg, seqs, cfg)
print(f"final teacher-forced loss: {hist.loss[-1]:.2e}")

# %% Free-running on new input
x = rng.standard_normal(1000)
pred, _ = lstm.predict_free_running(reg, x[None, :], from_rest=True)
y = recurrence(x)
print(f"free-running NMSE on unseen input: {np.mean((pred[0] - y) ** 2) / np.mean(y**2):.2e}")
