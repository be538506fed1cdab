"""FetchSGD next to local top-k and FedAvg on a non-i.i.d. least-squares task.

Prints final risk and upload/download bytes for each optimizer. All three
share the same clients, sampling stream and round count.
"""

import math

import numpy as np

from sketchfed import FedAvgConfig, FetchConfig, LeastSquares, LocalTopKConfig, RoundConfig, SketchConfig, simulate
from sketchfed.sim import Federation, evaluate_risk, make_least_squares_clients
from sketchfed.models import smoothness_constant

C, W, d, T = 100, 10, 256, 500
shards, _ = make_least_squares_clients(C, 20, d, np.random.default_rng(0))
fed = Federation(shards)
model = LeastSquares(d)
L = smoothness_constant(model, fed.pooled[0])
lr = 0.02 / L  # client gradients are much less smooth than the pooled risk

optimizers = {
    "uncompressed": LocalTopKConfig(k=d, lr=lr, global_momentum=0.9),
    "fetchsgd": FetchConfig(eta=lr, k=25, sketch=SketchConfig(5, 20, d, seed=7), rho=0.9),
    "local top-k": LocalTopKConfig(k=25, lr=lr, global_momentum=0.9),
    "fedavg": FedAvgConfig(local_epochs=1, local_batch=5, local_lr=lr, global_epochs_fraction=0.5),
}

w0 = np.zeros(d)
print(f"initial risk {evaluate_risk(w0, fed, model):.5f}, dense round upload {W * 4 * d} bytes")
for name, opt in optimizers.items():
    rounds = opt.rounds(T) if isinstance(opt, FedAvgConfig) else T
    state, hist = simulate(w0, opt, fed, model, RoundConfig(W), rounds, seed=1)
    up = state.bytes_up
    ratio = T * W * 4 * d / up
    print(
        f"{name:>12}: risk {evaluate_risk(state.weights, fed, model):.5f}  "
        f"upload {up:>9} B ({ratio:5.1f}x)  download {state.bytes_down:>9} B  "
        f"min |grad|^2 {min(m.grad_norm_sq for m in hist):.2e}"
    )
