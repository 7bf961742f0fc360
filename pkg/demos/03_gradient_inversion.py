"""
Inverting an intercepted update
===============================

First the easy case: a single dense layer leaks its input exactly. Then the
label-guided inversion on a small U-Net update, once under each candidate
label; the run guided by the client's own layout family matches better.
"""

import numpy as np

from fedleak import federation as fl
from fedleak import inversion, layouts, unet

rng = np.random.default_rng(0)
arch = unet.LinearConfig(image_size=8)
x = rng.random((1, 8, 8))
y = (rng.random((1, 8, 8)) > 0.5).astype(float)
res = fl.run_federation(
    fl.FLConfig(num_clients=1, rounds=1, mode="FedSGD"), [fl.ClientDataset(x, y)], initial=unet.init_weights(arch, 0)
)
view = fl.attacker_view(res.snapshots[0])
rec = inversion.run_gia(view, y[0], inversion.GiaConfig(lambda_tv=0.0, iterations=300))
print("linear model, reconstruction MSE:", np.mean((rec.best - x[0]) ** 2))

# the learning rate is private to the client; a short grid search recovers it
print("estimated client lr:", inversion.estimate_lr(view, y[0], probe=inversion.GiaConfig(iterations=100, lambda_tv=0.0)))

# a 16x16 U-Net trained on TRACE data, attacked with a TRACE and a BLOB guide
size = 16
small = unet.UNetConfig(size, depth=1, base_channels=4)
trace = layouts.generate({(layouts.TRACE, layouts.COARSE): 8}, size, seed=0)
blob = layouts.generate({(layouts.BLOB, layouts.COARSE): 8}, size, seed=1)
fed = fl.run_federation(
    fl.FLConfig(num_clients=2, rounds=10, batch_size=4),
    [fl.ClientDataset.from_dataset(trace), fl.ClientDataset.from_dataset(blob)],
    arch=small,
)
view = fl.attacker_view(fed.snapshots[0])  # client 0 holds TRACE
a, b = inversion.dual_run(view, trace.masks[0], blob.masks[0], inversion.GiaConfig(iterations=300))
for r in (a, b):
    print(f"guide {r.label_class:5s} best L_grad {r.best_grad_loss:.5f} at iteration {r.best_iter}")
