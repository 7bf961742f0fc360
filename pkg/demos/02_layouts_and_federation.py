"""
Synthetic layouts and a two-client federation
=============================================

Each client holds one structural family of layout masks with noisy SEM-style
renderings. The server averages their updates; the last round's update from
each client is what an eavesdropping server keeps.
"""

import numpy as np

from fedleak import federation as fl
from fedleak import layouts, unet

size = 32
for cls in layouts.CLASSES:
    for scale in layouts.SCALES:
        m = layouts.gen_mask(cls, scale, size, seed=1)
        print(f"{cls:5s} {scale:6s} width={layouts.feature_width(scale, size)} foreground={m.foreground_fraction():.2f}")

# a crude text view of one mask of each family
for cls in layouts.CLASSES:
    grid = layouts.gen_mask(cls, layouts.COARSE, size, seed=3).grid
    print(cls)
    print("\n".join("".join("#" if v else "." for v in row[::2]) for row in grid[::2]))

trace = layouts.generate({(layouts.TRACE, layouts.COARSE): 16}, size, seed=0)
blob = layouts.generate({(layouts.BLOB, layouts.COARSE): 16}, size, seed=1)
img = trace.images[0].pixels
print("rendered pixel means (fg, bg):", img[trace.masks[0].grid == 1].mean() * 255, img[trace.masks[0].grid == 0].mean() * 255)

clients = [fl.ClientDataset.from_dataset(trace), fl.ClientDataset.from_dataset(blob)]
config = fl.FLConfig(num_clients=2, rounds=10)
result = fl.run_federation(config, clients, arch=unet.UNetConfig(size))
print("initial loss per client:", [round(l, 4) for r, c, l in result.losses if r == 1])
print("final loss per client:  ", [round(l, 4) for l in result.final_losses])

snap = result.snapshots[0]
view = fl.attacker_view(snap)
delta = np.abs(view.w_prev.flat() - view.w_curr.flat())
print(f"intercepted round {snap.round}, client {snap.client}: {view.w_prev.num_params()} weights, mean |delta| {delta.mean():.2e}")
