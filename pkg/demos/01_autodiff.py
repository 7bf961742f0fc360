"""
Gradients of gradients
======================

The attack optimises an image so that the weight gradient it induces matches
an intercepted one. That needs the derivative of a gradient, so the autodiff
engine supports reverse-over-reverse.
"""

import numpy as np

from fedleak import autodiff as ad
from fedleak.autodiff import Tensor

# f(w, x) = (w x)^2. Its weight gradient is 2 w x^2.
w = Tensor(1.0, requires_grad=True)
x = Tensor(2.0, requires_grad=True)
wx = ad.mul(w, x)
(gw,) = ad.backward(ad.mul(wx, wx), [w], differentiable=True).values()
print("d/dw (wx)^2 at w=1, x=2:", gw.item())

# gw is itself a graph node; differentiate ||gw||^2 with respect to x.
(gx,) = ad.backward(ad.mul(gw, gw), [x]).values()
print("d/dx (2 w x^2)^2:", gx.item(), "(analytic 16 w^2 x^3 = 128)")

# The same thing on a small conv net, checked against central differences.
rng = np.random.default_rng(0)
xv, wv = rng.random((1, 1, 6, 6)), rng.normal(size=(2, 1, 3, 3))


def grad_norm(x_t):
    w_t = Tensor(wv, requires_grad=True)
    h = ad.sigmoid(ad.conv2d(x_t, w_t))
    loss = ad.mse(ad.avg_pool2(h), Tensor(np.full((1, 2, 3, 3), 0.3)))
    (g,) = ad.backward(loss, [w_t], differentiable=True).values()
    return ad.sum(ad.mul(g, g))


xt = Tensor(xv, requires_grad=True)
analytic = ad.backward(grad_norm(xt), [xt])[0].data
numeric = ad.finite_diff(lambda a: grad_norm(Tensor(a)).item(), xv, 1e-5)
print("max relative error vs finite differences:", np.abs(analytic - numeric).max() / np.abs(numeric).max())
