"""A short tour of the autodiff engine: gradients, gradients of gradients, gradcheck."""

import numpy as np

from metafit import autodiff as ad
from metafit.autodiff import Tensor, backward, gradcheck

# leaves that take part in differentiation need requires_grad=True
x = Tensor(3.0, requires_grad=True)
y = x * x
print("d(x^2)/dx at 3:", backward(y, [x])[0].item())

# higher_order=True keeps the backward pass on the graph,
# so the gradient itself can be differentiated again
x = Tensor(2.0, requires_grad=True)
(g,) = backward(x ** 3, [x], higher_order=True).values()
(gg,) = backward(g, [x]).values()
print("d2(x^3)/dx2 at 2:", gg.item())

# broadcasting works like numpy; gradients are summed back to each input's shape
w = Tensor(np.ones((3, 2)), requires_grad=True)
b = Tensor([0.5, -0.5], requires_grad=True)
grads = backward(((w * 2.0) + b).relu().sum(), {"w": w, "b": b})
print("grad b:", grads["b"].data)

# conv / batchnorm / pooling are built from primitives, so they are differentiable too
rng = np.random.default_rng(0)
img = Tensor(rng.standard_normal((2, 1, 6, 6)))


def tiny_cnn(p):
    h = ad.conv2d(img, p["k"], np.zeros(2))
    h = ad.batchnorm2d(h, np.ones(2), np.zeros(2))
    return ad.maxpool2d(h.relu()).sum()


# compare the analytic gradient with central finite differences
err = gradcheck(tiny_cnn, {"k": rng.standard_normal((2, 1, 3, 3))})
print(f"conv/bn/pool gradcheck max relative error: {err:.2e}")
