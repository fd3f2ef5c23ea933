"""Reverse-mode gradients on a tiny graph, checked against central differences."""

import numpy as np

from privit import autodiff as ad
from privit.autodiff import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)

loss = ad.cross_entropy(ad.gelu(x @ w), [0, 2, 4, 1])
loss.backward()
print(f"loss {loss.item():.6f}")
print("dL/dw row 0:", np.round(w.grad[0], 6))

# grad_check perturbs each entry by +-step and compares relative error
err = ad.grad_check(lambda *_: ad.cross_entropy(ad.gelu(x @ w), [0, 2, 4, 1]), [x, w], 1e-5)
print(f"max relative error {err:.2e}")
