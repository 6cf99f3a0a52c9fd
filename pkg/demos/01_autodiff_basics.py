"""
A tiny reverse-mode autodiff core
=================================

Operations record onto a tape only inside a ``Graph`` block; outside one
they are plain numpy. ``check_gradients`` compares the backward pass with
central differences.
"""

import numpy as np

from alakd import tensor as tn
from alakd.tensor import Graph, Tensor, check_gradients

w = Tensor(np.array([[0.5, -1.0], [2.0, 0.1]]), requires_grad=True)
x = Tensor(np.array([[1.0, 2.0]]))

with Graph() as g:
    loss = (tn.softmax(x @ w, axis=-1) ** 2.0).sum()
g.backward(loss)
print("loss", loss.item())
print("dloss/dw\n", w.grad)

# same thing checked numerically, on a layer norm this time
rng = np.random.default_rng(0)
probe = rng.standard_normal((3, 6))
report = check_gradients(lambda a, gain, bias: (tn.layer_norm(a, gain, bias) * probe).sum(),
                         [rng.standard_normal((3, 6)), np.ones(6), np.zeros(6)])
print("layer norm max relative error", report.max_rel_error, "passed" if report.passed else "FAILED")
