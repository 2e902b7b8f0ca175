"""Gradients, double backward and a Hessian-vector product on the numpy tape.

Run: python3 demos/autodiff_tour.py
"""

import numpy as np

from ptmdistill import autodiff as ad

# first derivative of sum(x^2)
x = ad.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
(g,) = ad.grad(ad.tsum(x * x), [x])
print("d/dx sum(x^2)     =", g.data)

# second derivative of x^3 via create_graph
x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
(g,) = ad.grad(ad.tsum(x * x * x), [x], create_graph=True)
(h,) = ad.grad(ad.tsum(g), [x])
print("d2/dx2 sum(x^3)   =", h.data)

# Hessian-vector product through a tiny conv layer
rng = np.random.default_rng(0)
img = rng.uniform(0, 1, (2, 1, 6, 6))
w = ad.Tensor(rng.standard_normal((3, 1, 3, 3)), requires_grad=True)
loss = ad.tsum(ad.relu(ad.conv2d(img, w, padding=1)) ** 2)
(gw,) = ad.grad(loss, [w], create_graph=True)
v = rng.standard_normal(w.shape)
(hv,) = ad.grad(ad.tsum(gw * ad.Tensor(v)), [w])
print("|H v| for conv    =", float(np.linalg.norm(hv.data)))

# the recorded graph can be inspected and replayed
graph = ad.Graph(loss)
print("ops on the tape   =", graph.op_names())
print("replay matches    =", graph.replay().tobytes() == loss.data.tobytes())
