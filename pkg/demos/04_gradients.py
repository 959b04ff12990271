"""Reverse-mode gradients of a TAGConv layer against central differences.

Every op in the network records a backward closure; `backward` walks the
graph once in reverse topological order. Here the analytic gradient of a
small loss is compared entry by entry with (f(x + h) - f(x - h)) / 2h.

    python demos/04_gradients.py
"""
import numpy as np

from deformcast import autodiff as ad, shapes
from deformcast.mesh import build_graph
from deformcast.model import tagconv_forward

rng = np.random.default_rng(0)
graph = build_graph(shapes.icosphere(1))
adj = ad.build_adjacency(graph)
x = rng.normal(size=(graph.n_nodes, 5))
ws = [rng.normal(size=(5, 4)) for _ in range(4)]
b = rng.normal(size=4)
target = rng.normal(size=(graph.n_nodes, 4))


def loss(*arrays):
    out = tagconv_forward(arrays[0], adj, list(arrays[1:5]), arrays[5])
    d = ad.sub(ad.relu(out), target)
    return ad.mean_all(ad.mul(d, d))


arrays = [x, *ws, b]
vars_ = [ad.Var(a.copy(), requires_grad=True) for a in arrays]
ad.backward(loss(*vars_))

h = 1e-6
for name, a, v in zip(["x", "W0", "W1", "W2", "W3", "b"], arrays, vars_):
    num = np.zeros_like(a)
    for i in np.ndindex(a.shape):
        old = a[i]
        a[i] = old + h
        fp = float(loss(*arrays).values)
        a[i] = old - h
        fm = float(loss(*arrays).values)
        a[i] = old
        num[i] = (fp - fm) / (2 * h)
    rel = np.abs(num - v.grad).max() / np.abs(num).max()
    print(f"{name:>2} {str(a.shape):>8}  max relative error {rel:.1e}")
