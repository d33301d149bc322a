"""Central finite-difference gradient oracle shared by the network tests."""

import numpy as np

from wccnet.network import autograd as ag


def numeric_grad(f, arrays, index, h=1e-5):
    """d f / d arrays[index], elementwise by central differences (f returns a float)."""
    x = arrays[index]
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(arrays)
        x[i] = old - h
        down = f(arrays)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def analytic_grads(build, arrays):
    leaves = [ag.leaf(a.copy(), f"in{i}") for i, a in enumerate(arrays)]
    loss = build(leaves)
    ag.backward(loss)
    return [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]


def check_op(build, arrays, rtol=1e-4, atol=1e-7, h=1e-5):
    """Compare analytic and numeric gradients of the scalar graph `build(vars)`."""

    def f(arrs):
        with ag.no_grad():
            return float(build([ag.const(a) for a in arrs]).data)

    grads = analytic_grads(build, arrays)
    for idx in range(len(arrays)):
        np.testing.assert_allclose(grads[idx], numeric_grad(f, arrays, idx, h), rtol=rtol, atol=atol)


def weighted_sum(x, seed=0):
    """Scalar loss sum(x * r) with fixed random weights, so every output element matters."""
    r = np.random.default_rng(seed).normal(size=x.shape)
    return ag.total(ag.mul(x, ag.const(r)))
