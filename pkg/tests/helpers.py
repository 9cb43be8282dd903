import numpy as np

from trear import tensor as T
from trear.tensor import Tensor


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar f() w.r.t. every entry of each array (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(a, n, floor=1e-6):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_op_grads(build, shapes, rng, h=1e-5):
    """build(*tensors) -> Tensor; contracts output with a random weight to get a scalar."""
    arrays = [rng.normal(size=s) for s in shapes]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    weight = rng.normal(size=out.shape)

    def f():
        return float((build(*[Tensor(a) for a in arrays]).data * weight).sum())

    T.sum(out * weight).backward()
    numeric = numeric_grad(f, arrays, h)
    return max(max_rel_err(t.grad, n) for t, n in zip(tensors, numeric))
