import numpy as np

from .tensor import Tensor, no_grad


def grad_check(f, x, eps=1e-4):
    """Max relative error between the analytic gradient of scalar ``f`` at ``x``
    and a central difference.

    Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``; a NaN
    result points at a broken backward rule.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    loss.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = numeric_grad(f, x, eps)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_grad(f, x, eps=1e-4):
    data = x.data
    out = np.zeros_like(data)
    flat = data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            out.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    return out
