"""Central finite-difference gradient oracle used by the autodiff tests."""

import numpy as np

from diffseg.autodiff import Tensor


def numeric_grad(f, arrays, index, h=1e-5):
    """Central-difference gradient of scalar f(*arrays) w.r.t. arrays[index]."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(*base)
        flat[i] = keep - h
        fm = f(*base)
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradcheck(build, arrays, tol=1e-4, h=1e-5):
    """Compare analytic gradients of build(*tensors) against central differences.

    ``build`` maps Tensors to a scalar Tensor. The error reported per input is
    the max absolute deviation normalized by the largest numeric-gradient
    magnitude (floored to avoid division by ~0 for constant functions).
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    loss.backward()

    def eval_scalar(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    worst = 0.0
    for i, t in enumerate(tensors):
        num = numeric_grad(eval_scalar, arrays, i, h=h)
        scale = max(np.abs(num).max(), 1e-12)
        err = np.abs(t.grad - num).max() / scale
        assert err < tol, f"input {i}: rel err {err:.3e} >= {tol}"
        worst = max(worst, err)
    return worst
