import numpy as np

from .. import kernels
from ..errors import NumericError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def adamw_step(params, lr, wd, beta1=BETA1, beta2=BETA2, eps=EPS):
    """One AdamW update with decoupled weight decay, in place.

    ``value <- value - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * value``.
    Parameters whose ``grad`` is ``None`` are treated as having zero gradient.
    Raises ``NumericError`` before touching anything if a gradient is not finite.
    """
    params = list(params)
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {p.name or p.shape}")
    lr = float(lr)
    wd = float(wd)
    for p in params:
        for attr in ("data", "m", "v"):
            arr = getattr(p, attr)
            if not (arr.flags.writeable and arr.flags.c_contiguous):
                setattr(p, attr, np.array(arr, order="C"))
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        g = np.ascontiguousarray(g, dtype=p.data.dtype)
        p.step += 1
        t = p.step
        kernels.adamw_update(p.data.reshape(-1), g.reshape(-1), p.m.reshape(-1), p.v.reshape(-1), lr, wd,
                             float(beta1), float(beta2), 1.0 - beta1 ** t, 1.0 - beta2 ** t, float(eps))
    return params
