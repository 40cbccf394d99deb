"""Finite-difference verification of reverse-mode gradients (run in float64)."""

import numpy as np

from .tensor import Tensor

FD_STEP = 1e-5
REL_FLOOR = 1e-8


def relative_error(a, b, floor=REL_FLOOR):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(fn, point, step=FD_STEP):
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps a Tensor to a scalar Tensor; ``point`` is an array or Tensor
    and is evaluated in float64.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    fn(x).backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    out = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(Tensor(x0)).item()
        flat[i] = orig - step
        fm = fn(Tensor(x0)).item()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return float(relative_error(analytic, numeric).max()) if x0.size else 0.0


def parameter_gradient_check(loss_fn, params, step=FD_STEP, max_coords=None, rng=None, details=None):
    """Same check over model parameters, perturbed in place.

    ``params`` is a list of Parameters or of ``(name, Parameter)`` pairs.
    ``loss_fn()`` rebuilds the loss from the current parameter values. With
    ``max_coords`` set, each parameter contributes at most that many randomly
    chosen coordinates. Returns ``(worst_error, per_parameter_worst)``; if
    ``details`` is a list, ``(name, index, analytic, numeric)`` is appended
    for every checked coordinate.
    """
    named = [item if isinstance(item, tuple) else (item.name or f"param{i}", item)
             for i, item in enumerate(params)]
    params = [p for _, p in named]
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = {}
    for (name, p), ga in zip(named, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        errs = []
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn().item()
            flat[i] = orig - step
            fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            errs.append(relative_error(ga.reshape(-1)[i], num))
            if details is not None:
                details.append((name, int(i), float(ga.reshape(-1)[i]), float(num)))
        worst[name] = float(max(errs)) if errs else 0.0
    for p in params:
        p.grad = None
    return max(worst.values(), default=0.0), worst
