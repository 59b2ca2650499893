"""Shared test utilities, chiefly the central finite-difference oracle.

The oracle only ever calls the forward path: it perturbs raw numpy
buffers in place and re-evaluates a scalar closure, so it stays fully
independent of the reverse-mode machinery it is used to check.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from promptmim import numerics as nm
from promptmim.numerics import Tensor

FD_STEP = 1e-5


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / scale


def fd_gradient(forward: Callable[[], float], buffer: np.ndarray,
                coords: Sequence[int] | None = None,
                h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of ``forward`` w.r.t. entries of ``buffer``.

    ``forward`` must recompute the scalar from scratch on every call.
    When ``coords`` is given, only those flat indices are probed and the
    result is returned in that order.
    """
    flat = buffer.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    grads = np.empty(len(list(indices)) if coords is not None else flat.size)
    indices = range(flat.size) if coords is None else coords
    for out_pos, k in enumerate(indices):
        orig = flat[k]
        flat[k] = orig + h
        f_plus = forward()
        flat[k] = orig - h
        f_minus = forward()
        flat[k] = orig
        grads[out_pos] = (f_plus - f_minus) / (2.0 * h)
    return grads


def check_gradients(build: Callable[[], "nm.Tensor"], tensors: Sequence[Tensor],
                    tol: float, rng: np.random.Generator | None = None,
                    max_coords: int = 24) -> float:
    """Compare backward gradients of ``build()`` against finite differences.

    ``build`` constructs a fresh scalar loss from the given leaf tensors.
    Returns the worst relative error over the probed coordinates.
    """
    for t in tensors:
        t.grad = None
    loss = build()
    nm.backward(loss)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "leaf did not receive a gradient"
        flat_grad = t.grad.reshape(-1)
        n = flat_grad.size
        if rng is None or n <= max_coords:
            coords = list(range(n))
        else:
            coords = sorted(int(i) for i in rng.choice(n, size=max_coords,
                                                       replace=False))
        fd = fd_gradient(lambda: build().item(), t.data, coords)
        worst = max(worst, rel_err(fd, flat_grad[coords]))
    for t in tensors:
        t.grad = None
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol}"
    return worst


def leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)
