"""Finite-difference gradient checking.

The checks here evaluate the loss with forward passes only (under
``no_grad``), so they are independent of the backward machinery they verify.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad

__all__ = ["central_difference", "relative_error", "check_gradients"]

# Relative error floors out so exactly-zero analytic gradients (dead relu
# paths) are not compared against pure finite-difference noise.
_DENOM_FLOOR = 1e-6


def central_difference(
    loss_fn: Callable[[], float],
    tensor: Tensor,
    indices: Iterable[tuple] | None = None,
    step: float = 1e-5,
) -> np.ndarray:
    """Central finite differences of ``loss_fn`` w.r.t. entries of ``tensor``.

    Returns an array shaped like ``tensor`` (entries not in ``indices`` stay
    zero when a subset is requested).
    """
    flat = tensor.data.reshape(-1)
    out = np.zeros_like(flat)
    if indices is None:
        picks = range(flat.size)
    else:
        picks = [int(np.ravel_multi_index(ix, tensor.shape)) for ix in indices]
    with no_grad():
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * step)
    return out.reshape(tensor.shape)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), _DENOM_FLOOR)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-5,
    max_entries_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backward grads of ``loss_fn()`` against central differences.

    Runs one forward/backward to collect analytic grads, then perturbs
    entries (all of them, or a random sample of ``max_entries_per_tensor``
    per tensor).  Returns the worst relative error observed.
    """
    for t in tensors:
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {id(t): (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for t in tensors}

    def scalar_loss() -> float:
        return float(loss_fn().data)

    worst = 0.0
    for t in tensors:
        if max_entries_per_tensor is None or t.size <= max_entries_per_tensor:
            entry_ids = range(t.size)
        else:
            gen = rng if rng is not None else np.random.default_rng(0)
            entry_ids = sorted(gen.choice(t.size, size=max_entries_per_tensor, replace=False).tolist())
        flat = t.data.reshape(-1)
        ana = analytic[id(t)].reshape(-1)
        with no_grad():
            for i in entry_ids:
                orig = flat[i]
                flat[i] = orig + step
                up = scalar_loss()
                flat[i] = orig - step
                down = scalar_loss()
                flat[i] = orig
                numeric = (up - down) / (2.0 * step)
                worst = max(worst, relative_error(float(ana[i]), numeric))
    return worst
