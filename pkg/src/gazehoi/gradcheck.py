"""Central finite-difference checks for the autodiff core."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    """|a - b| / max(|a|, |b|, floor).

    The floor keeps round-off in near-zero gradients from dominating.
    """
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                    entries: Optional[Sequence[Sequence[int]]] = None,
                    h: float = 1e-5) -> float:
    """Largest relative error between reverse-mode and numeric gradients.

    ``entries[k]`` lists flat indices of ``params[k]`` to probe; all entries
    are probed when omitted. ``loss_fn`` must rebuild the graph on each call.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        probe = range(flat.size) if entries is None else entries[k]
        for i in probe:
            old = flat[i]
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            numeric = (up - down) / (2 * h)
            worst = max(worst, relative_error(analytic[k].reshape(-1)[i], numeric))
    return worst
