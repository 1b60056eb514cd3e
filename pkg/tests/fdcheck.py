"""Central finite-difference gradient oracle used across the test suite."""

import numpy as np

from physpan.autodiff import Tape, Tensor

H = 1e-5


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build_loss, wrt: list[Tensor], h: float = H, floor: float = 1e-3,
                    max_elements: int | None = None, seed: int = 0) -> float:
    """Worst relative error between backprop and central differences.

    `build_loss` must rebuild the scalar loss from the current .data of the
    `wrt` tensors on every call. For large tensors a deterministic random
    subset of `max_elements` entries per tensor is probed.
    """
    for t in wrt:
        t.zero_grad()
        t.requires_grad = True
    with Tape():
        loss = build_loss()
        loss.backward()
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in wrt]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor, grad in zip(wrt, grads):
        flat = tensor.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss().item()
            flat[i] = orig - h
            down = build_loss().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, rel_err(grad.reshape(-1)[i], numeric, floor))
    return worst
