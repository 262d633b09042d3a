"""Shared fixtures and the finite-difference gradient checker."""

import numpy as np
import pytest


def finite_difference_check(build_loss, tensors, n_probes=50, eps=1e-5,
                            tol=1e-4, rng=None):
    """Compare analytic gradients against central finite differences.

    ``build_loss`` maps nothing to a fresh scalar loss Tensor (it must reread
    the current values of ``tensors``, which this helper perturbs in place).
    ``tensors`` are the leaves whose gradients are probed; each must have
    requires_grad set. Probes are random scalar positions across all leaves.
    Returns the worst relative error seen.
    """
    rng = np.random.default_rng(rng)
    for t in tensors:
        t.zero_grad()
    loss = build_loss()
    loss.backward()
    grads = [np.array(t.grad, copy=True) for t in tensors]

    worst = 0.0
    sizes = np.array([t.data.size for t in tensors])
    probs = sizes / sizes.sum()
    for _ in range(n_probes):
        ti = int(rng.choice(len(tensors), p=probs))
        t = tensors[ti]
        flat = t.data.reshape(-1)
        j = int(rng.integers(flat.size))
        keep = flat[j]
        flat[j] = keep + eps
        up = build_loss().item()
        flat[j] = keep - eps
        down = build_loss().item()
        flat[j] = keep
        numeric = (up - down) / (2 * eps)
        analytic = grads[ti].reshape(-1)[j]
        denom = max(abs(numeric), abs(analytic), 1e-6)
        rel = abs(numeric - analytic) / denom
        worst = max(worst, rel)
        assert rel < tol, (
            f"gradient mismatch at tensor {ti} position {j}: "
            f"analytic {analytic:.3e} vs numeric {numeric:.3e} (rel {rel:.2e})"
        )
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
