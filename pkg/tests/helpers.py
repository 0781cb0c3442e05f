"""Shared test utilities: finite-difference gradient checking and small builders."""

import numpy as np

from mvgnn import autodiff as ad
from mvgnn.clifford import outermorphism_matrix, random_orthogonal


def random_rho(seed, det_sign):
    """8x8 algebra automorphism matrix of a random O(3) element."""
    return outermorphism_matrix(random_orthogonal(seed, det_sign))


def apply_rho(rho, arr):
    """Apply an 8x8 automorphism to a (..., 8) coefficient array."""
    return np.einsum("ab,...b->...a", rho, arr)


def fd_gradcheck(fn, tensors, step=1e-5, rtol=1e-6, atol=1e-8, rng=None):
    """Central finite-difference check of d fn / d tensor for each tensor.

    `fn` takes no arguments and returns a scalar Tensor built from `tensors`.
    Returns the max relative error across all probed entries.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    ad.backward(loss)
    max_rel = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        if rng is not None and n > 24:
            idx = rng.choice(n, size=24, replace=False)
        else:
            idx = np.arange(n)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            with ad.no_grad():
                up = float(fn().data)
            flat[i] = orig - step
            with ad.no_grad():
                down = float(fn().data)
            flat[i] = orig
            fd = (up - down) / (2 * step)
            an = analytic.reshape(-1)[i]
            scale = max(abs(fd), abs(an), atol / rtol)
            rel = abs(fd - an) / scale
            max_rel = max(max_rel, rel)
            assert rel <= rtol, f"gradient mismatch: analytic {an}, fd {fd}, rel {rel}"
    return max_rel
