"""Shared test utilities: finite-difference gradient oracle, random rotations."""

import numpy as np

from promptraj import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_grad(build_loss, x0: np.ndarray, rtol: float = 1e-4) -> float:
    """Compare analytic grad of ``build_loss`` (Tensor -> scalar Tensor) with
    central finite differences. Returns the max relative error."""
    leaf = ad.Tensor(x0.copy(), requires_grad=True)
    loss = build_loss(leaf)
    ad.backward(loss)
    analytic = leaf.grad
    assert analytic is not None, "no gradient reached the leaf"

    def f(arr):
        return float(build_loss(ad.Tensor(arr)).data)

    numeric = numeric_grad(f, x0.copy())
    denom = np.maximum(np.abs(numeric), 1.0)
    err = float(np.max(np.abs(analytic - numeric) / denom))
    assert err < rtol, f"gradient mismatch: max relative error {err}"
    return err


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via QR with sign fix."""
    a = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] *= -1
    return q
