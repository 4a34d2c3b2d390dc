"""Lanczos propagation of exp(-i t H) v for Hermitian H.

Shared by the N-boson propagator and the occupation-basis rotations of the
excitation map. Subspace size adapts to a per-step error estimate; if the
estimate cannot be met at the maximum subspace size the step is bisected.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg


class KrylovBreakdownError(RuntimeError):
    pass


def _lanczos_step(matvec, v: np.ndarray, t: float, tol: float, max_m: int):
    """One expm application. Returns (result, m, err_estimate) or None if the
    estimate never met tol (caller then bisects the step)."""
    norm_v = np.linalg.norm(v)
    if norm_v == 0.0:
        return v.copy(), 0, 0.0
    V = [v / norm_v]
    alphas: list[float] = []
    betas: list[float] = []
    w = None
    for m in range(1, max_m + 1):
        w = matvec(V[-1])
        a = np.vdot(V[-1], w).real
        alphas.append(a)
        w = w - a * V[-1]
        if len(V) > 1:
            w = w - betas[-1] * V[-2]
        # full reorthogonalization keeps the basis clean at these sizes
        for u in V:
            w = w - np.vdot(u, w) * u
        b = np.linalg.norm(w)
        T = np.diag(alphas).astype(np.complex128)
        if len(betas):
            off = np.array(betas)
            T += np.diag(off, 1) + np.diag(off, -1)
        expT = scipy.linalg.expm(-1j * t * T)
        y = expT[:, 0]
        err = abs(t) * b * abs(y[-1])
        if b < 1e-14:
            # invariant subspace: the result is exact
            out = norm_v * np.sum([yi * Vi for yi, Vi in zip(y, V)], axis=0)
            return out, m, 0.0
        if err < tol:
            out = norm_v * np.sum([yi * Vi for yi, Vi in zip(y, V)], axis=0)
            return out, m, float(err)
        betas.append(b)
        V.append(w / b)
    return None


def expm_apply(matvec, v: np.ndarray, t: float, tol: float = 1e-12,
               max_m: int = 40, max_bisections: int = 30) -> np.ndarray:
    """Compute exp(-i t H) v with H Hermitian, given only H's action.

    The step is recursively halved when the Lanczos error estimate cannot be
    driven below ``tol`` within ``max_m`` basis vectors.
    """
    if t == 0.0:
        return v.copy()
    res = _lanczos_step(matvec, v, t, tol, max_m)
    if res is not None:
        return res[0]
    if max_bisections == 0:
        raise KrylovBreakdownError("Krylov step failed to converge at minimal step size")
    half = expm_apply(matvec, v, t / 2, tol / 2, max_m, max_bisections - 1)
    return expm_apply(matvec, half, t / 2, tol / 2, max_m, max_bisections - 1)
