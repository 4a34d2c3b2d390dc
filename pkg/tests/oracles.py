"""Independent brute-force reference implementations used by the tests.

Everything here is built on the unsymmetrized product space of M per-site
oscillators truncated at occupation N: operators are Kronecker chains of dense
(N+1)-dimensional ladder matrices, states are embedded by placing occupation
coefficients at the corresponding product-basis indices. This path shares no
code with the package's occupation-basis algebra.
"""

import numpy as np


def site_ladder(nmax: int) -> np.ndarray:
    """Dense annihilation matrix on the (nmax+1)-dimensional oscillator."""
    a = np.zeros((nmax + 1, nmax + 1), dtype=np.complex128)
    for n in range(1, nmax + 1):
        a[n - 1, n] = np.sqrt(n)
    return a


def chain_operator(M: int, nmax: int, site: int, op: np.ndarray) -> np.ndarray:
    eye = np.eye(nmax + 1, dtype=np.complex128)
    out = np.array([[1.0 + 0.0j]])
    for j in range(M):
        out = np.kron(out, op if j == site else eye)
    return out


def annihilators(M: int, nmax: int) -> list[np.ndarray]:
    a = site_ladder(nmax)
    return [chain_operator(M, nmax, x, a) for x in range(M)]


def product_index(occupation, nmax: int) -> int:
    idx = 0
    for n in occupation:
        idx = idx * (nmax + 1) + int(n)
    return idx


def embed(basis, coefficients: np.ndarray, nmax: int | None = None) -> np.ndarray:
    """Lift an occupation-basis vector into the product space."""
    nmax = basis.N if nmax is None else nmax
    dim = (nmax + 1) ** basis.M
    out = np.zeros(dim, dtype=np.complex128)
    for occ, c in zip(basis.states, coefficients):
        out[product_index(occ, nmax)] = c
    return out


def dense_dgamma(A: np.ndarray, ops: list[np.ndarray]) -> np.ndarray:
    """sum_{x,y} A[x,y] a_x^dag a_y in the product space."""
    M = len(ops)
    dim = ops[0].shape[0]
    out = np.zeros((dim, dim), dtype=np.complex128)
    for x in range(M):
        for y in range(M):
            if A[x, y] != 0.0:
                out += A[x, y] * (ops[x].conj().T @ ops[y])
    return out


def dense_hamiltonian(geometry, lam: float, N: int, ops: list[np.ndarray]) -> np.ndarray:
    from latbec.lattice import laplacian_matrix

    out = dense_dgamma(laplacian_matrix(geometry), ops)
    for a in ops:
        adag = a.conj().T
        out += 0.5 * lam / N * (adag @ adag @ a @ a)
    return out


def dense_rdm(vec: np.ndarray, ops: list[np.ndarray]) -> np.ndarray:
    """gamma(x,y) = <psi, a_y^dag a_x psi> via dense ladder matrices."""
    M = len(ops)
    out = np.zeros((M, M), dtype=np.complex128)
    for x in range(M):
        ax = ops[x] @ vec
        for y in range(M):
            out[x, y] = np.vdot(ops[y] @ vec, ax)
    return out
