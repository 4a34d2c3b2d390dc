"""
Exact N-boson dynamics on small lattices.

Occupation-number basis of the N-particle sector, the Bose-Hubbard-type
Hamiltonian with mean-field coupling lambda/(2N), Lanczos time stepping with a
dense-eigendecomposition cross-check, reduced one-particle density matrices,
and mean-field error functionals.

Basis states are occupation vectors (n_0, ..., n_{M-1}) with sum n = N,
enumerated in descending lexicographic order, so state 0 puts all N bosons on
site 0. Lookup is hash-free: states are encoded in mixed radix N+1 and found
by binary search.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb, factorial
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .krylov import expm_apply
from .lattice import ComplexField, LatticeGeometry, RegionMask, laplacian_matrix

__all__ = [
    "FockBasis",
    "ManyBodyState",
    "SparseHamiltonian",
    "OneBodyObservable",
    "ResourceCapError",
    "build_basis",
    "build_hamiltonian",
    "evolve_manybody",
    "product_state",
    "reduced_density",
    "dgamma_matrix",
    "mean_field_error",
]

DIMENSION_CAP = 5_000_000


class ResourceCapError(RuntimeError):
    pass


def _enumerate_occupations(N: int, M: int) -> np.ndarray:
    """All occupation vectors with sum N over M modes, descending lex order."""
    if M == 0:
        if N == 0:
            return np.zeros((1, 0), dtype=np.int64)
        return np.zeros((0, 0), dtype=np.int64)
    if M == 1:
        return np.array([[N]], dtype=np.int64)
    blocks = []
    for n0 in range(N, -1, -1):
        rest = _enumerate_occupations(N - n0, M - 1)
        head = np.full((rest.shape[0], 1), n0, dtype=np.int64)
        blocks.append(np.hstack([head, rest]))
    return np.vstack(blocks)


@dataclass
class FockBasis:
    """The N-particle occupation basis over M modes."""

    N: int
    M: int
    states: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.N < 0 or self.M < 1:
            raise ValueError("need N >= 0 and M >= 1")
        dim = comb(self.N + self.M - 1, self.N)
        if dim > DIMENSION_CAP:
            raise ResourceCapError(
                f"occupation basis dimension {dim} exceeds the cap {DIMENSION_CAP}"
            )
        if self.states is None:
            self.states = _enumerate_occupations(self.N, self.M)
        # mixed-radix keys, ascending-sorted view for binary-search lookup
        radix = self.N + 1
        powers = radix ** np.arange(self.M - 1, -1, -1, dtype=np.int64)
        self._powers = powers
        keys = self.states @ powers
        self._sort = np.argsort(keys)
        self._sorted_keys = keys[self._sort]

    @property
    def dim(self) -> int:
        return self.states.shape[0]

    def index_of(self, occupation: Sequence[int]) -> int:
        occ = np.asarray(occupation, dtype=np.int64)
        return int(self.lookup_keys(occ @ self._powers))

    def lookup_keys(self, keys: np.ndarray) -> np.ndarray:
        """Ordinals of the states with the given radix keys (must exist)."""
        pos = np.searchsorted(self._sorted_keys, keys)
        if np.any(pos >= self.dim) or np.any(self._sorted_keys[np.minimum(pos, self.dim - 1)] != keys):
            raise KeyError("occupation not in basis")
        return self._sort[pos]

    def keys_of_shift(self, create: int, destroy: int) -> np.ndarray:
        """Radix keys of states after a_create^dag a_destroy (unvalidated)."""
        base = self.states @ self._powers
        return base + self._powers[create] - self._powers[destroy]


def build_basis(N: int, M: int) -> FockBasis:
    return FockBasis(N, M)


@dataclass
class ManyBodyState:
    """Coefficient vector over an occupation basis."""

    basis: FockBasis
    coefficients: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.coefficients = np.ascontiguousarray(self.coefficients, dtype=np.complex128).ravel()
        if self.coefficients.size != self.basis.dim:
            raise ValueError("coefficient length does not match basis dimension")

    def norm(self) -> float:
        return float(np.linalg.norm(self.coefficients))

    def normalized(self) -> "ManyBodyState":
        return ManyBodyState(self.basis, self.coefficients / self.norm())

    def to_bytes(self) -> bytes:
        header = json.dumps({"N": self.basis.N, "M": self.basis.M},
                            separators=(",", ":"), sort_keys=True).encode()
        buf = np.empty(2 * self.coefficients.size, dtype="<f8")
        buf[0::2] = self.coefficients.real
        buf[1::2] = self.coefficients.imag
        return header + b"\n" + buf.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ManyBodyState":
        nl = data.index(b"\n")
        header = json.loads(data[:nl].decode())
        basis = FockBasis(header["N"], header["M"])
        buf = np.frombuffer(data[nl + 1:], dtype="<f8")
        return cls(basis, buf[0::2] + 1j * buf[1::2])


@dataclass
class SparseHamiltonian:
    """Hermitian CSR operator on an occupation basis."""

    matrix: sp.csr_matrix
    basis: FockBasis
    hermitian: bool = True

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v

    def hermiticity_defect(self) -> float:
        diff = (self.matrix - self.matrix.getH()).tocoo()
        return float(np.abs(diff.data).max()) if diff.nnz else 0.0


@dataclass
class OneBodyObservable:
    """M x M one-particle kernel, optionally confined to a region."""

    kernel: np.ndarray
    locality_mask: RegionMask | None = None

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.complex128)
        if self.kernel.ndim != 2 or self.kernel.shape[0] != self.kernel.shape[1]:
            raise ValueError("kernel must be a square matrix")
        if self.locality_mask is not None:
            keep = self.locality_mask.member.astype(float)
            self.kernel = keep[:, None] * self.kernel * keep[None, :]

    @property
    def operator_norm(self) -> float:
        return float(np.linalg.svd(self.kernel, compute_uv=False)[0])

    @classmethod
    def site_projector(cls, geometry: LatticeGeometry, site) -> "OneBodyObservable":
        M = geometry.num_sites
        k = np.zeros((M, M), dtype=np.complex128)
        i = geometry.site_to_index(site)
        k[i, i] = 1.0
        return cls(k)


# ---------------------------------------------------------------------------
# operator construction
# ---------------------------------------------------------------------------


def hopping_terms(basis: FockBasis, x: int, y: int):
    """Rows, columns and amplitudes of a_x^dag a_y on the basis (x != y)."""
    n = basis.states
    src = np.nonzero(n[:, y] > 0)[0]
    if src.size == 0:
        return src, src, np.empty(0)
    keys = (n[src] @ basis._powers) + basis._powers[x] - basis._powers[y]
    dst = basis.lookup_keys(keys)
    amp = np.sqrt(n[src, y] * (n[src, x] + 1.0))
    return dst, src, amp


def dgamma_matrix(basis: FockBasis, A: np.ndarray) -> sp.csr_matrix:
    """Second quantization sum_{x,y} A[x,y] a_x^dag a_y on the N-sector."""
    A = np.asarray(A, dtype=np.complex128)
    M = basis.M
    if A.shape != (M, M):
        raise ValueError("one-body kernel has wrong shape")
    rows, cols, vals = [], [], []
    diag = basis.states.astype(np.complex128) @ np.diag(A)
    rows.append(np.arange(basis.dim))
    cols.append(np.arange(basis.dim))
    vals.append(diag)
    for x in range(M):
        for y in range(M):
            if x == y or A[x, y] == 0.0:
                continue
            dst, src, amp = hopping_terms(basis, x, y)
            if src.size:
                rows.append(dst)
                cols.append(src)
                vals.append(A[x, y] * amp)
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(basis.dim, basis.dim),
    )
    mat.sum_duplicates()
    return mat


def build_hamiltonian(
    geometry: LatticeGeometry,
    lam: float,
    N: int,
    basis: FockBasis | None = None,
    include_onsite: bool = True,
) -> SparseHamiltonian:
    """Hopping plus on-site pair interaction (lambda / 2N) sum_x n_x (n_x - 1).

    The one-body part is the full -Delta including the diagonal 2d term; on the
    N-particle sector that diagonal only shifts the spectrum by 2dN (a global
    phase), which ``include_onsite=False`` drops for cross-checks.
    """
    M = geometry.num_sites
    if basis is None:
        basis = FockBasis(N, M)
    if basis.M != M or basis.N != N:
        raise ValueError("basis does not match geometry / particle number")
    one_body = laplacian_matrix(geometry)
    if not include_onsite:
        one_body = one_body - np.diag(np.diag(one_body))
    mat = dgamma_matrix(basis, one_body)
    occ = basis.states.astype(np.float64)
    pair = 0.5 * lam / N * np.sum(occ * (occ - 1.0), axis=1) if N > 0 else np.zeros(basis.dim)
    mat = mat + sp.diags(pair.astype(np.complex128))
    return SparseHamiltonian(mat.tocsr(), basis)


def number_operator(basis: FockBasis, region: RegionMask | None = None) -> np.ndarray:
    """Diagonal of sum_{x in region} n_x (whole lattice if no region)."""
    if region is None:
        weights = np.ones(basis.M)
    else:
        weights = region.member.astype(float)
    return basis.states @ weights


# ---------------------------------------------------------------------------
# states
# ---------------------------------------------------------------------------


def product_state(phi: ComplexField, N: int, basis: FockBasis | None = None) -> ManyBodyState:
    """The condensate power state: every boson in the one-particle mode phi."""
    M = phi.geometry.num_sites
    if abs(np.linalg.norm(phi.values) - 1.0) > 1e-12:
        raise ValueError("condensate wave function must be l^2 normalized")
    if basis is None:
        basis = FockBasis(N, M)
    occ = basis.states
    log_mult = np.zeros(basis.dim)
    # multinomial sqrt(N! / prod n_x!)
    for n in range(2, N + 1):
        log_mult -= np.sum(occ == n, axis=1) * float(np.log(factorial(n)))
    log_mult = 0.5 * (np.log(float(factorial(N))) + log_mult)
    with np.errstate(divide="ignore", invalid="ignore"):
        amp = np.exp(log_mult).astype(np.complex128)
    # product over sites of phi(x)^{n_x}
    vals = phi.values
    for x in range(M):
        nx = occ[:, x]
        if np.any(nx):
            amp = amp * (vals[x] ** nx)
    return ManyBodyState(basis, amp)


def reduced_density(psi: ManyBodyState) -> np.ndarray:
    """gamma(x, y) = <psi, a_y^dag a_x psi>; Hermitian, PSD, trace N."""
    basis = psi.basis
    c = psi.coefficients
    M = basis.M
    gamma = np.zeros((M, M), dtype=np.complex128)
    occ = basis.states
    probs = np.abs(c) ** 2
    for x in range(M):
        gamma[x, x] = np.sum(probs * occ[:, x])
    for x in range(M):
        for y in range(M):
            if x == y:
                continue
            # <a_y^dag a_x>: annihilate at x, create at y
            dst, src, amp = hopping_terms(basis, y, x)
            if src.size:
                gamma[x, y] = np.sum(np.conj(c[dst]) * amp * c[src])
    return gamma


def mean_field_error(
    psi: ManyBodyState,
    phi: ComplexField,
    O: OneBodyObservable,
) -> tuple[float, float]:
    """|Tr((gamma - N |phi><phi|) O)| and the same divided by N ||O||_op."""
    gamma = reduced_density(psi)
    N = psi.basis.N
    proj = N * np.outer(phi.values, np.conj(phi.values))
    raw = abs(np.trace((gamma - proj) @ O.kernel))
    return float(raw), float(raw / (N * O.operator_norm))


# ---------------------------------------------------------------------------
# time evolution
# ---------------------------------------------------------------------------

DENSE_PATH_CAP = 2000


@dataclass
class ManyBodyTrajectory:
    times: np.ndarray
    states: list[ManyBodyState] = field(repr=False)
    method: str = "krylov"

    def state_at(self, t: float) -> ManyBodyState:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9:
            raise ValueError(f"no stored state at t={t}")
        return self.states[i]


def evolve_manybody(
    psi0: ManyBodyState,
    H: SparseHamiltonian,
    T: float,
    dt: float,
    snapshot_stride: int = 1,
    method: str = "krylov",
    step_tol: float = 1e-10,
) -> ManyBodyTrajectory:
    """Propagate i d/dt psi = H psi with snapshots every ``snapshot_stride`` steps.

    ``krylov`` uses adaptive-subspace Lanczos stepping (local error below
    ``step_tol``, bisecting on failure); ``dense`` diagonalizes once and is
    available as a cross-check for dimensions up to DENSE_PATH_CAP.
    """
    if abs(psi0.norm() - 1.0) > 1e-12:
        raise ValueError("initial state must be normalized")
    if psi0.basis.dim != H.dim:
        raise ValueError("state and Hamiltonian dimensions differ")
    if dt <= 0 or T < 0:
        raise ValueError("need dt > 0 and T >= 0")
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be an integer multiple of dt")

    basis = psi0.basis
    times = [0.0]
    states = [ManyBodyState(basis, psi0.coefficients.copy())]

    if method == "dense":
        if H.dim > DENSE_PATH_CAP:
            raise ResourceCapError(
                f"dense propagation capped at dimension {DENSE_PATH_CAP}, got {H.dim}"
            )
        evals, evecs = np.linalg.eigh(H.matrix.toarray())
        coeff0 = evecs.conj().T @ psi0.coefficients
        for k in range(1, n_steps + 1):
            if k % snapshot_stride == 0 or k == n_steps:
                t = k * dt
                psi_t = evecs @ (np.exp(-1j * evals * t) * coeff0)
                times.append(t)
                states.append(ManyBodyState(basis, psi_t))
        return ManyBodyTrajectory(np.asarray(times), states, method="dense")

    if method != "krylov":
        raise ValueError("method must be 'krylov' or 'dense'")
    mat = H.matrix
    v = psi0.coefficients.copy()
    for k in range(1, n_steps + 1):
        v = expm_apply(mat.__matmul__, v, dt, tol=step_tol)
        if k % snapshot_stride == 0 or k == n_steps:
            times.append(k * dt)
            states.append(ManyBodyState(basis, v.copy()))
    return ManyBodyTrajectory(np.asarray(times), states, method="krylov")
