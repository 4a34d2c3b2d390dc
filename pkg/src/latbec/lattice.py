"""
Finite lattice geometry and the shared linear-algebra backbone.

Cubic boxes in d dimensions with periodic or open boundaries, centered site
coordinates, the discrete Laplacian with kernel -1 on bonds and +degree on the
diagonal, Euclidean balls with minimum-image distance, l^p norms, and the
unitary discrete Fourier transform used by all spectral propagators.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.fft

__all__ = [
    "LatticeGeometry",
    "ComplexField",
    "RegionMask",
    "apply_laplacian",
    "dispersion_omega",
    "ball_mask",
    "region_enlargement",
    "lp_norm",
    "kappa",
    "kappa_schur",
    "fourier_transform",
]

# FFT worker threads; results are deterministic regardless of the setting.
_FFT_WORKERS = 2


@dataclass(frozen=True)
class LatticeGeometry:
    """A d-dimensional box of extents L[0..d) with centered coordinates.

    Site coordinates run over [-floor(L/2), ceil(L/2)) per axis and sites are
    ordered row-major over axes 0..d-1, so index 0 is the most negative corner.
    """

    extents: tuple[int, ...]
    boundary: str = "periodic"

    def __post_init__(self):
        if isinstance(self.extents, Iterable) and not isinstance(self.extents, tuple):
            object.__setattr__(self, "extents", tuple(int(x) for x in self.extents))
        if len(self.extents) < 1 or any(L < 1 for L in self.extents):
            raise ValueError(f"extents must be positive, got {self.extents}")
        if self.boundary not in ("periodic", "open"):
            raise ValueError(f"boundary must be 'periodic' or 'open', got {self.boundary!r}")

    @property
    def dimension(self) -> int:
        return len(self.extents)

    @property
    def num_sites(self) -> int:
        return int(np.prod(self.extents))

    @property
    def coordinate_offsets(self) -> tuple[int, ...]:
        """Per axis, the coordinate of array index 0 (i.e. -floor(L/2))."""
        return tuple(-(L // 2) for L in self.extents)

    def coordinates(self) -> np.ndarray:
        """(num_sites, d) integer array of centered site coordinates, in index order."""
        axes = [np.arange(L) + off for L, off in zip(self.extents, self.coordinate_offsets)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def site_to_index(self, coords: Sequence[int]) -> int:
        coords = tuple(int(c) for c in coords)
        if len(coords) != self.dimension:
            raise ValueError("coordinate dimension mismatch")
        idx = 0
        for c, L, off in zip(coords, self.extents, self.coordinate_offsets):
            k = c - off
            if not 0 <= k < L:
                raise ValueError(f"coordinate {coords} outside the box")
            idx = idx * L + k
        return idx

    def index_to_site(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < self.num_sites:
            raise ValueError("site index out of range")
        out = []
        for L, off in zip(reversed(self.extents), reversed(self.coordinate_offsets)):
            out.append(index % L + off)
            index //= L
        return tuple(reversed(out))

    def distances_from(self, center: Sequence[int]) -> np.ndarray:
        """Euclidean distance of every site from ``center``.

        Periodic boxes use the minimum over periodic images per axis.
        """
        center = np.asarray(center, dtype=np.int64)
        if center.shape != (self.dimension,):
            raise ValueError("center dimension mismatch")
        delta = self.coordinates() - center[None, :]
        if self.boundary == "periodic":
            L = np.asarray(self.extents, dtype=np.int64)
            delta = np.abs(delta)
            delta = np.minimum(delta, L[None, :] - delta)
        return np.sqrt(np.sum(delta.astype(np.float64) ** 2, axis=-1))

    def neighbor_counts(self) -> np.ndarray:
        """Number of nearest neighbors per site (2d periodic, <=2d open)."""
        if self.boundary == "periodic":
            # an axis of extent 1 contributes no bonds; extent 2 only one
            deg = 0
            for L in self.extents:
                deg += 0 if L == 1 else (1 if L == 2 else 2)
            return np.full(self.num_sites, deg, dtype=np.int64)
        counts = np.zeros(self.extents, dtype=np.int64)
        for ax, L in enumerate(self.extents):
            if L == 1:
                continue
            sl_lo = [slice(None)] * self.dimension
            sl_hi = [slice(None)] * self.dimension
            sl_lo[ax] = slice(0, L - 1)
            sl_hi[ax] = slice(1, L)
            counts[tuple(sl_lo)] += 1
            counts[tuple(sl_hi)] += 1
        return counts.ravel()


@dataclass
class ComplexField:
    """One complex amplitude per lattice site."""

    geometry: LatticeGeometry
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.complex128).ravel()
        if self.values.size != self.geometry.num_sites:
            raise ValueError(
                f"field has {self.values.size} amplitudes for "
                f"{self.geometry.num_sites} sites"
            )

    @classmethod
    def zeros(cls, geometry: LatticeGeometry) -> "ComplexField":
        return cls(geometry, np.zeros(geometry.num_sites, dtype=np.complex128))

    @classmethod
    def delta(cls, geometry: LatticeGeometry, site: Sequence[int] | None = None) -> "ComplexField":
        """Point mass at ``site`` (default: the origin)."""
        f = cls.zeros(geometry)
        site = site if site is not None else (0,) * geometry.dimension
        f.values[geometry.site_to_index(site)] = 1.0
        return f

    def shaped(self) -> np.ndarray:
        return self.values.reshape(self.geometry.extents)

    def copy(self) -> "ComplexField":
        return ComplexField(self.geometry, self.values.copy())

    def norm(self, p: float = 2, mask: Optional["RegionMask"] = None) -> float:
        return lp_norm(self, p, mask)

    # -- serialization: JSON header line + little-endian interleaved float64 --

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {"d": self.geometry.dimension, "L": list(self.geometry.extents),
             "boundary": self.geometry.boundary},
            separators=(",", ":"), sort_keys=True,
        ).encode()
        buf = np.empty(2 * self.values.size, dtype="<f8")
        buf[0::2] = self.values.real
        buf[1::2] = self.values.imag
        return header + b"\n" + buf.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ComplexField":
        nl = data.index(b"\n")
        header = json.loads(data[:nl].decode())
        geom = LatticeGeometry(tuple(header["L"]), header["boundary"])
        buf = np.frombuffer(data[nl + 1:], dtype="<f8")
        if buf.size != 2 * geom.num_sites:
            raise ValueError("field payload size does not match header")
        return cls(geom, buf[0::2] + 1j * buf[1::2])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ComplexField":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def to_csv(self, path) -> None:
        coords = self.geometry.coordinates()
        with open(path, "w") as fh:
            fh.write(",".join(f"x{i}" for i in range(self.geometry.dimension)) + ",re,im\n")
            for row, v in zip(coords, self.values):
                fh.write(",".join(str(int(c)) for c in row) + f",{v.real!r},{v.imag!r}\n")


@dataclass
class RegionMask:
    """Boolean membership per site."""

    geometry: LatticeGeometry
    member: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.member = np.ascontiguousarray(self.member, dtype=bool).ravel()
        if self.member.size != self.geometry.num_sites:
            raise ValueError("mask length does not match site count")

    @property
    def size(self) -> int:
        return int(self.member.sum())

    def complement(self) -> "RegionMask":
        return RegionMask(self.geometry, ~self.member)

    def indices(self) -> np.ndarray:
        return np.nonzero(self.member)[0]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def apply_laplacian(f: ComplexField) -> ComplexField:
    """Apply -Delta: kernel -1 on nearest-neighbor bonds, +degree on the diagonal.

    Row sums vanish for both boundary conventions, so constants are in the kernel.
    """
    geom = f.geometry
    arr = f.shaped()
    out = geom.neighbor_counts().reshape(geom.extents).astype(np.complex128) * arr
    for ax, L in enumerate(geom.extents):
        if L == 1:
            continue
        if geom.boundary == "periodic":
            if L == 2:
                # single bond per site pair along this axis
                out -= np.roll(arr, 1, axis=ax)
            else:
                out -= np.roll(arr, 1, axis=ax)
                out -= np.roll(arr, -1, axis=ax)
        else:
            lo = [slice(None)] * geom.dimension
            hi = [slice(None)] * geom.dimension
            lo[ax] = slice(0, L - 1)
            hi[ax] = slice(1, L)
            out[tuple(lo)] -= arr[tuple(hi)]
            out[tuple(hi)] -= arr[tuple(lo)]
    return ComplexField(geom, out.ravel())


def laplacian_matrix(geometry: LatticeGeometry) -> np.ndarray:
    """Dense M x M matrix of -Delta (small lattices only)."""
    M = geometry.num_sites
    out = np.zeros((M, M), dtype=np.complex128)
    for j in range(M):
        e = ComplexField.zeros(geometry)
        e.values[j] = 1.0
        out[:, j] = apply_laplacian(e).values
    return out


def dispersion_omega(k: Sequence[float], geometry: LatticeGeometry | None = None) -> float:
    """Eigenvalue omega(k) = 2 sum_j (1 - cos k_j) of -Delta at wavevector k.

    If a geometry is given, k must lie on its reciprocal grid 2*pi*m/L.
    """
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    if geometry is not None:
        if k.size != geometry.dimension:
            raise ValueError("wavevector dimension mismatch")
        for kj, L in zip(k, geometry.extents):
            m = kj * L / (2 * np.pi)
            if abs(m - round(m)) > 1e-9:
                raise ValueError(f"wavevector component {kj} off the 2*pi*m/{L} grid")
    return float(2.0 * np.sum(1.0 - np.cos(k)))


def ball_mask(geometry: LatticeGeometry, r: float, center: Sequence[int] | None = None) -> RegionMask:
    """Sites within Euclidean distance r of center (minimum image if periodic)."""
    if r < 0:
        raise ValueError("ball radius must be nonnegative")
    center = center if center is not None else (0,) * geometry.dimension
    dist = geometry.distances_from(center)
    return RegionMask(geometry, dist <= r + 1e-9)


def region_enlargement(region: RegionMask, rho: float) -> RegionMask:
    """All sites within distance rho of the region."""
    if rho < 0:
        raise ValueError("enlargement distance must be nonnegative")
    geom = region.geometry
    idx = region.indices()
    if idx.size == 0:
        return RegionMask(geom, np.zeros(geom.num_sites, dtype=bool))
    best = np.full(geom.num_sites, np.inf)
    coords = geom.coordinates()
    for j in idx:
        best = np.minimum(best, geom.distances_from(coords[j]))
    return RegionMask(geom, best <= rho + 1e-9)


def lp_norm(f: ComplexField, p: float, mask: Optional[RegionMask] = None) -> float:
    """l^p norm over the masked sites (the whole lattice if no mask)."""
    if p < 1:
        raise ValueError(f"l^p norm needs p >= 1, got {p}")
    vals = np.abs(f.values if mask is None else f.values[mask.member])
    if vals.size == 0:
        return 0.0
    if np.isinf(p):
        return float(vals.max())
    if p == 2:
        return float(np.sqrt(np.sum(vals * vals)))
    return float(np.sum(vals ** p) ** (1.0 / p))


def kappa(d: int) -> float:
    """Hopping velocity bound 2d of the discrete Laplacian."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    return 2.0 * d


def kappa_schur(geometry: LatticeGeometry) -> float:
    """sup_x sum_y |Delta_{x,y}| |x-y| evaluated on the actual kernel.

    Equals 2d on any periodic box with all extents >= 3. Dense evaluation,
    small boxes only.
    """
    kernel = np.abs(laplacian_matrix(geometry))
    coords = geometry.coordinates()
    best = 0.0
    for x in range(geometry.num_sites):
        dist = geometry.distances_from(coords[x])
        best = max(best, float(kernel[x] @ dist))
    return best


def fourier_transform(f: ComplexField, direction: str = "forward") -> ComplexField:
    """Unitary DFT per axis; ``inverse`` undoes ``forward`` to round-off."""
    if f.geometry.boundary != "periodic":
        raise ValueError("fourier_transform requires a periodic box")
    if direction == "forward":
        out = scipy.fft.fftn(f.shaped(), norm="ortho", workers=_FFT_WORKERS)
    elif direction == "inverse":
        out = scipy.fft.ifftn(f.shaped(), norm="ortho", workers=_FFT_WORKERS)
    else:
        raise ValueError("direction must be 'forward' or 'inverse'")
    return ComplexField(f.geometry, out.ravel())


def omega_grid(geometry: LatticeGeometry) -> np.ndarray:
    """omega(k) on the full reciprocal grid, shaped like the box."""
    if geometry.boundary != "periodic":
        raise ValueError("reciprocal grid requires a periodic box")
    parts = []
    for L in geometry.extents:
        k = 2.0 * np.pi * np.fft.fftfreq(L)
        parts.append(2.0 * (1.0 - np.cos(k)))
    out = np.zeros(geometry.extents)
    for ax, p in enumerate(parts):
        shape = [1] * geometry.dimension
        shape[ax] = geometry.extents[ax]
        out = out + p.reshape(shape)
    return out
