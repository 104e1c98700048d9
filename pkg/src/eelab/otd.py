"""Optimally time-dependent (OTD) basis evolution and reduced operators.

The r orthonormal tangent modes evolve by

    dv_i/dt = L v_i - <L v_i, v_i> v_i
              - sum_{k<i} (<L v_i, v_k> + <L v_k, v_i>) v_k,

a lower-triangular coupling: the first r' modes of an r-mode system
evolve autonomously, so nested subspace runs agree exactly.  The basis
continuously aligns with the transiently most unstable directions; the
projected operator L_r = V^T L V and the eigenvalues of its symmetric
part measure instantaneous growth within the subspace.

Everything here is generic over the mode representation: testbed modes
are real vectors with the Euclidean inner product, Kolmogorov modes are
spectral tangent fields (full arrays or retained-mode compressions)
with the L2 inner product of the underlying real fields.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import BasisDegeneracyError
from .flow_kolmogorov import GridSpec
from .surrogate import RetainedModes

TWO_PI = 2.0 * np.pi

_COLLAPSE_NORM = 1e-8
_MAX_DEVIATION = 1e-3


# ---------------------------------------------------------------------------
# inner-product spaces


class EuclideanSpace:
    """Plain dot product over flat real vectors."""

    def inner(self, a, b):
        return float(np.dot(a, b))

    def pairwise(self, A, B):
        """Matrix of inner products between rows of A and rows of B."""
        return A @ B.T


class SpectralSpace:
    """L2 inner product of real fields stored as spectral coefficients.

    Works for full (nx, ny, 2) arrays and for retained-mode compressions
    alike: <a, b> = (2 pi)^2 * Re sum_k a_k conj(b_k).
    """

    def inner(self, a, b):
        return TWO_PI**2 * float(np.real(np.sum(a * np.conj(b))))

    def pairwise(self, A, B):
        Af = A.reshape(A.shape[0], -1)
        Bf = B.reshape(B.shape[0], -1)
        return TWO_PI**2 * np.real(Af @ Bf.conj().T)


@dataclass(frozen=True)
class OtdBasis:
    """Orthonormal mode stack: modes[i] is the i-th tangent direction."""

    modes: np.ndarray
    time: float
    space: object

    @property
    def r(self):
        return self.modes.shape[0]

    def gram(self):
        return self.space.pairwise(self.modes, self.modes)

    def orthonormality_deviation(self):
        g = self.gram()
        return float(np.max(np.abs(g - np.eye(self.r))))


@dataclass(frozen=True)
class ReducedOperator:
    """Projected operator L_r = V^T L V with its symmetric part."""

    L_r: np.ndarray
    S_r: np.ndarray
    sigma: np.ndarray
    time: float

    def __post_init__(self):
        if not np.allclose(self.S_r, self.S_r.T):
            raise ValueError("S_r must be symmetric")
        if np.any(np.diff(self.sigma) > 1e-12):
            raise ValueError("sigma must be sorted descending")


# ---------------------------------------------------------------------------
# initialization


def init_basis_kolmogorov(r: int, grid: GridSpec) -> OtdBasis:
    """Shear modes v_i = (1 / (pi sqrt 2)) (sin(i y), 0), i = 1..r.

    Divergence-free (x-independent streamwise fields), mutually
    orthogonal and L2-normalized on the 2 pi torus.
    """
    _check_r(r, grid)
    coeffs = np.zeros((r,) + grid.shape, dtype=np.complex128)
    amp = 1.0 / (np.pi * np.sqrt(2.0))
    for i in range(1, r + 1):
        coeffs[i - 1, 0, i, 0] = -0.5j * amp
        coeffs[i - 1, 0, grid.ny - i, 0] = 0.5j * amp
    return OtdBasis(modes=coeffs, time=0.0, space=SpectralSpace())


def init_basis_kolmogorov_modes(r: int, modes: RetainedModes,
                                grid: GridSpec) -> OtdBasis:
    """Same initialization compressed onto retained scalars."""
    _check_r(r, grid)
    if r > modes.K:
        raise ValueError(f"r = {r} exceeds the retained band K = {modes.K}")
    full = init_basis_kolmogorov(r, grid)
    return OtdBasis(modes=modes.compress(full.modes), time=0.0,
                    space=SpectralSpace())


def _check_r(r: int, grid: GridSpec):
    if r < 1 or r > min(grid.nx, grid.ny) - 1:
        raise ValueError(f"r = {r} outside [1, min(nx, ny) - 1]")
    if r > grid.kcut[1]:
        raise ValueError(f"r = {r} exceeds the dealias cutoff {grid.kcut[1]}")


def init_basis_generic(r: int, dim: int, seed: int) -> OtdBasis:
    """Orthonormalized seeded random basis for testbed systems."""
    if r > dim:
        raise ValueError("r must not exceed the system dimension")
    rng = np.random.default_rng(seed)
    mat = rng.standard_normal((dim, r))
    q, rr = np.linalg.qr(mat)
    # fix signs so the basis is a deterministic function of the seed
    q = q * np.sign(np.diag(rr))
    return OtdBasis(modes=q.T.copy(), time=0.0, space=EuclideanSpace())


# ---------------------------------------------------------------------------
# evolution


def evolve_basis(basis: OtdBasis, apply_l: Callable, dt: float) -> OtdBasis:
    """One RK4 step of the OTD equations.

    `apply_l(t, modes) -> L modes` is evaluated at each RK4 stage, so a
    time-interpolated operator is supported.  No re-orthonormalization
    happens here; callers apply `orthonormalize` on their schedule.
    """
    t = basis.time
    space = basis.space
    v = basis.modes

    def rate(tau, V):
        LV = apply_l(tau, V)
        G = space.pairwise(LV, V)          # G[i, k] = <L v_i, v_k>
        M = np.triu(G + G.T, 1) + np.diag(np.diag(G))
        return LV - np.tensordot(M.T, V, axes=(1, 0))

    k1 = rate(t, v)
    k2 = rate(t + 0.5 * dt, v + 0.5 * dt * k1)
    k3 = rate(t + 0.5 * dt, v + 0.5 * dt * k2)
    k4 = rate(t + dt, v + dt * k3)
    new = v + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return OtdBasis(modes=new, time=t + dt, space=space)


def orthonormalize(basis: OtdBasis) -> OtdBasis:
    """Modified Gram-Schmidt preserving mode order.

    The first mode only gets renormalized, so the leading direction is
    unchanged.  A collapsing mode (norm < 1e-8 before normalization)
    aborts rather than being re-seeded.
    """
    space = basis.space
    v = np.array(basis.modes, copy=True)
    r = basis.r
    for i in range(r):
        for k in range(i):
            v[i] = v[i] - space.inner(v[i], v[k]) * v[k]
        norm = np.sqrt(space.inner(v[i], v[i]))
        if norm < _COLLAPSE_NORM:
            raise BasisDegeneracyError(
                f"mode {i} collapsed (norm {norm:.3g}) at t = {basis.time:.6g}"
            )
        v[i] = v[i] / norm
    out = OtdBasis(modes=v, time=basis.time, space=space)
    dev = out.orthonormality_deviation()
    if dev > _MAX_DEVIATION:
        raise BasisDegeneracyError(
            f"orthonormality deviation {dev:.3g} after correction "
            f"at t = {basis.time:.6g}"
        )
    return out


def reduced_operator(basis: OtdBasis, Lv: np.ndarray,
                     time: Optional[float] = None) -> ReducedOperator:
    """Project the operator action onto the basis: (L_r)_ij = <v_i, L v_j>."""
    L_r = basis.space.pairwise(basis.modes, Lv)
    S_r = 0.5 * (L_r + L_r.T)
    sigma = np.linalg.eigvalsh(S_r)[::-1]
    return ReducedOperator(L_r=L_r, S_r=S_r, sigma=sigma,
                           time=basis.time if time is None else time)


@dataclass
class OtdRun:
    """Sampled output of a continuous OTD evolution."""

    times: np.ndarray
    L_r: np.ndarray                 # (n_samples, r, r)
    max_orthonormality_deviation: float
    final_basis: OtdBasis
    basis_snapshots: Optional[list] = None
    snapshot_times: Optional[np.ndarray] = None

    def operators(self):
        return [reduced_operator_from_matrix(self.L_r[i], self.times[i])
                for i in range(len(self.times))]


def reduced_operator_from_matrix(L_r, time) -> ReducedOperator:
    S_r = 0.5 * (L_r + L_r.T)
    sigma = np.linalg.eigvalsh(S_r)[::-1]
    return ReducedOperator(L_r=L_r, S_r=S_r, sigma=sigma, time=time)


def run_otd(basis: OtdBasis, apply_l: Callable, times,
            substeps: int = 1, reorth_every: int = 1,
            record_basis_until: float = -np.inf) -> OtdRun:
    """Evolve a basis across a uniform sample grid, recording L_r.

    `times` is the sample grid (the basis time must equal times[0]);
    each interval is covered by `substeps` RK4 steps; modified
    Gram-Schmidt runs every `reorth_every` intervals.  L_r is recorded
    at every sample time from the same operator evaluations that drive
    the step.  Basis snapshots are kept while t <= record_basis_until.
    """
    times = np.asarray(times, dtype=float)
    if abs(basis.time - times[0]) > 1e-9:
        raise ValueError("basis time must match the first sample time")
    basis = orthonormalize(basis)
    n = len(times)
    r = basis.r
    L_r = np.empty((n, r, r))
    max_dev = basis.orthonormality_deviation()
    snaps = []
    snap_times = []

    def record(idx, b):
        Lv = apply_l(times[idx], b.modes)
        L_r[idx] = b.space.pairwise(b.modes, Lv)

    record(0, basis)
    if times[0] <= record_basis_until:
        snaps.append(np.array(basis.modes, copy=True))
        snap_times.append(times[0])
    for k in range(n - 1):
        dt = (times[k + 1] - times[k]) / substeps
        for _ in range(substeps):
            basis = evolve_basis(basis, apply_l, dt)
        if (k + 1) % reorth_every == 0:
            basis = orthonormalize(basis)
        max_dev = max(max_dev, basis.orthonormality_deviation())
        record(k + 1, basis)
        if times[k + 1] <= record_basis_until:
            snaps.append(np.array(basis.modes, copy=True))
            snap_times.append(times[k + 1])
    return OtdRun(
        times=times, L_r=L_r, max_orthonormality_deviation=max_dev,
        final_basis=basis,
        basis_snapshots=snaps if snaps else None,
        snapshot_times=np.array(snap_times) if snap_times else None,
    )


def subspace_distance(modes_a, modes_b, space) -> float:
    """Frobenius distance between the two spanned-subspace projectors.

    For orthonormal stacks V1, V2: |P1 - P2|_F^2 = 2 r - 2 |V1^T V2|_F^2.
    """
    cross = space.pairwise(modes_a, modes_b)
    r = modes_a.shape[0]
    val = 2.0 * r - 2.0 * float(np.sum(cross**2))
    return float(np.sqrt(max(val, 0.0)))


def lti_operator(A):
    """Operator callable for an LTI testbed: (t, V) -> V A^T."""
    A = np.asarray(A, dtype=float)
    return lambda t, V: V @ A.T


# ---------------------------------------------------------------------------
# persistence

_OTDB_MAGIC = b"OTDB"
_OTDB_VERSION = 1
_OTDB_HEADER = struct.Struct("<4sIIIId")


def save_basis(path, basis: OtdBasis, grid: GridSpec,
               modes: Optional[RetainedModes] = None):
    """Checkpoint a spectral basis with the FlowState coefficient layout.

    Compressed bases are expanded to full coefficients first (`modes`
    must then be given).
    """
    arr = basis.modes
    if arr.ndim == 2:
        if modes is None:
            raise ValueError("retained-mode basis needs `modes` to expand")
        arr = modes.decompress(arr, grid)
    with open(path, "wb") as fh:
        fh.write(_OTDB_HEADER.pack(_OTDB_MAGIC, _OTDB_VERSION, basis.r,
                                   grid.nx, grid.ny, basis.time))
        np.ascontiguousarray(arr, dtype=np.complex128).tofile(fh)


def load_basis(path) -> OtdBasis:
    with open(path, "rb") as fh:
        magic, version, r, nx, ny, time = _OTDB_HEADER.unpack(
            fh.read(_OTDB_HEADER.size))
        if magic != _OTDB_MAGIC:
            raise ValueError(f"{path} is not an OTDB checkpoint")
        if version != _OTDB_VERSION:
            raise ValueError(f"unsupported OTDB version {version}")
        arr = np.fromfile(fh, dtype=np.complex128, count=r * nx * ny * 2)
    return OtdBasis(modes=arr.reshape(r, nx, ny, 2), time=time,
                    space=SpectralSpace())
