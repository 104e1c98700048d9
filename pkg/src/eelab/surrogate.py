"""Data-driven surrogate of the flow dynamics on retained spectral modes.

The projected 2D Navier-Stokes right side is exactly quadratic in the
spectral velocity coefficients, so the surrogate fits, per retained
output mode k (|kx|, |ky| <= K), a ridge regression of the estimated
time derivative against a constant feature (captures the forcing), the
mode's own coefficients (the linear, diagonal-in-k part) and all
convolution-compatible products uhat(p) uhat(q) with p + q = k, both
retained and nonzero.  Only canonical modes (upper half plane) are fit;
conjugate mirroring makes the learned map send real fields to real
fields by construction.

All products are holomorphic (no conjugates), so the Jacobian of the
learned map is complex-linear and affine in the state; this is what the
OTD fast path exploits.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import IllConditionedError, InsufficientDataError
from .flow_kolmogorov import FlowParams, FlowState, GridSpec, Trajectory

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# retained-mode bookkeeping


class RetainedModes:
    """Index machinery for the box |kx| <= K, |ky| <= K of retained modes.

    Scalar features are indexed 2 * mode + component.  Canonical modes
    cover the closed upper half plane (ky > 0, or ky = 0 and kx >= 0);
    every other retained mode is the conjugate mirror of a canonical one.
    """

    def __init__(self, K: int):
        if K < 1:
            raise ValueError("K must be >= 1")
        self.K = K
        modes = [(kx, ky) for kx in range(-K, K + 1) for ky in range(-K, K + 1)]
        self.modes = modes
        self.index = {m: i for i, m in enumerate(modes)}
        self.n_modes = len(modes)
        self.n_scalars = 2 * self.n_modes
        self.canonical = [m for m in modes
                          if (m[1] > 0) or (m[1] == 0 and m[0] >= 0)]
        self.canonical_index = {m: i for i, m in enumerate(self.canonical)}
        self.n_canonical = len(self.canonical)
        mirror = np.array([self.index[(-kx, -ky)] for kx, ky in modes])
        self.mirror_mode = mirror
        # Leray projector per mode (identity at k = 0)
        P = np.empty((self.n_modes, 2, 2))
        for i, (kx, ky) in enumerate(modes):
            k2 = kx * kx + ky * ky
            if k2 == 0:
                P[i] = np.eye(2)
            else:
                P[i, 0, 0] = 1.0 - kx * kx / k2
                P[i, 0, 1] = -kx * ky / k2
                P[i, 1, 0] = -kx * ky / k2
                P[i, 1, 1] = 1.0 - ky * ky / k2
        self.projector = P
        self._quad_cache: dict = {}
        # vectorized mirror bookkeeping for canonical -> full expansion
        canon_mode_idx = np.array([self.index[m] for m in self.canonical])
        self._canon_scalars = np.repeat(2 * canon_mode_idx, 2)
        self._canon_scalars[1::2] += 1
        mirror_idx = self.mirror_mode[canon_mode_idx]
        self._mirror_scalars = np.repeat(2 * mirror_idx, 2)
        self._mirror_scalars[1::2] += 1
        self._self_conj = np.repeat(mirror_idx == canon_mode_idx, 2)

    def scalar(self, mode, comp):
        return 2 * self.index[mode] + comp

    def compress(self, coeffs):
        """Gather retained coefficients, shape (..., nx, ny, 2) -> (..., S)."""
        nx, ny = coeffs.shape[-3], coeffs.shape[-2]
        rows = np.array([kx % nx for kx, _ in self.modes])
        cols = np.array([ky % ny for _, ky in self.modes])
        out = coeffs[..., rows, cols, :]
        return out.reshape(out.shape[:-2] + (self.n_scalars,))

    def decompress(self, U, grid: GridSpec):
        """Scatter scalar features back to full arrays (zeros elsewhere)."""
        lead = U.shape[:-1]
        out = np.zeros(lead + (grid.nx, grid.ny, 2), dtype=np.complex128)
        vals = U.reshape(lead + (self.n_modes, 2))
        rows = np.array([kx % grid.nx for kx, _ in self.modes])
        cols = np.array([ky % grid.ny for _, ky in self.modes])
        out[..., rows, cols, :] = vals
        return out

    def mirror_expand(self, Ycanon):
        """Build the full retained scalar vector from canonical outputs.

        Ycanon has shape (..., 2 * n_canonical).  Mirror modes get the
        conjugate; the self-conjugate k = 0 entry keeps its real part.
        """
        Ycanon = np.where(self._self_conj, Ycanon.real, Ycanon)
        full = np.zeros(Ycanon.shape[:-1] + (self.n_scalars,),
                        dtype=np.complex128)
        full[..., self._canon_scalars] = Ycanon
        full[..., self._mirror_scalars] = np.where(
            self._self_conj, Ycanon, np.conj(Ycanon)
        )
        return full

    def quad_pairs(self, mode):
        """Ordered feature list [(ia, ib), ...] for output mode k.

        Unordered nonzero pairs {p, q} with p + q = k; each pair
        contributes the distinct component products.
        """
        if mode in self._quad_cache:
            return self._quad_cache[mode]
        kx, ky = mode
        pairs = []
        for p in self.modes:
            if p == (0, 0):
                continue
            q = (kx - p[0], ky - p[1])
            if q == (0, 0) or q not in self.index:
                continue
            if self.index[p] > self.index[q]:
                continue
            if p == q:
                combos = [(0, 0), (0, 1), (1, 1)]
            else:
                combos = [(0, 0), (0, 1), (1, 0), (1, 1)]
            for a, b in combos:
                pairs.append((self.scalar(p, a), self.scalar(q, b)))
        self._quad_cache[mode] = pairs
        return pairs

    def project_divfree(self, U):
        """Apply the per-mode Leray projector to scalar features."""
        lead = U.shape[:-1]
        vals = U.reshape(lead + (self.n_modes, 2))
        out = np.einsum("mij,...mj->...mi", self.projector, vals)
        return out.reshape(lead + (self.n_scalars,))


_MODE_CACHE: dict = {}


def retained_modes(K: int) -> RetainedModes:
    rm = _MODE_CACHE.get(K)
    if rm is None:
        rm = RetainedModes(K)
        _MODE_CACHE[K] = rm
    return rm


# ---------------------------------------------------------------------------
# derivative estimation


@dataclass(frozen=True)
class DerivativeDataset:
    """Snapshot/derivative pairs from the fourth-order central stencil.

    Estimates exist only at interior indices (the first and last two
    snapshots are dropped).  `states` and `derivatives` are stacked full
    coefficient arrays.
    """

    states: np.ndarray
    derivatives: np.ndarray
    dt: float
    times: np.ndarray

    def project(self, modes: RetainedModes):
        return modes.compress(self.states), modes.compress(self.derivatives)

    def __len__(self):
        return self.states.shape[0]


@dataclass(frozen=True)
class ModeDerivativeDataset:
    """Derivative pairs already compressed to retained scalars at K_source."""

    U: np.ndarray
    dU: np.ndarray
    dt: float
    times: np.ndarray
    source_modes: RetainedModes

    def project(self, modes: RetainedModes):
        if modes.K > self.source_modes.K:
            raise ValueError("dataset was collected at a smaller K")
        if modes.K == self.source_modes.K:
            return self.U, self.dU
        sel = np.array([
            self.source_modes.scalar(m, c)
            for m in modes.modes for c in (0, 1)
        ])
        return self.U[:, sel], self.dU[:, sel]

    def __len__(self):
        return self.U.shape[0]


def _central_stencil(values, dt):
    """(-x[k+2] + 8 x[k+1] - 8 x[k-1] + x[k-2]) / (12 dt) on axis 0."""
    return (-values[4:] + 8.0 * values[3:-1]
            - 8.0 * values[1:-3] + values[:-4]) / (12.0 * dt)


def estimate_derivatives(trajectory: Trajectory) -> DerivativeDataset:
    """Fourth-order central-difference derivatives along a trajectory."""
    if len(trajectory) < 5:
        raise InsufficientDataError(
            "derivative estimation needs at least 5 snapshots"
        )
    coeffs = trajectory.coeff_array()
    dt = trajectory.params.snapshot_dt
    derivs = _central_stencil(coeffs, dt)
    return DerivativeDataset(
        states=coeffs[2:-2],
        derivatives=derivs,
        dt=dt,
        times=trajectory.times[2:-2],
    )


def estimate_mode_derivatives(times, U, dt,
                              modes: RetainedModes) -> ModeDerivativeDataset:
    """Same stencil applied to a compressed mode series (streaming path).

    The stencil is linear and diagonal in k, so this equals projecting
    `estimate_derivatives` of the full trajectory.
    """
    if U.shape[0] < 5:
        raise InsufficientDataError(
            "derivative estimation needs at least 5 snapshots"
        )
    dU = _central_stencil(U, dt)
    return ModeDerivativeDataset(
        U=U[2:-2], dU=dU, dt=dt, times=np.asarray(times)[2:-2],
        source_modes=modes,
    )


# ---------------------------------------------------------------------------
# the quadratic surrogate


@dataclass
class QuadraticSurrogate:
    """Learned quadratic map on retained modes.

    Coefficients are stored per canonical output scalar o = 2*i + comp:
    a constant, a 2-vector over the same mode's input components, and
    one complex weight per quadratic feature from `modes.quad_pairs`.
    Flat term arrays (q_out, q_ia, q_ib, q_coef) drive vectorized
    evaluation and Jacobian assembly.
    """

    K: int
    ridge_lambda: float
    const: np.ndarray           # (n_out,) complex
    lin: np.ndarray             # (n_out, 2) complex
    quad: list                  # per canonical mode: (n_pairs, 2) complex
    fit_residuals: Optional[np.ndarray] = None   # (n_canonical, 2) relative

    def __post_init__(self):
        self.modes = retained_modes(self.K)
        self._build_flat()

    def _build_flat(self):
        modes = self.modes
        n_out = 2 * modes.n_canonical
        lin_cols = np.empty((n_out, 2), dtype=np.int64)
        for i, m in enumerate(modes.canonical):
            for c in (0, 1):
                lin_cols[2 * i + c] = (modes.scalar(m, 0), modes.scalar(m, 1))
        self._lin_cols = lin_cols
        q_out, q_ia, q_ib, q_coef = [], [], [], []
        for i, m in enumerate(modes.canonical):
            pairs = modes.quad_pairs(m)
            coefs = self.quad[i]
            for c in (0, 1):
                o = 2 * i + c
                for (ia, ib), w in zip(pairs, coefs[:, c]):
                    q_out.append(o)
                    q_ia.append(ia)
                    q_ib.append(ib)
                    q_coef.append(w)
        self._q_out = np.asarray(q_out, dtype=np.int64)
        self._q_ia = np.asarray(q_ia, dtype=np.int64)
        self._q_ib = np.asarray(q_ib, dtype=np.int64)
        self._q_coef = np.asarray(q_coef, dtype=np.complex128)
        self._n_out = n_out
        # scatter matrix (outputs x terms) for vectorized evaluation
        nt = self._q_coef.size
        self._scatter = scipy.sparse.csr_matrix(
            (self._q_coef, (self._q_out, np.arange(nt))),
            shape=(n_out, nt),
        )

    # -- evaluation ---------------------------------------------------------

    def eval_canonical(self, U):
        """Predictions for canonical output scalars; U shape (..., S)."""
        lead = U.shape[:-1]
        Uf = U.reshape((-1, U.shape[-1]))
        out = np.broadcast_to(self.const, (Uf.shape[0], self._n_out)).copy()
        out += Uf[:, self._lin_cols[:, 0]] * self.lin[:, 0]
        out += Uf[:, self._lin_cols[:, 1]] * self.lin[:, 1]
        prods = Uf[:, self._q_ia] * Uf[:, self._q_ib]
        out += (self._scatter @ prods.T).T
        return out.reshape(lead + (self._n_out,))

    def eval_scalars(self, U, project=True):
        """Full retained-scalar prediction with conjugate mirroring."""
        y = self.modes.mirror_expand(self.eval_canonical(U))
        if project:
            y = self.modes.project_divfree(y)
        return y

    def jacobian(self, U):
        """Dense Jacobian of the canonical outputs w.r.t. all scalars.

        The map is holomorphic, so this is a complex (n_out, S) matrix,
        affine in U.
        """
        S = self.modes.n_scalars
        J = np.zeros((self._n_out, S), dtype=np.complex128)
        rows = np.repeat(np.arange(self._n_out), 2)
        J[rows, self._lin_cols.ravel()] += self.lin.ravel()
        wa = self._q_coef * U[self._q_ib]
        wb = self._q_coef * U[self._q_ia]
        flat_a = self._q_out * S + self._q_ia
        flat_b = self._q_out * S + self._q_ib
        idx = np.concatenate([flat_a, flat_b])
        w = np.concatenate([wa, wb])
        J += (np.bincount(idx, weights=w.real, minlength=self._n_out * S)
              + 1j * np.bincount(idx, weights=w.imag, minlength=self._n_out * S)
              ).reshape(self._n_out, S)
        return J


DEFAULT_RIDGE = 1e-8


def fit(dataset, K: int, ridge_lambda: float = DEFAULT_RIDGE,
        n_threads: Optional[int] = None) -> QuadraticSurrogate:
    """Per-output-mode ridge least squares for the quadratic surrogate.

    `dataset` is a DerivativeDataset or ModeDerivativeDataset.  The
    effective regularization for a mode is ridge_lambda times its
    feature count, stabilizing the near-collinear triad features.
    ridge_lambda = 0 raises IllConditionedError on singular normal
    equations (retained-mode solver data are collinear by
    incompressibility).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be >= 0")
    if len(dataset) == 0:
        raise InsufficientDataError("empty derivative dataset")
    modes = retained_modes(K)
    U, dU = dataset.project(modes)
    n = U.shape[0]
    n_canon = modes.n_canonical
    const = np.zeros(2 * n_canon, dtype=np.complex128)
    lin = np.zeros((2 * n_canon, 2), dtype=np.complex128)
    quad = [None] * n_canon
    residuals = np.zeros((n_canon, 2))

    def fit_mode(i):
        m = modes.canonical[i]
        pairs = modes.quad_pairs(m)
        cols = [modes.scalar(m, 0), modes.scalar(m, 1)]
        n_feat = 1 + 2 + len(pairs)
        X = np.empty((n, n_feat), dtype=np.complex128)
        X[:, 0] = 1.0
        X[:, 1] = U[:, cols[0]]
        X[:, 2] = U[:, cols[1]]
        for j, (ia, ib) in enumerate(pairs):
            X[:, 3 + j] = U[:, ia] * U[:, ib]
        Y = dU[:, [2 * modes.index[m], 2 * modes.index[m] + 1]]
        G = X.conj().T @ X
        G[np.diag_indices_from(G)] += ridge_lambda * n_feat
        rhs_mat = X.conj().T @ Y
        try:
            cho = scipy.linalg.cho_factor(G, lower=True, check_finite=False)
            C = scipy.linalg.cho_solve(cho, rhs_mat, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise IllConditionedError(
                f"normal equations singular for mode {m}; "
                "use ridge_lambda > 0"
            ) from exc
        resid = np.linalg.norm(X @ C - Y, axis=0)
        scale = np.linalg.norm(Y, axis=0)
        rel = np.divide(resid, scale, out=np.zeros(2), where=scale > 0)
        return i, C, rel

    workers = n_threads if n_threads is not None else _default_threads()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fit_mode, range(n_canon)))
    else:
        results = [fit_mode(i) for i in range(n_canon)]

    for i, C, rel in results:
        const[2 * i:2 * i + 2] = C[0]
        lin[2 * i] = C[1:3, 0]
        lin[2 * i + 1] = C[1:3, 1]
        quad[i] = np.ascontiguousarray(C[3:])
        residuals[i] = rel

    return QuadraticSurrogate(K=K, ridge_lambda=ridge_lambda, const=const,
                              lin=lin, quad=quad, fit_residuals=residuals)


def _default_threads():
    env = os.environ.get("EELAB_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def apply(surrogate: QuadraticSurrogate, state) -> np.ndarray:
    """Evaluate F_hat(u) as full coefficients (zeros off the retained box,
    output projected divergence-free)."""
    coeffs = state.coeffs if isinstance(state, FlowState) else np.asarray(state)
    grid = GridSpec(nx=coeffs.shape[0], ny=coeffs.shape[1])
    U = surrogate.modes.compress(coeffs)
    y = surrogate.eval_scalars(U)
    return surrogate.modes.decompress(y, grid)


# ---------------------------------------------------------------------------
# matrix-free Jacobian-vector products


@dataclass(frozen=True)
class JvpConfig:
    """Finite-difference step and scheme for Jacobian-vector products."""

    epsilon: Optional[float] = None   # None: 1e-6 * (1 + |u|)
    scheme: str = "central"

    def __post_init__(self):
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.scheme not in ("forward", "central"):
            raise ValueError("scheme must be 'forward' or 'central'")


def l2_norm(coeffs) -> float:
    """Unnormalized L2 norm over the torus of a coefficient array."""
    return float(np.sqrt(np.sum(np.abs(coeffs) ** 2) * TWO_PI**2))


def jvp(operator, state, v, config: JvpConfig = JvpConfig()) -> np.ndarray:
    """Matrix-free directional derivative of F (surrogate or exact rhs).

    `operator` is a QuadraticSurrogate or a callable mapping full
    coefficients to full coefficients.  The direction is normalized
    internally and the result rescaled.
    """
    coeffs = state.coeffs if isinstance(state, FlowState) else np.asarray(state)
    v = np.asarray(v)
    nv = l2_norm(v)
    if nv == 0:
        return np.zeros_like(v)
    vu = v / nv
    eps = config.epsilon
    if eps is None:
        eps = 1e-6 * (1.0 + l2_norm(coeffs))
    if isinstance(operator, QuadraticSurrogate):
        f = lambda c: apply(operator, c)
    else:
        f = operator
    if config.scheme == "central":
        out = (f(coeffs + eps * vu) - f(coeffs - eps * vu)) / (2.0 * eps)
    else:
        out = (f(coeffs + eps * vu) - f(coeffs)) / eps
    return nv * out


# ---------------------------------------------------------------------------
# Sobolev error diagnostic


def sobolev_error(predicted, truth, order: int) -> float:
    """H^k norm of (predicted - truth) via spectral weights.

    Uses the unnormalized integral over the torus: the squared norm is
    (2 pi)^2 * sum_k (1 + |k|^2 + ... + |k|^(2 order)) |dhat(k)|^2.
    """
    if order not in (0, 1, 2):
        raise ValueError("Sobolev order must be 0, 1 or 2")
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError("shape mismatch")
    nx, ny = predicted.shape[0], predicted.shape[1]
    kx = np.fft.fftfreq(nx, 1.0 / nx).reshape(-1, 1)
    ky = np.fft.fftfreq(ny, 1.0 / ny).reshape(1, -1)
    k2 = kx**2 + ky**2
    weight = np.ones_like(k2)
    acc = np.ones_like(k2)
    for _ in range(order):
        acc = acc * k2
        weight = weight + acc
    diff2 = np.sum(np.abs(predicted - truth) ** 2, axis=-1)
    return float(np.sqrt(TWO_PI**2 * np.sum(weight * diff2)))


# ---------------------------------------------------------------------------
# persistence

_QSUR_MAGIC = b"QSUR"
_QSUR_VERSION = 1


def save_surrogate(path, surrogate: QuadraticSurrogate):
    """Binary format: magic, version, K, ridge, then coefficient tables in
    deterministic canonical-mode order (counts derive from K)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIid", _QSUR_MAGIC, _QSUR_VERSION,
                             surrogate.K, surrogate.ridge_lambda))
        surrogate.const.tofile(fh)
        surrogate.lin.tofile(fh)
        for block in surrogate.quad:
            block.tofile(fh)


def load_surrogate(path) -> QuadraticSurrogate:
    with open(path, "rb") as fh:
        magic, version, K, ridge = struct.unpack("<4sIid", fh.read(20))
        if magic != _QSUR_MAGIC:
            raise ValueError(f"{path} is not a QSUR surrogate file")
        if version != _QSUR_VERSION:
            raise ValueError(f"unsupported QSUR version {version}")
        modes = retained_modes(K)
        n_out = 2 * modes.n_canonical
        const = np.fromfile(fh, dtype=np.complex128, count=n_out)
        lin = np.fromfile(fh, dtype=np.complex128, count=2 * n_out)
        lin = lin.reshape(n_out, 2)
        quad = []
        for m in modes.canonical:
            n_pairs = len(modes.quad_pairs(m))
            block = np.fromfile(fh, dtype=np.complex128, count=2 * n_pairs)
            quad.append(block.reshape(n_pairs, 2))
    return QuadraticSurrogate(K=K, ridge_lambda=ridge, const=const,
                              lin=lin, quad=quad)


def write_fit_report_csv(path, surrogate: QuadraticSurrogate):
    if surrogate.fit_residuals is None:
        raise ValueError("surrogate carries no fit residuals")
    with open(path, "w") as fh:
        fh.write("kx,ky,component,relative_residual\n")
        for i, (kx, ky) in enumerate(surrogate.modes.canonical):
            for c in (0, 1):
                fh.write(f"{kx},{ky},{c},"
                         f"{float(surrogate.fit_residuals[i, c])!r}\n")
