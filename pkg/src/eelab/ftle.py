"""Reduced-order finite-time Lyapunov exponents over sliding windows.

For each window [t - T, t] the reduced fundamental matrix solves
dY/dt = L_r(t) Y from Y = I_r, where L_r comes from a continuously
evolved OTD basis (only Y resets per window).  The exponents are
Gamma_i = log(sigma_i(Y)) / T, the singular-value route to the reduced
Cauchy-Green eigenvalues (identical values, better conditioned).

Windows share interval propagators: Y over [t - T, t] is the ordered
product of per-sample-interval propagators, each from RK4 with the
operator linearly interpolated between samples.  This is exactly what
per-window RK4 from identity produces when steps align with sample
boundaries, and it makes the sweep over thousands of windows cheap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import WindowOverflowError

_OVERFLOW_NORM = 1e150


@dataclass(frozen=True)
class WindowConfig:
    """Sliding-window layout: horizon T and window-end spacing."""

    horizon_T: float = 5.0
    stride: float = 0.1

    def __post_init__(self):
        if self.horizon_T <= 0 or self.stride <= 0:
            raise ValueError("horizon_T and stride must be positive")


@dataclass(frozen=True)
class FtleSeries:
    """Per-window descending reduced FTLEs Gamma_1..Gamma_r at window ends."""

    times: np.ndarray
    gammas: np.ndarray         # (n_windows, r)
    r: int
    horizon_T: float
    stride: float

    def __post_init__(self):
        if self.gammas.ndim != 2 or self.gammas.shape[1] != self.r:
            raise ValueError("gammas must have shape (n_windows, r)")
        finite = np.isfinite(self.gammas)
        rows = self.gammas.copy()
        rows[~finite] = -np.inf
        if np.any(np.diff(rows, axis=1) > 1e-10):
            raise ValueError("each window's spectrum must be descending")

    @property
    def leading(self):
        return self.gammas[:, 0]


def _interval_propagators(L, dt, substeps=1):
    """RK4 propagators over each sample interval, vectorized over intervals.

    L has shape (n, r, r) at uniformly spaced samples; the operator is
    linearly interpolated inside each interval.  Returns (n - 1, r, r).
    """
    n, r, _ = L.shape
    A0 = L[:-1]
    dA = L[1:] - L[:-1]
    eye = np.broadcast_to(np.eye(r), (n - 1, r, r))
    P = np.array(eye)
    h = dt / substeps
    for j in range(substeps):
        th0 = j / substeps
        A1 = A0 + th0 * dA
        A2 = A0 + (th0 + 0.5 / substeps) * dA
        A3 = A0 + (th0 + 1.0 / substeps) * dA
        K1 = A1
        K2 = A2 @ (eye + (0.5 * h) * K1)
        K3 = A2 @ (eye + (0.5 * h) * K2)
        K4 = A3 @ (eye + h * K3)
        step = eye + (h / 6.0) * (K1 + 2 * K2 + 2 * K3 + K4)
        P = step @ P
    return P


def evolve_fundamental(operators: Sequence, dt: float,
                       substeps: int = 1) -> np.ndarray:
    """Integrate dY/dt = L_r(t) Y from identity across one window.

    `operators` is the time-ordered ReducedOperator sequence covering
    the window (uniform spacing); `dt` is the RK4 step, which must
    divide the sample spacing (`substeps` = spacing / dt).
    """
    times = np.array([op.time for op in operators])
    if len(times) < 2:
        raise ValueError("a window needs at least two operator samples")
    spacing = times[1] - times[0]
    if np.max(np.abs(np.diff(times) - spacing)) > 1e-9 * max(1.0, spacing):
        raise ValueError("operator samples must be uniformly spaced")
    sub = spacing / dt
    if abs(sub - round(sub)) > 1e-9:
        raise ValueError("dt must divide the operator sample spacing")
    if substeps == 1 and round(sub) != 1:
        substeps = int(round(sub))
    L = np.stack([op.L_r for op in operators])
    P = _interval_propagators(L, spacing, substeps=substeps)
    r = L.shape[1]
    Y = np.eye(r)
    for k in range(P.shape[0]):
        Y = P[k] @ Y
        if np.max(np.abs(Y)) > _OVERFLOW_NORM:
            raise WindowOverflowError(
                f"|Y| exceeded {_OVERFLOW_NORM:.0e} inside the window "
                f"ending at t = {times[-1]:.6g}; shorten the horizon"
            )
    return Y


def cauchy_green_gammas(Y: np.ndarray, T: float) -> np.ndarray:
    """Descending Gamma_i = log(sigma_i(Y)) / T; zero singular values map
    to the -inf sentinel."""
    if T <= 0:
        raise ValueError("T must be positive")
    if not np.all(np.isfinite(Y)):
        raise WindowOverflowError("fundamental matrix is not finite")
    svals = np.linalg.svd(Y, compute_uv=False)
    with np.errstate(divide="ignore"):
        return np.log(svals) / T


def ftle_series(times, L_r, config: WindowConfig,
                substeps: int = 1) -> FtleSeries:
    """Reduced FTLEs for every window end on the stride grid.

    `times` and `L_r` (shape (n, r, r)) are the uniformly spaced
    operator stream from a continuously evolved basis.  Window ends sit
    every `stride` on the sample grid, starting at times[0] + horizon_T.
    """
    times = np.asarray(times, dtype=float)
    L_r = np.asarray(L_r)
    n = len(times)
    if L_r.shape[0] != n:
        raise ValueError("times and L_r disagree in length")
    if n < 2:
        raise ValueError("need at least two operator samples")
    h = times[1] - times[0]
    if np.max(np.abs(np.diff(times) - h)) > 1e-9 * max(1.0, h):
        raise ValueError("operator samples must be uniformly spaced")
    w = config.horizon_T / h
    if abs(w - round(w)) > 1e-9:
        raise ValueError("horizon_T must be a multiple of the sample spacing")
    w = int(round(w))
    s = config.stride / h
    if abs(s - round(s)) > 1e-9:
        raise ValueError("stride must be a multiple of the sample spacing")
    s = int(round(s))
    if w >= n:
        raise ValueError("stream shorter than one horizon")
    P = _interval_propagators(L_r, h, substeps=substeps)
    ends = np.arange(w, n, s)
    r = L_r.shape[1]
    Y = np.broadcast_to(np.eye(r), (len(ends), r, r)).copy()
    starts = ends - w
    for j in range(w):
        Y = P[starts + j] @ Y
        mx = np.max(np.abs(Y))
        if mx > _OVERFLOW_NORM:
            bad = int(ends[np.argmax(np.max(np.abs(Y), axis=(1, 2)))])
            raise WindowOverflowError(
                f"|Y| exceeded {_OVERFLOW_NORM:.0e} in the window ending at "
                f"t = {times[bad]:.6g}; shorten the horizon"
            )
    svals = np.linalg.svd(Y, compute_uv=False)
    with np.errstate(divide="ignore"):
        gammas = np.log(svals) / config.horizon_T
    return FtleSeries(times=times[ends], gammas=gammas, r=r,
                      horizon_T=config.horizon_T, stride=config.stride)


# ---------------------------------------------------------------------------
# persistence


def write_ftle_csv(path, series: FtleSeries):
    with open(path, "w") as fh:
        fh.write(f"# horizon_T={float(series.horizon_T)!r} r={series.r} "
                 f"stride={float(series.stride)!r}\n")
        cols = ",".join(f"gamma_{i + 1}" for i in range(series.r))
        fh.write(f"time,{cols}\n")
        for t, row in zip(series.times, series.gammas):
            vals = ",".join(repr(float(g)) for g in row)
            fh.write(f"{float(t)!r},{vals}\n")


def read_ftle_csv(path) -> FtleSeries:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise ValueError("missing FTLE header comment")
        meta = dict(kv.split("=") for kv in header[1:].split())
        fh.readline()  # column names
        rows = [list(map(float, line.split(","))) for line in fh if line.strip()]
    arr = np.array(rows)
    return FtleSeries(times=arr[:, 0], gammas=arr[:, 1:],
                      r=int(meta["r"]), horizon_T=float(meta["horizon_T"]),
                      stride=float(meta["stride"]))
