"""Pseudospectral solver for 2D Kolmogorov flow on the torus [0, 2pi]^2.

The incompressible Navier-Stokes equations with sinusoidal body force
f = sin(n y) e1 are integrated in velocity spectral coefficients with an
explicit Leray projection P(k) = I - k k^T / |k|^2 (identity at k = 0),
so the pressure never appears.  Spectral convention:

    u(x) = sum_k uhat(k) exp(i k . x),      uhat = fft2(u) / (nx * ny),

with coefficient arrays of shape (nx, ny, 2) indexed (kx, ky, component)
in numpy fft ordering.  Real fields are conjugate-symmetric and the 2/3
rule zeroes every mode with |kx| or |ky| above the cutoff.

Time stepping is plain RK4 with a fixed internal step; snapshots are
emitted every `snapshot_dt`.  The hot loop runs in the half spectrum
(rfft2 layout) and reconstructs full conjugate-symmetric coefficients
only when a snapshot is stored.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import EelabError, FlowDivergenceError

TWO_PI = 2.0 * np.pi

# Kinetic energy may not grow by more than this factor across one internal
# step (floored for near-zero states) before we declare blow-up.
_BLOWUP_FACTOR = 1.0e3
_BLOWUP_FLOOR = 1.0e-3


@dataclass(frozen=True)
class GridSpec:
    """Uniform spectral grid on the doubly periodic square of side 2pi."""

    nx: int = 64
    ny: int = 64
    dealias_fraction: float = 2.0 / 3.0

    def __post_init__(self):
        for n in (self.nx, self.ny):
            if n < 4 or (n & (n - 1)) != 0:
                raise ValueError(f"grid size {n} must be a power of two >= 4")
        if not 0.0 < self.dealias_fraction <= 1.0:
            raise ValueError("dealias_fraction must lie in (0, 1]")

    @property
    def L(self):
        return TWO_PI

    @property
    def shape(self):
        return (self.nx, self.ny, 2)

    @property
    def kx(self):
        """Integer wavenumbers along axis 0, fft ordering, shape (nx, 1)."""
        return np.fft.fftfreq(self.nx, 1.0 / self.nx).reshape(-1, 1)

    @property
    def ky(self):
        """Integer wavenumbers along axis 1, fft ordering, shape (1, ny)."""
        return np.fft.fftfreq(self.ny, 1.0 / self.ny).reshape(1, -1)

    @property
    def kcut(self):
        """Largest retained |k| per direction under the dealias rule."""
        return (int(self.dealias_fraction * (self.nx // 2)),
                int(self.dealias_fraction * (self.ny // 2)))

    def dealias_mask(self):
        """Boolean keep-mask over the full (nx, ny) spectrum."""
        cx, cy = self.kcut
        return (np.abs(self.kx) <= cx) & (np.abs(self.ky) <= cy)


@dataclass(frozen=True)
class FlowParams:
    """Physical and time-discretization parameters; viscosity is 1/Re."""

    reynolds: float = 40.0
    forcing_wavenumber: int = 4
    internal_dt: float = 0.005
    snapshot_dt: float = 0.1

    def __post_init__(self):
        if self.reynolds <= 0:
            raise ValueError("reynolds must be positive")
        if self.forcing_wavenumber < 1:
            raise ValueError("forcing_wavenumber must be a positive integer")
        if self.internal_dt <= 0 or self.snapshot_dt <= 0:
            raise ValueError("time steps must be positive")
        ratio = self.snapshot_dt / self.internal_dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError("internal_dt must divide snapshot_dt exactly")

    @property
    def viscosity(self):
        return 1.0 / self.reynolds

    @property
    def steps_per_snapshot(self):
        return int(round(self.snapshot_dt / self.internal_dt))


@dataclass(frozen=True)
class FlowState:
    """One spectral velocity snapshot: coeffs shape (nx, ny, 2), plus time."""

    coeffs: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        arr = np.asarray(self.coeffs, dtype=np.complex128)
        arr.flags.writeable = False
        object.__setattr__(self, "coeffs", arr)


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled sequence of states from a single integration."""

    states: tuple
    params: FlowParams
    grid: GridSpec

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        times = self.times
        if len(times) > 1:
            gaps = np.diff(times)
            if np.any(gaps <= 0):
                raise ValueError("trajectory timestamps must strictly increase")
            if np.max(np.abs(gaps - self.params.snapshot_dt)) > 1e-12 * max(
                1.0, abs(times[-1])
            ):
                raise ValueError("trajectory spacing must equal snapshot_dt")

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i):
        return self.states[i]

    @property
    def times(self):
        return np.array([s.time for s in self.states])

    def coeff_array(self):
        """Stacked coefficients, shape (n_states, nx, ny, 2)."""
        return np.stack([s.coeffs for s in self.states])


@dataclass(frozen=True)
class EnergyDiagnostics:
    """Energy input I, dissipation D and kinetic energy E time series."""

    times: np.ndarray
    input_I: np.ndarray
    dissipation_D: np.ndarray
    kinetic_E: np.ndarray

    def __post_init__(self):
        if np.any(self.dissipation_D < 0) or np.any(self.kinetic_E < 0):
            raise ValueError("dissipation and kinetic energy must be >= 0")


# ---------------------------------------------------------------------------
# half-spectrum workspace


class _Workspace:
    """Precomputed wavenumber arrays for the rfft2 half spectrum."""

    def __init__(self, grid: GridSpec, params: FlowParams):
        nx, ny = grid.nx, grid.ny
        self.nx, self.ny = nx, ny
        self.nyh = ny // 2 + 1
        kx = np.fft.fftfreq(nx, 1.0 / nx)
        ky = np.arange(self.nyh, dtype=float)
        self.kx = kx.reshape(-1, 1)
        self.ky = ky.reshape(1, -1)
        self.k2 = self.kx**2 + self.ky**2
        k2s = self.k2.copy()
        k2s[0, 0] = 1.0  # zero mode projected to itself
        self.inv_k2 = 1.0 / k2s
        cx, cy = grid.kcut
        self.mask = ((np.abs(self.kx) <= cx) & (self.ky <= cy))[:, :, None]
        self.nu = params.viscosity
        # forcing sin(n y) e1: coefficient -i/2 at (kx=0, ky=+n)
        n = params.forcing_wavenumber
        fh = np.zeros((nx, self.nyh, 2), dtype=np.complex128)
        if n < self.nyh:
            fh[0, n, 0] = -0.5j
        self.forcing = fh
        # Parseval weights: interior ky columns appear twice in the full sum
        w = np.full(self.nyh, 2.0)
        w[0] = 1.0
        if ny % 2 == 0:
            w[-1] = 1.0
        self.pweight = w.reshape(1, -1)

    def project(self, fh):
        """Leray projection onto divergence-free fields, in place."""
        div = (self.kx * fh[..., 0] + self.ky * fh[..., 1]) * self.inv_k2
        fh[..., 0] -= self.kx * div
        fh[..., 1] -= self.ky * div
        return fh

    def rhs(self, uh, include_forcing=True):
        """Projected Navier-Stokes right side, half-spectrum in and out."""
        ikx = 1j * self.kx
        iky = 1j * self.ky
        ux, uy = uh[..., 0], uh[..., 1]
        batch = np.stack(
            [ux, uy, ikx * ux, iky * ux, ikx * uy], axis=-1
        )
        phys = np.fft.irfft2(batch, s=(self.nx, self.ny), axes=(0, 1))
        pux, puy, dxux, dyux, dxuy = (phys[..., i] for i in range(5))
        # incompressibility: d(uy)/dy = -d(ux)/dx
        adv_x = pux * dxux + puy * dyux
        adv_y = pux * dxuy - puy * dxux
        advh = np.fft.rfft2(np.stack([adv_x, adv_y], axis=-1), axes=(0, 1))
        # physical fields above carry 1/(nx ny) each, so the unnormalized
        # forward transform of their product needs one factor back
        advh *= self.nx * self.ny
        out = -advh
        out -= (self.nu * self.k2)[:, :, None] * uh
        if include_forcing:
            out += self.forcing
        out *= self.mask
        return self.project(out)

    def linearized(self, uh, vh, grads_u=None):
        """Action of the linearized operator at state uh on tangent batch vh.

        vh has shape (nx, nyh, 2, m).  Both uh and vh must be
        divergence-free (their y-derivatives are inferred from that).
        """
        ikx = 1j * self.kx
        iky = 1j * self.ky
        if grads_u is None:
            grads_u = self.state_grads(uh)
        pux, puy, dxux, dyux, dxuy = grads_u
        m = vh.shape[-1]
        vx, vy = vh[..., 0, :], vh[..., 1, :]
        vbatch = np.concatenate(
            [vx, vy, ikx[..., None] * vx, iky[..., None] * vx,
             ikx[..., None] * vy],
            axis=-1,
        )
        ph = np.fft.irfft2(vbatch, s=(self.nx, self.ny), axes=(0, 1))
        pvx = ph[..., 0:m]
        pvy = ph[..., m:2 * m]
        dxvx = ph[..., 2 * m:3 * m]
        dyvx = ph[..., 3 * m:4 * m]
        dxvy = ph[..., 4 * m:5 * m]
        a_x = (pux[..., None] * dxvx + puy[..., None] * dyvx
               + pvx * dxux[..., None] + pvy * dyux[..., None])
        a_y = (pux[..., None] * dxvy - puy[..., None] * dxvx
               + pvx * dxuy[..., None] - pvy * dxux[..., None])
        advh = np.fft.rfft2(np.stack([a_x, a_y], axis=-2), axes=(0, 1))
        advh *= self.nx * self.ny
        out = -advh
        out -= (self.nu * self.k2)[:, :, None, None] * vh
        out *= self.mask[:, :, :, None]
        div = (self.kx[..., None] * out[..., 0, :]
               + self.ky[..., None] * out[..., 1, :]) * self.inv_k2[..., None]
        out[..., 0, :] -= self.kx[..., None] * div
        out[..., 1, :] -= self.ky[..., None] * div
        return out

    def state_grads(self, uh):
        """Physical velocity and gradient fields reused across tangents."""
        ikx = 1j * self.kx
        iky = 1j * self.ky
        ux, uy = uh[..., 0], uh[..., 1]
        batch = np.stack([ux, uy, ikx * ux, iky * ux, ikx * uy], axis=-1)
        phys = np.fft.irfft2(batch, s=(self.nx, self.ny), axes=(0, 1))
        return tuple(phys[..., i] for i in range(5))

    def energy(self, uh):
        """Kinetic energy (1 / 2 L^2) * integral |u|^2 via Parseval."""
        return 0.5 * float(
            np.sum(self.pweight[:, :, None] * np.abs(uh) ** 2)
        )

    def rk4_step(self, uh, dt):
        k1 = self.rhs(uh)
        k2 = self.rhs(uh + (0.5 * dt) * k1)
        k3 = self.rhs(uh + (0.5 * dt) * k2)
        k4 = self.rhs(uh + dt * k3)
        return uh + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


_WORKSPACES: dict = {}


def _workspace(grid: GridSpec, params: FlowParams) -> _Workspace:
    key = (grid.nx, grid.ny, grid.dealias_fraction,
           params.reynolds, params.forcing_wavenumber)
    ws = _WORKSPACES.get(key)
    if ws is None:
        ws = _Workspace(grid, params)
        _WORKSPACES[key] = ws
    return ws


def full_to_half(coeffs):
    """Extract the rfft2 half spectrum from full conjugate-symmetric coeffs."""
    nyh = coeffs.shape[1] // 2 + 1
    return np.ascontiguousarray(coeffs[:, :nyh, ...])


def half_to_full(half, ny):
    """Rebuild full conjugate-symmetric coefficients from the half spectrum."""
    nx = half.shape[0]
    out = np.zeros((nx, ny) + half.shape[2:], dtype=np.complex128)
    nyh = half.shape[1]
    out[:, :nyh] = half
    idx = (-np.arange(nx)) % nx
    cols = np.arange(nyh, ny)
    out[:, cols] = np.conj(half[idx][:, ny - cols])
    return out


# ---------------------------------------------------------------------------
# public operations


def laminar_state(params: FlowParams, grid: GridSpec) -> FlowState:
    """Steady laminar solution u = (Re / n^2) sin(n y) e1 at t = 0."""
    n = params.forcing_wavenumber
    amp = params.reynolds / n**2
    coeffs = np.zeros(grid.shape, dtype=np.complex128)
    if n <= grid.kcut[1]:
        coeffs[0, n, 0] = -0.5j * amp
        coeffs[0, grid.ny - n, 0] = 0.5j * amp
    else:
        raise ValueError("forcing wavenumber exceeds the dealias cutoff")
    return FlowState(coeffs, 0.0)


def rhs(state: FlowState, params: FlowParams, grid: GridSpec,
        include_forcing: bool = True) -> np.ndarray:
    """Projected right side P[-u.grad u + nu lap u + f], full coefficients."""
    if not np.all(np.isfinite(state.coeffs.view(np.float64))):
        raise ValueError("state contains non-finite coefficients")
    ws = _workspace(grid, params)
    uh = full_to_half(state.coeffs)
    return half_to_full(ws.rhs(uh, include_forcing), grid.ny)


def step(state: FlowState, params: FlowParams, grid: GridSpec) -> FlowState:
    """Advance a state by one internal_dt with RK4."""
    ws = _workspace(grid, params)
    uh = full_to_half(state.coeffs)
    e0 = ws.energy(uh)
    uh = ws.rk4_step(uh, params.internal_dt)
    e1 = ws.energy(uh)
    _check_energy(e0, e1, state.time + params.internal_dt)
    return FlowState(half_to_full(uh, grid.ny), state.time + params.internal_dt)


def _check_energy(e_before, e_after, time):
    if not np.isfinite(e_after) or (
        e_after > _BLOWUP_FACTOR * max(e_before, _BLOWUP_FLOOR)
    ):
        raise FlowDivergenceError(
            f"kinetic energy diverged at t = {time:.6g} "
            f"({e_before:.3g} -> {e_after:.3g}); reduce internal_dt",
            time=time,
        )


def simulate(initial: FlowState, duration: float, params: FlowParams,
             grid: GridSpec) -> Trajectory:
    """Integrate for `duration` time units, sampling every snapshot_dt."""
    states = []
    simulate_stream(initial, duration, params, grid, states.append)
    return Trajectory(tuple(states), params, grid)


def simulate_stream(initial: FlowState, duration: float, params: FlowParams,
                    grid: GridSpec, on_snapshot: Callable[[FlowState], None]):
    """Streaming variant of `simulate`: snapshots go to a callback.

    Returns the final state.  Memory use is O(1) in the number of
    snapshots, which is what the desk-scale pipeline relies on.
    """
    n_snap = duration / params.snapshot_dt
    if duration <= 0 or abs(n_snap - round(n_snap)) > 1e-9 * max(1.0, n_snap):
        raise ValueError("duration must be a positive multiple of snapshot_dt")
    n_snap = int(round(n_snap))
    ws = _workspace(grid, params)
    uh = full_to_half(initial.coeffs)
    t = float(initial.time)
    e_start = ws.energy(uh)
    state = FlowState(half_to_full(uh, grid.ny), t)
    on_snapshot(state)
    dt = params.internal_dt
    nsub = params.steps_per_snapshot
    for _ in range(n_snap):
        for j in range(nsub):
            e0 = ws.energy(uh)
            uh = ws.rk4_step(uh, dt)
            _check_energy(max(e0, e_start), ws.energy(uh),
                          t + (j + 1) * dt)
        t = t + params.snapshot_dt
        state = FlowState(half_to_full(uh, grid.ny), t)
        on_snapshot(state)
    return state


def diagnostics(trajectory, params: FlowParams | None = None) -> EnergyDiagnostics:
    """Energy input, dissipation and kinetic energy by spectral quadrature.

    Accepts a Trajectory or any sequence of FlowState (then `params` is
    required).  I, D and E follow the domain-averaged definitions
    (1/L^2) * integral, evaluated by Parseval in spectral space.
    """
    if isinstance(trajectory, Trajectory):
        states = trajectory.states
        params = trajectory.params
    else:
        states = tuple(trajectory)
        if params is None:
            raise ValueError("params required when passing a bare state sequence")
    if len(states) == 0:
        raise ValueError("diagnostics requires a nonempty trajectory")
    times = np.array([s.time for s in states])
    I = np.empty(len(states))
    D = np.empty(len(states))
    E = np.empty(len(states))
    for j, s in enumerate(states):
        I[j], D[j], E[j] = state_energy_budget(s.coeffs, params)
    return EnergyDiagnostics(times, I, D, E)


def state_energy_budget(coeffs, params: FlowParams):
    """Pointwise (I, D, E) for one full coefficient array."""
    n = params.forcing_wavenumber
    ny = coeffs.shape[1]
    kx = np.fft.fftfreq(coeffs.shape[0], 1.0 / coeffs.shape[0]).reshape(-1, 1)
    ky = np.fft.fftfreq(ny, 1.0 / ny).reshape(1, -1)
    ux, uy = coeffs[..., 0], coeffs[..., 1]
    # I = (1/L^2) int u . sin(n y) e1
    I = float(np.real(ux[0, n] * 0.5j + ux[0, ny - n] * (-0.5j)))
    omega = 1j * kx * uy - 1j * ky * ux
    D = params.viscosity * float(np.sum(np.abs(omega) ** 2))
    E = 0.5 * float(np.sum(np.abs(coeffs) ** 2))
    return I, D, E


def linearized_apply(state: FlowState, v: np.ndarray, params: FlowParams,
                     grid: GridSpec) -> np.ndarray:
    """Exact linearized operator P[-u.grad v - v.grad u + nu lap v].

    Used only as a verification oracle for the data-driven route.  Both
    the state and the tangent field must be divergence-free.
    """
    out = linearized_apply_batch(state.coeffs, v[..., None], params, grid)
    return out[..., 0]


def linearized_apply_batch(u_coeffs, v_batch, params: FlowParams,
                           grid: GridSpec) -> np.ndarray:
    """Vectorized linearized operator; v_batch has shape (nx, ny, 2, m)."""
    ws = _workspace(grid, params)
    uh = full_to_half(u_coeffs)
    vh = full_to_half(v_batch)
    out = ws.linearized(uh, vh)
    return half_to_full(out, grid.ny)


def perturbed_laminar(params: FlowParams, grid: GridSpec,
                      amplitude: float = 1e-3, seed: int = 0) -> FlowState:
    """Laminar state plus a seeded divergence-free random perturbation.

    The perturbation is smooth (Gaussian spectral envelope, scale ~3)
    and scaled so its rms velocity equals `amplitude`.
    """
    rng = np.random.default_rng(seed)
    base = laminar_state(params, grid)
    noise = rng.standard_normal((grid.nx, grid.ny, 2))
    nh = np.fft.rfft2(noise, axes=(0, 1)) / (grid.nx * grid.ny)
    ws = _workspace(grid, params)
    envelope = np.exp(-ws.k2 / (2.0 * 3.0**2))
    envelope[0, 0] = 0.0  # keep the mean flow untouched
    nh *= envelope[:, :, None]
    nh *= ws.mask
    ws.project(nh)
    rms = np.sqrt(2.0 * ws.energy(nh))
    if rms == 0:
        raise EelabError("degenerate perturbation draw")
    nh *= amplitude / rms
    coeffs = base.coeffs + half_to_full(nh, grid.ny)
    return FlowState(coeffs, 0.0)


# ---------------------------------------------------------------------------
# invariant helpers (used by tests and `eelab verify`)


def max_divergence(coeffs, grid: GridSpec) -> float:
    """max_k |k . uhat(k)| over the full spectrum."""
    kx = grid.kx
    ky = grid.ky
    return float(np.max(np.abs(kx * coeffs[..., 0] + ky * coeffs[..., 1])))


def max_imag_physical(coeffs) -> float:
    """Largest imaginary part of the inverse-transformed physical field."""
    phys = np.fft.ifft2(coeffs * coeffs.shape[0] * coeffs.shape[1], axes=(0, 1))
    return float(np.max(np.abs(phys.imag)))


# ---------------------------------------------------------------------------
# persistence

_KFLO_MAGIC = b"KFLO"
_KFLO_VERSION = 1
_KFLO_HEADER = struct.Struct("<4sIIIQddI")


class TrajectoryWriter:
    """Incremental writer for the binary snapshot format."""

    def __init__(self, path, params: FlowParams, grid: GridSpec):
        self.path = path
        self.params = params
        self.grid = grid
        self.n_states = 0
        self._fh = open(path, "wb")
        self._write_header()

    def _write_header(self):
        self._fh.seek(0)
        self._fh.write(_KFLO_HEADER.pack(
            _KFLO_MAGIC, _KFLO_VERSION, self.grid.nx, self.grid.ny,
            self.n_states, self.params.snapshot_dt, self.params.reynolds,
            self.params.forcing_wavenumber,
        ))

    def append(self, state: FlowState):
        self._fh.write(struct.pack("<d", state.time))
        np.ascontiguousarray(state.coeffs, dtype=np.complex128).tofile(self._fh)
        self.n_states += 1

    def close(self):
        self._write_header()
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_trajectory(path, trajectory: Trajectory):
    with TrajectoryWriter(path, trajectory.params, trajectory.grid) as w:
        for s in trajectory.states:
            w.append(s)


def read_trajectory(path, internal_dt: float | None = None) -> Trajectory:
    """Load a KFLO file.  The header stores no internal_dt, so resuming a
    simulation from a loaded trajectory needs it passed explicitly
    (default snapshot_dt / 20)."""
    with open(path, "rb") as fh:
        raw = fh.read(_KFLO_HEADER.size)
        magic, version, nx, ny, n_states, snap_dt, re, n = _KFLO_HEADER.unpack(raw)
        if magic != _KFLO_MAGIC:
            raise EelabError(f"{path} is not a KFLO snapshot file")
        if version != _KFLO_VERSION:
            raise EelabError(f"unsupported KFLO version {version}")
        if internal_dt is None:
            internal_dt = snap_dt / 20.0
        params = FlowParams(reynolds=re, forcing_wavenumber=n,
                            internal_dt=internal_dt, snapshot_dt=snap_dt)
        grid = GridSpec(nx=nx, ny=ny)
        states = []
        for _ in range(n_states):
            (t,) = struct.unpack("<d", fh.read(8))
            coeffs = np.fromfile(fh, dtype=np.complex128, count=nx * ny * 2)
            states.append(FlowState(coeffs.reshape(nx, ny, 2), t))
    return Trajectory(tuple(states), params, grid)


def write_diagnostics_csv(path, diag: EnergyDiagnostics):
    with open(path, "w") as fh:
        fh.write("time,I,D,E\n")
        for row in zip(diag.times, diag.input_I, diag.dissipation_D,
                       diag.kinetic_E):
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
