"""Low-dimensional systems with brute-force verifiable tangent dynamics.

These serve as oracles for the OTD and FTLE machinery: the full
fundamental matrix of a dim <= 16 system is integrated directly, so
finite-time Lyapunov exponents can be computed without any reduction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass(frozen=True)
class GenericSystem:
    """Autonomous ODE with an optional analytic Jacobian action.

    When `jacobian_apply` is absent it is filled in by central
    differences with step eps = sqrt(machine eps) * (1 + |u|).
    """

    dim: int
    rhs: Callable[[np.ndarray], np.ndarray]
    jacobian_apply: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.dim < 1 or self.dim > 16:
            raise ValueError("oracle systems are limited to dim <= 16")
        if self.jacobian_apply is None:
            rhs = self.rhs

            def fd_japply(u, v):
                nv = np.linalg.norm(v)
                if nv == 0:
                    return np.zeros_like(v)
                eps = np.sqrt(np.finfo(float).eps) * (1.0 + np.linalg.norm(u))
                vn = v / nv
                return nv * (rhs(u + eps * vn) - rhs(u - eps * vn)) / (2 * eps)

            object.__setattr__(self, "jacobian_apply", fd_japply)


@dataclass(frozen=True)
class FullFtleResult:
    """Full-space finite-time Lyapunov exponents over one window."""

    exponents: np.ndarray
    window: tuple

    def __post_init__(self):
        if np.any(np.diff(self.exponents) > 1e-12):
            raise ValueError("FTLE spectrum must be sorted descending")


def lti_system(A) -> GenericSystem:
    """Linear time-invariant system du/dt = A u."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be a square matrix")
    if not np.all(np.isfinite(A)):
        raise ValueError("A must be finite")
    return GenericSystem(
        dim=A.shape[0],
        rhs=lambda u: A @ u,
        jacobian_apply=lambda u, v: A @ v,
    )


def fundamental_matrix(system: GenericSystem, u0, T: float, dt: float):
    """Integrate state and dim x dim fundamental matrix jointly with RK4.

    Returns (u(T), Psi(T)) with Psi(0) = I.  Using one scheme for both
    avoids operator-splitting error between the trajectory and its
    tangent flow.
    """
    if T <= 0:
        raise ValueError("window length T must be positive")
    if dt <= 0 or dt > T:
        raise ValueError("dt must lie in (0, T]")
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * T:
        raise ValueError("dt must divide T")
    u = np.asarray(u0, dtype=float).copy()
    if u.shape != (system.dim,):
        raise ValueError(f"initial state must have shape ({system.dim},)")
    psi = np.eye(system.dim)

    def japply(u, mat):
        return np.column_stack(
            [system.jacobian_apply(u, mat[:, j]) for j in range(mat.shape[1])]
        )

    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n_steps):
            k1u = system.rhs(u)
            k1p = japply(u, psi)
            k2u = system.rhs(u + 0.5 * dt * k1u)
            k2p = japply(u + 0.5 * dt * k1u, psi + 0.5 * dt * k1p)
            k3u = system.rhs(u + 0.5 * dt * k2u)
            k3p = japply(u + 0.5 * dt * k2u, psi + 0.5 * dt * k2p)
            k4u = system.rhs(u + dt * k3u)
            k4p = japply(u + dt * k3u, psi + dt * k3p)
            u = u + (dt / 6.0) * (k1u + 2 * k2u + 2 * k3u + k4u)
            psi = psi + (dt / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
            if not np.all(np.isfinite(psi)):
                raise OverflowError(
                    "fundamental matrix overflowed; use a smaller window T"
                )
    return u, psi


def full_ftle_oracle(system: GenericSystem, u0, T: float, dt: float,
                     t0: float = 0.0) -> FullFtleResult:
    """Brute-force FTLEs over [t0, t0 + T] from the right Cauchy-Green
    tensor C = Psi^T Psi: Lambda_i = log(sqrt(lambda_i(C))) / T, descending."""
    _, psi = fundamental_matrix(system, u0, T, dt)
    C = psi.T @ psi
    eigvals = np.linalg.eigvalsh(C)[::-1]
    eigvals = np.maximum(eigvals, np.finfo(float).tiny)
    exponents = np.log(np.sqrt(eigvals)) / T
    return FullFtleResult(exponents=exponents, window=(t0, t0 + T))
