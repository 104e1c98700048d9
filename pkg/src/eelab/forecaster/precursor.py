"""Precursor channels for the forecaster.

The primary precursor is the leading reduced FTLE and its time
derivative; the baseline is the (kx=1, ky=0) spectral coefficient of
the streamwise velocity, whose magnitude drops ahead of dissipation
bursts.  Channels are standardized with statistics from the training
portion only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ftle import FtleSeries


@dataclass(frozen=True)
class PrecursorSeries:
    """Two-channel input series with training-split normalization stats."""

    times: np.ndarray
    channels: np.ndarray        # (n, 2), standardized
    raw: np.ndarray             # (n, 2), before standardization
    mean: np.ndarray
    std: np.ndarray
    kind: str

    def __len__(self):
        return self.channels.shape[0]


def time_derivative(values, dt):
    """Second-order derivative: central inside, one-sided at the ends."""
    values = np.asarray(values, dtype=float)
    if values.size < 3:
        raise ValueError("derivative needs at least 3 samples")
    out = np.empty_like(values)
    out[1:-1] = (values[2:] - values[:-2]) / (2.0 * dt)
    out[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * dt)
    out[-1] = (3.0 * values[-1] - 4.0 * values[-2] + values[-3]) / (2.0 * dt)
    return out


def _standardize(times, raw, train_fraction, kind):
    n_train = max(2, int(round(train_fraction * raw.shape[0])))
    mean = raw[:n_train].mean(axis=0)
    std = raw[:n_train].std(axis=0)
    std = np.where(std > 0, std, 1.0)
    channels = (raw - mean) / std
    return PrecursorSeries(times=np.asarray(times, dtype=float),
                           channels=channels, raw=raw, mean=mean, std=std,
                           kind=kind)


def build_precursor(series: FtleSeries,
                    train_fraction: float = 0.7) -> PrecursorSeries:
    """FTLE precursor: (Gamma_1, dGamma_1/dt), standardized."""
    if len(series.times) < 3:
        raise ValueError("FTLE series too short for a precursor")
    g1 = series.gammas[:, 0]
    dt = series.times[1] - series.times[0]
    raw = np.stack([g1, time_derivative(g1, dt)], axis=1)
    return _standardize(series.times, raw, train_fraction, kind="ftle")


def fourier_precursor(times, alpha10,
                      train_fraction: float = 0.7) -> PrecursorSeries:
    """Baseline precursor: real and imaginary parts of the (1, 0)
    streamwise Fourier coefficient."""
    alpha10 = np.asarray(alpha10)
    if alpha10.size == 0:
        raise ValueError("empty trajectory")
    raw = np.stack([alpha10.real, alpha10.imag], axis=1).astype(float)
    return _standardize(times, raw, train_fraction, kind="fourier")


def alpha10_from_trajectory(trajectory) -> np.ndarray:
    """Extract uhat_x(kx=1, ky=0) from every state of a trajectory."""
    return np.array([s.coeffs[1, 0, 0] for s in trajectory.states])
