"""eelab: data-driven precursors and forecasts of extreme dissipation events.

Pipeline: simulate Kolmogorov flow -> learn a quadratic spectral surrogate
of the dynamics -> evolve OTD modes with matrix-free Jacobian products ->
reduced-order finite-time Lyapunov exponents over sliding windows ->
sequence forecaster mapping the FTLE precursor to the future dissipation,
evaluated with rare-event classification metrics.
"""

__version__ = "0.1.0"
