"""Training and inference for the sequence forecaster.

Mini-batch Adam on the output-weighted MAE over the whole prediction
horizon (supervision at every intermediate step).  Runs are seeded and
bit-reproducible: parameter init, epoch shuffling and dropout masks all
come from one generator, and gradient accumulation is single-threaded
with a fixed order.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import DegenerateDistributionError, TrainingDivergedError
from .density import DensityEstimate, kde_density, owmae_loss
from .precursor import PrecursorSeries
from .transformer import (DESK_DIMS, ForecastModel, ForecastWindowSpec,
                          ModelDims, init_model, model_backward,
                          model_forward, parameter_shapes)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowDataset:
    """Forecast windows: encoder inputs, decoder seeds, target horizons."""

    enc: np.ndarray        # (N, n_delta, 2)
    dec_seed: np.ndarray   # (N, n_label + n_tau, 1)
    targets: np.ndarray    # (N, n_tau)
    times: np.ndarray      # (N,) anchor times t; the forecast covers (t, t+tau]

    def __len__(self):
        return self.enc.shape[0]


def build_windows(precursor: PrecursorSeries, z, spec: ForecastWindowSpec,
                  start: int = 0, stop: Optional[int] = None,
                  stride: int = 1) -> WindowDataset:
    """Slice aligned precursor/observable series into forecast windows.

    `z` is the observable on the same time grid as the precursor.  A
    window anchored at index i uses channels [i - n_delta + 1, i] as
    encoder input, z over [i - n_label + 1, i] as the decoder seed and
    z over [i + 1, i + n_tau] as the target; it is kept only when that
    whole span lies inside [start, stop).
    """
    z = np.asarray(z, dtype=float)
    n = len(precursor)
    if z.shape[0] != n:
        raise ValueError("observable and precursor series must be aligned")
    stop = n if stop is None else stop
    nd, nl, nt = spec.n_delta, spec.n_label, spec.n_tau
    anchors = []
    i = max(start + nd - 1, nd - 1)
    while i + nt < stop:
        anchors.append(i)
        i += stride
    if not anchors:
        raise ValueError("series segment too short for a single window")
    anchors = np.asarray(anchors)
    enc = np.stack([precursor.channels[i - nd + 1:i + 1] for i in anchors])
    seeds = np.zeros((len(anchors), nl + nt, 1))
    for j, i in enumerate(anchors):
        seeds[j, :nl, 0] = z[i - nl + 1:i + 1]
    targets = np.stack([z[i + 1:i + nt + 1] for i in anchors])
    return WindowDataset(enc=enc, dec_seed=seeds, targets=targets,
                         times=precursor.times[anchors])


@dataclass
class TrainResult:
    model: ForecastModel
    history: np.ndarray          # per-step training loss
    density: DensityEstimate


def _uniform_density(targets) -> DensityEstimate:
    lo = float(np.min(targets)) - 1.0
    hi = float(np.max(targets)) + 1.0
    return DensityEstimate(grid=np.array([lo, hi]), values=np.ones(2),
                           bandwidth=0.0, p_min=1.0)


def train(dataset: WindowDataset, spec: ForecastWindowSpec,
          dims: ModelDims = DESK_DIMS, seed: int = 0, epochs: int = 8,
          batch_size: int = 32, learning_rate: float = 1e-3,
          density: Optional[DensityEstimate] = None,
          weight_series=None) -> TrainResult:
    """Fit the forecaster with Adam on the output-weighted MAE.

    The weighting density defaults to a KDE of `weight_series` (or of
    the pooled training targets); degenerate (constant) targets fall
    back to uniform weighting, which reduces the loss to a plain MAE.
    """
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    if density is None:
        source = (np.asarray(weight_series, dtype=float)
                  if weight_series is not None else dataset.targets.ravel())
        try:
            density = kde_density(source)
        except DegenerateDistributionError:
            logger.warning("degenerate target distribution; "
                           "falling back to uniform loss weights")
            density = _uniform_density(dataset.targets)

    rng = np.random.default_rng(seed)
    model = init_model(dims, spec, rng)
    m_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            enc = dataset.enc[idx]
            seed_in = dataset.dec_seed[idx]
            targets = dataset.targets[idx]
            preds, cache = model_forward(model, enc, seed_in, rng=rng)
            w = density.evaluate(targets)
            residual = preds - targets
            loss = float(np.mean(np.abs(residual) / w))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}; try a smaller "
                    f"learning rate than {learning_rate}"
                )
            history.append(loss)
            dpreds = np.sign(residual) / (w * residual.size)
            grads = model_backward(model, cache, dpreds)
            step += 1
            bc1 = 1.0 - beta1**step
            bc2 = 1.0 - beta2**step
            for name in model.params:
                g = grads[name]
                m_state[name] = beta1 * m_state[name] + (1 - beta1) * g
                v_state[name] = beta2 * v_state[name] + (1 - beta2) * g * g
                mhat = m_state[name] / bc1
                vhat = v_state[name] / bc2
                model.params[name] -= (learning_rate * mhat
                                       / (np.sqrt(vhat) + eps))
    return TrainResult(model=model, history=np.array(history),
                       density=density)


def predict_batch(model: ForecastModel, enc, dec_seed,
                  chunk: int = 256) -> np.ndarray:
    """Deterministic inference over a window batch (dropout off)."""
    outs = []
    for lo in range(0, enc.shape[0], chunk):
        preds, _ = model_forward(model, enc[lo:lo + chunk],
                                 dec_seed[lo:lo + chunk], rng=None)
        outs.append(preds)
    return np.concatenate(outs, axis=0)


def predict(model: ForecastModel, channel_history, z_history) -> np.ndarray:
    """Forecast the next n_tau observable values from series tails.

    `channel_history` is the standardized two-channel precursor up to
    the current time (length >= n_delta); `z_history` the observable on
    the same grid (length >= n_label).
    """
    spec = model.spec
    ch = np.asarray(channel_history, dtype=float)
    zh = np.asarray(z_history, dtype=float)
    if ch.shape[0] < spec.n_delta:
        raise ValueError(
            f"need at least n_delta = {spec.n_delta} history steps"
        )
    if zh.shape[0] < spec.n_label:
        raise ValueError(
            f"need at least n_label = {spec.n_label} observable steps"
        )
    enc = ch[-spec.n_delta:][None]
    seed = np.zeros((1, spec.n_dec, 1))
    seed[0, :spec.n_label, 0] = zh[-spec.n_label:]
    preds, _ = model_forward(model, enc, seed, rng=None)
    return preds[0]


def evaluate_loss(model: ForecastModel, dataset: WindowDataset,
                  density: DensityEstimate) -> float:
    preds = predict_batch(model, dataset.enc, dataset.dec_seed)
    return owmae_loss(preds, dataset.targets, density)


# ---------------------------------------------------------------------------
# persistence

_FCST_MAGIC = b"FCST"
_FCST_VERSION = 1
_FCST_HEADER = struct.Struct("<4sIIIIIIddd")


def save_model(path, model: ForecastModel):
    """Binary checkpoint: dims, window spec, then parameter tensors in
    sorted-name order (shapes derive from dims)."""
    d = model.dims
    with open(path, "wb") as fh:
        fh.write(_FCST_HEADER.pack(_FCST_MAGIC, _FCST_VERSION, d.d, d.heads,
                                   d.n_enc, d.n_dec, d.d_ff, d.dropout,
                                   model.spec.tau, model.spec.snapshot_dt))
        for name in sorted(model.params):
            model.params[name].tofile(fh)


def load_model(path) -> ForecastModel:
    with open(path, "rb") as fh:
        (magic, version, d, heads, n_enc, n_dec, d_ff, dropout, tau,
         snapshot_dt) = _FCST_HEADER.unpack(fh.read(_FCST_HEADER.size))
        if magic != _FCST_MAGIC:
            raise ValueError(f"{path} is not an FCST checkpoint")
        if version != _FCST_VERSION:
            raise ValueError(f"unsupported FCST version {version}")
        dims = ModelDims(d=d, heads=heads, n_enc=n_enc, n_dec=n_dec,
                         d_ff=d_ff, dropout=dropout)
        spec = ForecastWindowSpec(tau=tau, snapshot_dt=snapshot_dt)
        params = {}
        for name, shape in sorted(parameter_shapes(dims).items()):
            count = int(np.prod(shape))
            params[name] = np.fromfile(fh, dtype=np.float64,
                                       count=count).reshape(shape)
    return ForecastModel(dims=dims, spec=spec, params=params)
