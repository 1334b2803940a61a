"""Threshold fitting, bias correction, and conversion-error accounting.

The quantized stand-in for relu under rate coding is

    clip_floor(x, T, v_th, phi) = (v_th / T) * clip(floor(T * x / v_th), 0, T * phi)

With a well-chosen threshold the converted net's per-layer firing rate tracks
this curve to within one quantum, so thresholds are fitted by minimizing the
mean squared gap between ``clip_floor`` and the cached analog activations on
a geometric candidate grid. Bias calibration then removes per-channel mean
offsets layer by layer, and ``measure_unevenness`` splits what is left into
clipping, quantization, and timing (unevenness) components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import LayerSnnConfig, rate_at_layer, run_snn, spiking_layer_indices
from .nn import ModelGraph
from .store import CalibrationCache


def clip_floor(x, timesteps: int, v_th: float, phi: int = 1):
    """Rate-coded relu surrogate; saturates at ``v_th * phi``."""
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if not v_th > 0:
        raise ValueError(f"v_th must be positive, got {v_th}")
    if phi < 1:
        raise ValueError(f"phi must be >= 1, got {phi}")
    arr = np.asarray(x, dtype=np.float64)
    q = np.floor(arr * timesteps / v_th)
    return (v_th / timesteps) * np.clip(q, 0.0, float(timesteps) * phi)


@dataclass(frozen=True)
class GridSpec:
    """Geometric threshold candidate grid anchored on activation percentiles."""

    size: int = 64
    low_percentile: float = 50.0
    high_percentile: float = 99.9


@dataclass
class ThresholdFit:
    layer: int
    v_th: float
    grid: np.ndarray
    mse: float
    grid_mse: np.ndarray
    degenerate: bool = False


_FALLBACK_GRID = (1e-3, 1.0)


def _candidate_grid(activations: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, bool]:
    hi = float(np.percentile(activations, spec.high_percentile))
    if hi <= 0.0:
        return np.geomspace(*_FALLBACK_GRID, spec.size), True
    lo = float(np.percentile(activations, spec.low_percentile))
    lo = max(lo, hi * 1e-3)
    return np.geomspace(lo, hi, spec.size), False


def fit_threshold(
    activations,
    timesteps: int,
    phi: int = 1,
    grid: GridSpec | np.ndarray | list | None = None,
    layer: int = -1,
) -> ThresholdFit:
    """Pick the grid candidate minimizing MSE(clip_floor(a), a).

    Ties go to the smallest candidate. All-zero activations cannot anchor a
    percentile grid; the fit then falls back to the smallest candidate and is
    flagged ``degenerate``.
    """
    a = np.asarray(activations, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError("cannot fit a threshold to zero activations")
    degenerate = False
    if grid is None or isinstance(grid, GridSpec):
        candidates, degenerate = _candidate_grid(a, grid or GridSpec())
    else:
        candidates = np.unique(np.asarray(grid, dtype=np.float64))
        if candidates.size == 0 or candidates[0] <= 0:
            raise ValueError("explicit grid must hold positive candidates")
        if float(a.max()) <= 0.0:
            degenerate = True
    mse = np.empty(len(candidates), dtype=np.float64)
    for i, cand in enumerate(candidates):
        err = clip_floor(a, timesteps, float(cand), phi) - a
        mse[i] = float(np.mean(err * err))
    best = int(np.argmin(mse))  # argmin takes the first (smallest) on ties
    return ThresholdFit(
        layer=int(layer),
        v_th=float(candidates[best]),
        grid=candidates,
        mse=float(mse[best]),
        grid_mse=mse,
        degenerate=degenerate,
    )


def fit_all_thresholds(
    model: ModelGraph,
    cache: CalibrationCache,
    timesteps: int,
    phi: int = 1,
    grid: GridSpec | None = None,
) -> list[ThresholdFit]:
    cache.check_model(model)
    fits = []
    for idx in spiking_layer_indices(model):
        fits.append(
            fit_threshold(cache.taps[idx], timesteps, phi=phi, grid=grid, layer=idx)
        )
    return fits


def configs_from_fits(fits: list[ThresholdFit]) -> list[LayerSnnConfig]:
    return [LayerSnnConfig(v_th=f.v_th) for f in fits]


def _channel_axes(tap: np.ndarray) -> tuple[int, ...]:
    # dense taps are [S, F] (reduce samples); conv taps [S, C, H, W] (reduce
    # samples and space, keep channels)
    if tap.ndim <= 2:
        return (0,)
    return (0, *range(2, tap.ndim))


def calibrate_biases(
    model: ModelGraph,
    configs: list[LayerSnnConfig],
    cache: CalibrationCache,
    timesteps: int,
    *,
    membrane_init: float = 0.5,
) -> ModelGraph:
    """Return a copy of ``model`` with per-channel mean rate offsets folded
    into the biases feeding each spiking layer.

    Works input to output so each correction sees the layers before it
    already corrected.
    """
    cache.check_model(model)
    corrected = model.clone()
    for idx in spiking_layer_indices(corrected):
        rates = rate_at_layer(
            corrected, configs, cache.inputs, timesteps, idx,
            membrane_init=membrane_init,
        )
        tap = np.asarray(cache.taps[idx], dtype=np.float64)
        axes = _channel_axes(tap)
        correction = tap.mean(axis=axes) - rates.mean(axis=axes)
        feeder = corrected.layers[idx - 1]
        feeder.bias = (feeder.bias.astype(np.float64) + correction).astype(np.float32)
    return corrected


@dataclass
class LayerErrorBreakdown:
    """Rate-vs-activation gap for one layer, split by cause.

    total = clipping + quantization + unevenness, elementwise:
      clipping      clip(x, 0, cap) - x          (capacity ceiling)
      quantization  clip_floor(x) - clip(x, 0, cap)   (rate granularity)
      unevenness    measured rate - clip_floor(x)     (arrival timing)
    """

    layer: int
    total: np.ndarray
    clipping: np.ndarray
    quantization: np.ndarray
    unevenness: np.ndarray

    def mean_abs(self, which: str = "total") -> float:
        return float(np.mean(np.abs(getattr(self, which))))

    def max_abs(self, which: str = "total") -> float:
        return float(np.max(np.abs(getattr(self, which))))

    def squared_shares(self) -> dict[str, float]:
        parts = {
            "clipping": float(np.sum(self.clipping**2)),
            "quantization": float(np.sum(self.quantization**2)),
            "unevenness": float(np.sum(self.unevenness**2)),
        }
        denom = sum(parts.values())
        if denom == 0.0:
            return {k: 0.0 for k in parts}
        return {k: v / denom for k, v in parts.items()}


@dataclass
class ConversionMetrics:
    layers: list[LayerErrorBreakdown]

    def by_layer(self) -> dict[int, LayerErrorBreakdown]:
        return {b.layer: b for b in self.layers}

    def mean_abs_total(self) -> float:
        return float(np.mean([b.mean_abs("total") for b in self.layers]))


def measure_unevenness(
    model: ModelGraph,
    configs: list[LayerSnnConfig],
    cache: CalibrationCache,
    timesteps: int,
    *,
    membrane_init: float = 0.5,
) -> ConversionMetrics:
    """Three-way conversion error decomposition on the calibration subset.

    Rates come from one full simulation (all spiking layers live), so later
    layers see real upstream spike traffic, while the reference activations
    are the cached analog taps.
    """
    cache.check_model(model)
    run = run_snn(model, configs, cache.inputs, timesteps, membrane_init=membrane_init)
    spiking = spiking_layer_indices(model)
    out = []
    for pos, idx in enumerate(spiking):
        cfg = configs[pos]
        x = np.asarray(cache.taps[idx], dtype=np.float64)
        rate = run.rates[idx]
        cap = cfg.threshold * cfg.phi
        clipped = np.clip(x, 0.0, cap)
        floored = clip_floor(x, timesteps, cfg.threshold, cfg.phi)
        out.append(
            LayerErrorBreakdown(
                layer=idx,
                total=rate - x,
                clipping=clipped - x,
                quantization=floored - clipped,
                unevenness=rate - floored,
            )
        )
    return ConversionMetrics(layers=out)


def write_calibration_report(path, fits: list[ThresholdFit], metrics: ConversionMetrics) -> None:
    """Human-readable conversion summary: fitted grids and error shares."""
    lines = ["format snnc-calibration-report"]
    for fit in fits:
        lines.append(
            f"threshold layer {fit.layer} v_th {fit.v_th!r} degenerate {str(fit.degenerate).lower()}"
        )
        for cand, m in zip(fit.grid, fit.grid_mse):
            lines.append(f"mse layer {fit.layer} candidate {float(cand)!r} value {float(m)!r}")
    for b in metrics.layers:
        shares = b.squared_shares()
        lines.append(
            f"errors layer {b.layer} "
            f"mean_abs_total {b.mean_abs('total')!r} "
            f"mean_abs_clipping {b.mean_abs('clipping')!r} "
            f"mean_abs_quantization {b.mean_abs('quantization')!r} "
            f"mean_abs_unevenness {b.mean_abs('unevenness')!r} "
            f"max_abs_total {b.max_abs('total')!r} "
            f"share_clipping {shares['clipping']!r} "
            f"share_quantization {shares['quantization']!r} "
            f"share_unevenness {shares['unevenness']!r}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
