"""End-to-end glue: scale and split a series, train, calibrate, benchmark.

The detector always scores a span starting from a recurrent state warmed
up on the ``warmup`` steps that precede it, so the first scored step is not
penalised for a cold zero state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detection import (
    DetectionReport,
    ThresholdCalibration,
    calibrate_threshold,
    detect_series,
    warm_state,
)
from .experiment import (
    KINDS,
    BenchmarkResult,
    Calendar,
    GraphSeries,
    ScalerState,
    fit_scale,
    from_signals,
    run_benchmark,
    split_index,
    to_signals,
)
from .graph import ScaledLaplacian, WeightedGraph
from .model import GraphVRNN, ModelConfig, ModelParams, RnnState
from .training import TrainConfig, TrainReport, split_validation, train_model

WARMUP = 96


@dataclass
class PreparedData:
    scaled: np.ndarray  # (T, C, n), scaled with the training-span scaler
    externals: np.ndarray  # (T, d_e)
    scaler: ScalerState
    cut: int
    graph: WeightedGraph

    @property
    def signals(self) -> np.ndarray:
        return to_signals(self.scaled)

    @property
    def test(self) -> np.ndarray:
        return self.scaled[self.cut :]


def prepare(values: np.ndarray, calendar: Calendar | np.ndarray, graph: WeightedGraph,
            fraction: float = 0.8, scaler: ScalerState | None = None) -> PreparedData:
    cut = split_index(len(values), fraction)
    scaler = fit_scale(values[:cut]) if scaler is None else scaler
    ext = calendar.encode() if isinstance(calendar, Calendar) else np.asarray(calendar, dtype=np.float64)
    if len(ext) != len(values):
        raise ValueError(f"{len(values)} series steps but {len(ext)} external rows")
    return PreparedData(scaler.apply(values), ext, scaler, cut, graph)


def prepare_series(series: GraphSeries, calendar: Calendar, fraction: float = 0.8) -> PreparedData:
    return prepare(series.values, calendar, series.graph, fraction)


def build_model(graph: WeightedGraph, channels: int = 2, **model_kwargs) -> GraphVRNN:
    cfg = ModelConfig(n_nodes=graph.n_nodes, channels=channels, **model_kwargs)
    return GraphVRNN(cfg, ScaledLaplacian.from_graph(graph))


def warm_before(model: GraphVRNN, params: ModelParams, data: PreparedData, start: int,
                warmup: int = WARMUP) -> RnnState:
    lo = max(0, start - warmup)
    return warm_state(model, params, data.signals[lo:start], data.externals[lo:start])


def calibrate(model: GraphVRNN, params: ModelParams, data: PreparedData, train_cfg: TrainConfig,
              quantile: float = 0.01, od_threshold: float = 0.95, samples: int = 16,
              seed: int = 0, warmup: int = WARMUP) -> ThresholdCalibration:
    """Threshold from the clean validation tail of the training span."""
    xs, es = data.signals[: data.cut], data.externals[: data.cut]
    (tr_x, _), (va_x, va_e) = split_validation(xs, es, train_cfg.val_fraction)
    start = len(tr_x)
    state = warm_before(model, params, data, start, warmup)
    report = detect_series(model, params, va_x, va_e, None, samples, seed, state)
    return calibrate_threshold(report.scores, quantile, od_threshold)


def fit(model: GraphVRNN, data: PreparedData, train_cfg: TrainConfig,
        init: ModelParams | None = None) -> tuple[ModelParams, TrainReport]:
    return train_model(model, data.signals[: data.cut], data.externals[: data.cut], train_cfg, init)


def detect_test(model: GraphVRNN, params: ModelParams, data: PreparedData,
                calibration: ThresholdCalibration | None, samples: int = 16, seed: int = 0,
                warmup: int = WARMUP, values: np.ndarray | None = None) -> DetectionReport:
    """Score the test span (or ``values`` standing in for it, same length)."""
    test = data.test if values is None else values
    state = warm_before(model, params, data, data.cut, warmup)
    report = detect_series(model, params, to_signals(test), data.externals[data.cut :],
                           calibration, samples, seed, state)
    report.t0 = data.cut
    return report


def reconstruction_rmse(report: DetectionReport, clean_test: np.ndarray) -> float:
    """RMSE of the predictive mean against the observed ``(T, C, n)`` span."""
    obs = to_signals(clean_test).reshape(len(clean_test), -1)
    return float(np.sqrt(np.mean((report.pred_mean - obs) ** 2)))


def predictive_sigma(report: DetectionReport, data: PreparedData) -> np.ndarray:
    """Predictive stddev of a clean run in ``(T, C, n)`` layout."""
    n, c = data.graph.n_nodes, data.scaled.shape[1]
    return from_signals(report.pred_std.reshape(-1, n, c))


def benchmark_all(model: GraphVRNN, params: ModelParams, data: PreparedData,
                  calibration: ThresholdCalibration, grid: tuple[int, int], trials: int,
                  seed: int = 0, kinds=KINDS, samples: int = 16,
                  warmup: int = WARMUP) -> dict[str, BenchmarkResult]:
    clean = detect_test(model, params, data, None, samples, seed, warmup)
    sigma = predictive_sigma(clean, data)
    state = warm_before(model, params, data, data.cut, warmup)
    return {
        kind: run_benchmark(model, params, data.test, data.externals[data.cut :], kind, trials,
                            seed, calibration, grid, state, sigma, samples)
        for kind in kinds
    }
