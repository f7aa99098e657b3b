"""Synthetic grid traffic, anomaly injection and ranking metrics.

Series arrays in this module use the ``(T, C, n)`` layout (time, channel,
node) with node ``i*cols + j`` for grid cell ``(i, j)``. The model works on
``(T, n, C)``; :func:`to_signals` converts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .detection import ThresholdCalibration, detect_series
from .graph import WeightedGraph, build_grid_graph
from .model import GraphVRNN, ModelParams, RnnState

WEATHER_NAMES = (
    "sunny", "cloudy", "overcast", "rainy", "sprinkle", "moderate_rain", "heavy_rain",
    "rainstorm", "thunderstorm", "freezing_rain", "snowy", "light_snow", "moderate_snow",
    "heavy_snow", "foggy", "sand_storm",
)
WEATHER_DAMPING = (
    1.0, 0.98, 0.96, 0.9, 0.95, 0.88, 0.82, 0.75, 0.7, 0.8, 0.85, 0.9, 0.82, 0.75, 0.88, 0.78,
)
# categories beyond the first five are never drawn by default: a one-hot
# weather category absent from the training span leaves its posterior-shift
# weights untrained, which shows up as spurious anomalies
WEATHER_PROBS = (0.45, 0.25, 0.15, 0.1, 0.05) + (0.0,) * 11
TEMP_RANGE = (-24.1, 41.0)
WIND_MAX = 48.6
EXT_DIM = 7 + 1 + 16 + 1 + 1


def to_signals(values: np.ndarray) -> np.ndarray:
    """``(T, C, n)`` -> ``(T, n, C)``."""
    return np.ascontiguousarray(np.swapaxes(values, -1, -2))


def from_signals(signals: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.swapaxes(signals, -1, -2))


# -- synthetic data --------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    rows: int = 8
    cols: int = 8
    days: int = 40
    steps_per_day: int = 48
    noise_std: float = 0.02
    seed: int = 0
    weekend_damping: float = 0.75
    holiday_damping: float = 0.6
    holiday_rate: float = 0.05
    weather_damping: tuple[float, ...] = WEATHER_DAMPING
    weather_probs: tuple[float, ...] = WEATHER_PROBS
    night_level: float = 0.25
    ramp_steps: int = 8
    temp_coef: float = 0.05
    wind_coef: float = 0.1
    modulate: bool = True

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 2:
            raise ValueError(f"grid {self.rows}x{self.cols} is too small")
        if self.days < 1 or self.steps_per_day < 1:
            raise ValueError("days and steps_per_day must be positive")
        if len(self.weather_damping) != 16 or len(self.weather_probs) != 16:
            raise ValueError("weather tables need 16 entries")
        if abs(sum(self.weather_probs) - 1.0) > 1e-9 or min(self.weather_probs) < 0:
            raise ValueError("weather_probs must be a probability vector")
        damp = (self.weekend_damping, self.holiday_damping) + tuple(self.weather_damping)
        if any(not 0 < d <= 1 for d in damp):
            raise ValueError("damping factors must lie in (0, 1]")


@dataclass
class GraphSeries:
    values: np.ndarray  # (T, C, n)
    graph: WeightedGraph
    grid: tuple[int, int] | None = None
    step_minutes: int = 30

    @property
    def length(self) -> int:
        return self.values.shape[0]

    def signals(self) -> np.ndarray:
        return to_signals(self.values)


@dataclass
class Calendar:
    """Per-step raw external factors."""

    weekday: np.ndarray
    holiday: np.ndarray
    weather: np.ndarray
    temp: np.ndarray
    wind: np.ndarray

    def __len__(self) -> int:
        return len(self.weekday)

    def encode(self) -> np.ndarray:
        return encode_externals(self.weekday, self.holiday, self.weather, self.temp, self.wind)

    def slice(self, start: int, stop: int | None = None) -> "Calendar":
        s = np.s_[start:stop]
        return Calendar(self.weekday[s], self.holiday[s], self.weather[s], self.temp[s], self.wind[s])


def encode_externals(weekday, holiday, weather, temp, wind) -> np.ndarray:
    """One-hot weekday (7), holiday flag, one-hot weather (16), temperature and wind in [-1, 1]."""
    weekday = np.asarray(weekday, dtype=int)
    weather = np.asarray(weather, dtype=int)
    out = np.zeros((len(weekday), EXT_DIM))
    out[np.arange(len(weekday)), weekday] = 1.0
    out[:, 7] = np.asarray(holiday, dtype=float)
    out[np.arange(len(weekday)), 8 + weather] = 1.0
    lo, hi = TEMP_RANGE
    out[:, 24] = np.clip(2.0 * (np.asarray(temp) - lo) / (hi - lo) - 1.0, -1.0, 1.0)
    out[:, 25] = np.clip(2.0 * np.asarray(wind) / WIND_MAX - 1.0, -1.0, 1.0)
    return out


def _bump(s: np.ndarray, centre: float, width: float, period: int) -> np.ndarray:
    d = np.abs(s - centre)
    d = np.minimum(d, period - d)
    return np.exp(-0.5 * (d / width) ** 2)


def daily_profiles(cfg: SyntheticConfig) -> np.ndarray:
    """Noise-free weekday flow for one day, shape ``(steps_per_day, 2, n)``."""
    rows, cols, spd = cfg.rows, cfg.cols, cfg.steps_per_day
    i, j = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    base = 0.55 + 0.25 * np.sin(2 * np.pi * i / rows + 0.5) * np.cos(2 * np.pi * j / cols)
    base += 0.15 * np.cos(np.pi * (i + j) / max(rows + cols - 2, 1))
    morning = 0.5 + 0.3 * np.sin(np.pi * (i + 0.5) / rows) * np.cos(np.pi * (j + 0.5) / cols)
    base, morning = base.ravel(), morning.ravel()
    scale = spd / 48.0
    s = np.arange(spd, dtype=float)[:, None]
    am_in, pm_in = _bump(s, 16 * scale, 3 * scale, spd), _bump(s, 36 * scale, 3 * scale, spd)
    am_out, pm_out = _bump(s, 18 * scale, 3 * scale, spd), _bump(s, 38 * scale, 3 * scale, spd)
    inflow = cfg.night_level + morning * am_in + (1 - morning) * pm_in
    outflow = cfg.night_level + (1 - morning) * am_out + morning * pm_out
    return np.stack([inflow, outflow], axis=1) * base


def _ramp_days(day_factor: np.ndarray, ramp: int) -> np.ndarray:
    """Blend each day's factor in from the previous day's over the first ``ramp`` steps."""
    out = day_factor.copy()
    if ramp > 0 and len(day_factor) > 1:
        w = np.clip((np.arange(day_factor.shape[1]) + 1) / (ramp + 1), 0.0, 1.0)
        w = w * w * (3 - 2 * w)
        out[1:] = day_factor[:-1, :1] + (day_factor[1:] - day_factor[:-1, :1]) * w
    return out.ravel()


def generate_synthetic(cfg: SyntheticConfig) -> tuple[GraphSeries, Calendar]:
    """Grid traffic driven by a daily double-peak profile and external factors."""
    rng = np.random.default_rng(cfg.seed)
    spd, days = cfg.steps_per_day, cfg.days
    T = spd * days
    weekday_d = np.arange(days) % 7
    holiday_d = (rng.random(days) < cfg.holiday_rate).astype(int)
    weather_d = rng.choice(16, size=days, p=np.asarray(cfg.weather_probs))
    temp_d = rng.uniform(-5.0, 30.0, size=days)
    wind_d = np.minimum(rng.gamma(2.0, 4.0, size=days), WIND_MAX)
    step = np.arange(T)
    day = step // spd
    phase = (step % spd) / spd
    temp = np.clip(temp_d[day] + 4.0 * np.sin(2 * np.pi * (phase - 0.375)), *TEMP_RANGE)
    cal = Calendar(weekday_d[day], holiday_d[day], weather_d[day], temp, wind_d[day])

    flow = np.tile(daily_profiles(cfg), (days, 1, 1))
    if cfg.modulate:
        lo, hi = TEMP_RANGE
        factor = np.where(cal.weekday >= 5, cfg.weekend_damping, 1.0)
        factor = factor * np.where(cal.holiday == 1, cfg.holiday_damping, 1.0)
        factor = factor * np.asarray(cfg.weather_damping)[cal.weather]
        factor = _ramp_days(factor.reshape(days, spd), cfg.ramp_steps)
        temp_norm = 2.0 * (cal.temp - lo) / (hi - lo) - 1.0
        factor = factor * (1.0 + cfg.temp_coef * temp_norm - cfg.wind_coef * cal.wind / WIND_MAX)
        flow = flow * factor[:, None, None]
    if cfg.noise_std > 0:
        flow = flow + cfg.noise_std * rng.standard_normal(flow.shape)
    graph = build_grid_graph(cfg.rows, cfg.cols)
    return GraphSeries(flow, graph, (cfg.rows, cfg.cols)), cal


# -- scaling and splitting -------------------------------------------------


@dataclass(frozen=True)
class ScalerState:
    minimum: np.ndarray  # (C,)
    maximum: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        lo, hi = self.minimum[:, None], self.maximum[:, None]
        return (values - lo) / (hi - lo)

    def invert(self, scaled: np.ndarray) -> np.ndarray:
        lo, hi = self.minimum[:, None], self.maximum[:, None]
        return scaled * (hi - lo) + lo


def fit_scale(values: np.ndarray) -> ScalerState:
    """Per-channel global min/max of a ``(T, C, n)`` span."""
    lo = values.min(axis=(0, 2))
    hi = values.max(axis=(0, 2))
    if np.any(hi <= lo):
        raise ValueError("cannot scale a constant channel")
    return ScalerState(lo, hi)


def split_index(length: int, fraction: float = 0.8) -> int:
    if length < 10:
        raise ValueError(f"series of length {length} is too short to split")
    cut = int(np.floor(fraction * length))
    if cut < 1 or cut >= length:
        raise ValueError(f"fraction {fraction} leaves an empty span")
    return cut


def split_train_test(values: np.ndarray, fraction: float = 0.8):
    cut = split_index(len(values), fraction)
    return values[:cut], values[cut:]


# -- anomalies -------------------------------------------------------------

KINDS = ("GMS", "LMS", "GAC", "LAC")
# kind -> (half-width, duration range in steps, magnitude range)
PROTOCOL = {
    "GMS": (3, (30, 60), (0.8, 1.3)),
    "LMS": (1, (5, 10), (0.4, 0.6)),
    "GAC": (3, (30, 60), (10.0, 10.0)),
    "LAC": (0, (10, 20), (6.0, 6.0)),
}
SIGMA_FALLBACK = 0.05


@dataclass(frozen=True)
class AnomalyLabel:
    kind: str
    k: int
    p: int
    q: int
    halfwidth: int
    t0: int
    t1: int
    magnitude: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown anomaly type {self.kind!r}")
        if self.t1 < self.t0:
            raise ValueError(f"empty time range [{self.t0}, {self.t1}]")

    def cells(self, rows: int, cols: int) -> np.ndarray:
        """Node indices of the affected square."""
        hw = self.halfwidth
        if self.p - hw < 0 or self.q - hw < 0 or self.p + hw >= rows or self.q + hw >= cols:
            raise ValueError(f"square around ({self.p}, {self.q}) with half-width {hw} leaves the {rows}x{cols} grid")
        ii, jj = np.meshgrid(np.arange(self.p - hw, self.p + hw + 1), np.arange(self.q - hw, self.q + hw + 1), indexing="ij")
        return (ii * cols + jj).ravel()


def inject_anomaly(
    values: np.ndarray,
    label: AnomalyLabel,
    grid: tuple[int, int],
    seed: int = 0,
    sigma: np.ndarray | float | None = None,
):
    """Inject one anomaly into a scaled ``(T, C, n)`` test span.

    Mean shifts add ``magnitude``; amplitude changes multiply by ``1 + g``
    with ``g ~ N(0, (magnitude * sigma)^2)`` drawn per cell and step.
    ``sigma`` is a ``(T, C, n)`` array of predictive standard deviations or
    a constant (default 0.05). Returns ``(modified, step_mask, cell_mask)``.
    """
    values = np.asarray(values, dtype=np.float64)
    T, C, n = values.shape
    rows, cols = grid
    if rows * cols != n:
        raise ValueError(f"grid {rows}x{cols} does not match {n} nodes")
    if not 0 <= label.k < C:
        raise ValueError(f"channel {label.k} out of range")
    if label.t0 < 0 or label.t1 >= T:
        raise ValueError(f"time range [{label.t0}, {label.t1}] outside span of length {T}")
    nodes = label.cells(rows, cols)
    out = values.copy()
    cell_mask = np.zeros(values.shape, dtype=bool)
    if label.magnitude != 0:
        ts = np.arange(label.t0, label.t1 + 1)
        idx = np.ix_(ts, [label.k], nodes)
        if label.kind in ("GMS", "LMS"):
            out[idx] += label.magnitude
        else:
            sig = SIGMA_FALLBACK if sigma is None else sigma
            sig = np.broadcast_to(np.asarray(sig, dtype=np.float64), values.shape)[idx]
            g = np.random.default_rng(seed).standard_normal(sig.shape) * label.magnitude * sig
            out[idx] *= 1.0 + g
        cell_mask[idx] = True
    return out, cell_mask.any(axis=(1, 2)), cell_mask


def draw_label(
    kind: str, grid: tuple[int, int], length: int, rng: np.random.Generator, channels: int = 2
) -> AnomalyLabel:
    """Random centre, channel, duration, start and magnitude for ``kind``.

    The duration is drawn from the protocol range and the start uniformly
    among positions that keep the anomaly inside a span of ``length`` steps.
    """
    hw, (d_lo, d_hi), (lo, hi) = PROTOCOL[kind]
    if length < d_hi:
        raise ValueError(f"test span of {length} steps is shorter than the longest {kind} anomaly")
    rows, cols = grid
    if min(rows, cols) < 2 * hw + 1:
        raise ValueError(f"{kind} needs a square of side {2 * hw + 1}, grid is {rows}x{cols}")
    duration = int(rng.integers(d_lo, d_hi + 1))
    t0 = int(rng.integers(0, length - duration + 1))
    t1 = t0 + duration - 1
    p = int(rng.integers(hw, rows - hw))
    q = int(rng.integers(hw, cols - hw))
    k = int(rng.integers(0, channels))
    mag = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return AnomalyLabel(kind, k, p, q, hw, t0, t1, mag)


# -- metrics ---------------------------------------------------------------


def _check_labels(labels) -> np.ndarray:
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("need at least one positive and one negative label")
    return labels


def average_precision(scores, labels) -> float:
    """Sum of precision times recall increments over distinct score thresholds."""
    labels = _check_labels(labels)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / labels.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def auc_roc(scores, labels) -> float:
    """Mann-Whitney estimate of the ROC area; ties count one half."""
    labels = _check_labels(labels)
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# -- benchmark -------------------------------------------------------------


@dataclass
class TrialResult:
    trial: int
    label: AnomalyLabel
    ap: float
    auc: float
    localized: int
    localized_inside: int

    @property
    def localization_precision(self) -> float:
        return self.localized_inside / self.localized if self.localized else float("nan")


@dataclass
class BenchmarkResult:
    kind: str
    trials: list[TrialResult] = field(default_factory=list)

    def _stat(self, name: str, fn) -> float:
        return float(fn([getattr(t, name) for t in self.trials]))

    @property
    def mean_ap(self) -> float:
        return self._stat("ap", np.mean)

    @property
    def sd_ap(self) -> float:
        return self._stat("ap", np.std)

    @property
    def mean_auc(self) -> float:
        return self._stat("auc", np.mean)

    @property
    def sd_auc(self) -> float:
        return self._stat("auc", np.std)

    @property
    def localization_precision(self) -> float:
        total = sum(t.localized for t in self.trials)
        inside = sum(t.localized_inside for t in self.trials)
        return inside / total if total else float("nan")


def run_benchmark(
    model: GraphVRNN,
    params: ModelParams,
    clean_test: np.ndarray,
    externals: np.ndarray,
    kind: str,
    trials: int,
    seed: int,
    calibration: ThresholdCalibration,
    grid: tuple[int, int],
    state: RnnState | None = None,
    sigma: np.ndarray | None = None,
    samples: int = 16,
) -> BenchmarkResult:
    """Inject ``kind`` anomalies into fresh copies of a scaled ``(T, C, n)`` test span.

    Trial ``i`` draws its label and noise from ``seed + i``. ``sigma`` is
    the clean-data predictive standard deviation in ``(T, C, n)`` layout,
    used by the amplitude-change injectors.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    result = BenchmarkResult(kind)
    rows, cols = grid
    for i in range(trials):
        rng = np.random.default_rng(seed + i)
        label = draw_label(kind, grid, len(clean_test), rng, clean_test.shape[1])
        dirty, step_mask, _ = inject_anomaly(clean_test, label, grid, int(rng.integers(2**31)), sigma)
        report = detect_series(
            model, params, to_signals(dirty), externals, calibration, samples, seed + i, state
        )
        inside_nodes = set(label.cells(rows, cols).tolist())
        found = [node for hits in report.nodes.values() for node, _, _ in hits]
        result.trials.append(
            TrialResult(
                i,
                label,
                average_precision(-report.scores, step_mask),
                auc_roc(-report.scores, step_mask),
                len(found),
                sum(node in inside_nodes for node in found),
            )
        )
    return result


# -- CSV formats -----------------------------------------------------------


def write_series_csv(values: np.ndarray, path, t0: int = 0) -> None:
    T, C, n = values.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "channel", "node", "value"])
        for t in range(T):
            for c in range(C):
                for v in range(n):
                    w.writerow([t0 + t, c, v, repr(float(values[t, c, v]))])


def read_series_csv(path) -> tuple[np.ndarray, int]:
    """Return ``(values, t0)`` with values in ``(T, C, n)`` layout."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append((int(r["t"]), int(r["channel"]), int(r["node"]), float(r["value"])))
    if not rows:
        raise ValueError(f"{path}: empty series")
    ts = np.array([r[0] for r in rows])
    t0 = int(ts.min())
    shape = (int(ts.max()) - t0 + 1, 1 + max(r[1] for r in rows), 1 + max(r[2] for r in rows))
    values = np.full(shape, np.nan)
    for t, c, v, x in rows:
        values[t - t0, c, v] = x
    if np.isnan(values).any():
        raise ValueError(f"{path}: series has missing entries")
    return values, t0


def write_externals_csv(cal: Calendar, path, t0: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "weekday", "holiday", "weather", "temp", "wind"])
        for t in range(len(cal)):
            w.writerow([
                t0 + t, int(cal.weekday[t]), int(cal.holiday[t]), int(cal.weather[t]),
                repr(float(cal.temp[t])), repr(float(cal.wind[t])),
            ])


def read_externals_csv(path) -> Calendar:
    cols = {k: [] for k in ("weekday", "holiday", "weather", "temp", "wind")}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            for k in ("weekday", "holiday", "weather"):
                cols[k].append(int(r[k]))
            cols["temp"].append(float(r["temp"]))
            cols["wind"].append(float(r["wind"]))
    return Calendar(*(np.array(cols[k]) for k in ("weekday", "holiday", "weather", "temp", "wind")))


LABEL_FIELDS = ("type", "k", "p", "q", "halfwidth", "t0", "t1", "magnitude")


def write_labels_csv(labels: list[AnomalyLabel], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LABEL_FIELDS)
        for lb in labels:
            w.writerow([lb.kind, lb.k, lb.p, lb.q, lb.halfwidth, lb.t0, lb.t1, repr(float(lb.magnitude))])


def read_labels_csv(path) -> list[AnomalyLabel]:
    with open(path, newline="") as fh:
        return [
            AnomalyLabel(
                r["type"], int(r["k"]), int(r["p"]), int(r["q"]), int(r["halfwidth"]),
                int(r["t0"]), int(r["t1"]), float(r["magnitude"]),
            )
            for r in csv.DictReader(fh)
        ]
