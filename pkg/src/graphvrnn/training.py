"""ELBO maximisation over fixed-length windows with ADAM."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .model import GraphVRNN, ModelParams, init_params

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    window: int = 96
    batch_size: int = 8
    clip_norm: float = 5.0
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.clip_norm <= 0:
            raise ValueError("learning_rate, batch_size and clip_norm must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class TrainReport:
    train_elbo: list[float] = field(default_factory=list)
    val_elbo: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_elbo", "val_elbo", "seconds"])
            for i, row in enumerate(zip(self.train_elbo, self.val_elbo, self.seconds), 1):
                w.writerow([i, repr(row[0]), repr(row[1]), f"{row[2]:.3f}"])

    @classmethod
    def from_csv(cls, path) -> "TrainReport":
        report = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                report.train_elbo.append(float(row["train_elbo"]))
                report.val_elbo.append(float(row["val_elbo"]))
                report.seconds.append(float(row["seconds"]))
        if report.val_elbo:
            report.best_epoch = int(np.argmax(report.val_elbo)) + 1
        return report


def make_windows(series: np.ndarray, externals: np.ndarray, window: int):
    """Cut aligned, non-overlapping windows; a trailing remainder is dropped."""
    series = np.asarray(series)
    externals = np.asarray(externals)
    if len(series) != len(externals):
        raise ValueError(f"series length {len(series)} vs externals length {len(externals)}")
    count = len(series) // window
    if count == 0:
        raise ValueError(f"series of length {len(series)} is shorter than one window ({window})")
    return [
        (series[w * window : (w + 1) * window], externals[w * window : (w + 1) * window])
        for w in range(count)
    ]


def split_validation(series: np.ndarray, externals: np.ndarray, fraction: float):
    """Hold out the trailing ``fraction`` of the training span for validation."""
    n_val = max(1, int(round(fraction * len(series))))
    cut = len(series) - n_val
    return (series[:cut], externals[:cut]), (series[cut:], externals[cut:])


def validation_elbo(model: GraphVRNN, params: ModelParams, xs, es, seed: int) -> float:
    """Per-step ELBO of the validation span, read as one sequence."""
    return float(model.sequence_elbo(params, xs, es, seed).value) / len(xs)


def _loss_and_grads(model: GraphVRNN, params: ModelParams, xs, es, noise):
    with dm.Tape() as tape:
        tracked = {k: tape.watch(v) for k, v in params.items()}
        elbo = model.batch_sequence_elbo(tracked, xs, es, noise)
        loss = dm.mul(-1.0 / xs.shape[0], dm.sum_(elbo))
    grads = dm.gradient(tape, loss, tracked)
    return float(loss.value), elbo.value, grads


def train_model(
    model: GraphVRNN,
    series: np.ndarray,
    externals: np.ndarray,
    config: TrainConfig,
    init: ModelParams | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Fit ``model`` on a clean ``(T, n, C)`` series.

    The trailing ``val_fraction`` of the series is kept for validation and
    the parameters with the best validation ELBO are returned.
    """
    params = init if init is not None else init_params(model.config, config.seed)
    report = TrainReport()
    if config.epochs == 0:
        return params, report
    (tr_x, tr_e), (va_x, va_e) = split_validation(series, externals, config.val_fraction)
    windows = make_windows(tr_x, tr_e, config.window)
    win_x = np.stack([w[0] for w in windows])
    win_e = np.stack([w[1] for w in windows])
    rng = np.random.default_rng(config.seed)
    adam = dm.AdamState(lr=config.learning_rate)
    val_seed = config.seed + 7919
    best = (-np.inf, params)
    dz = model.config.latent_dim
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(windows))
        elbo_sum = 0.0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            noise = rng.standard_normal((len(idx), config.window, dz))
            loss, elbos, grads = _loss_and_grads(model, params, win_x[idx], win_e[idx], noise)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = dm.clip_by_global_norm(grads, config.clip_norm)
            params, adam = dm.adam_step(adam, params, grads)
            elbo_sum += float(elbos.sum())
        val = validation_elbo(model, params, va_x, va_e, val_seed)
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite validation ELBO at epoch {epoch}")
        report.train_elbo.append(elbo_sum / (len(windows) * config.window))
        report.val_elbo.append(val)
        report.seconds.append(time.perf_counter() - t0)
        if val > best[0]:
            best = (val, params)
            report.best_epoch = epoch
        log.info("epoch %d train %.4f val %.4f", epoch, report.train_elbo[-1], val)
    return best[1], report
