"""Streaming ELBO scoring, threshold calibration and LRT localisation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .diffmath import DimensionError, DomainError, GaussianParams
from .model import GraphVRNN, ModelParams, RnnState, as_numpy

EPS_RATIO = 1e-3
EPS_VAR = 1e-6


# -- chi-square ------------------------------------------------------------


def _gamma_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_contfrac(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma function ``P(a, x)``."""
    if x < 0 or a <= 0:
        raise DomainError(f"regularized_gamma_p: need a > 0 and x >= 0, got a={a}, x={x}")
    if x == 0:
        return 0.0
    if x < a + 1.0:
        return min(1.0, _gamma_series(a, x))
    return max(0.0, 1.0 - _gamma_contfrac(a, x))


def chi_square_cdf(x: float, df: int = 1) -> float:
    if df < 1:
        raise DomainError(f"chi_square_cdf: df must be >= 1, got {df}")
    if x < 0:
        raise DomainError(f"chi_square_cdf: negative argument {x}")
    return regularized_gamma_p(0.5 * df, 0.5 * x)


# -- likelihood ratio test -------------------------------------------------


def lrt_statistic(observed, mean, variance, eps_ratio: float = EPS_RATIO, eps_var: float = EPS_VAR):
    """Likelihood ratio statistic for a single Gaussian observation.

    The alternative is centred on the observation with its variance scaled
    by ``observed / mean``; when that ratio is not usable (``mean <= 0`` or
    ``observed <= eps_ratio * mean``) the variance falls back to
    ``max(variance * eps_ratio, eps_var)``. The null model is a member of
    the proportional family, so the supremum is never below the null
    likelihood and the statistic is floored at zero.
    """
    x = np.asarray(observed, dtype=np.float64)
    mu = np.asarray(mean, dtype=np.float64)
    var = np.asarray(variance, dtype=np.float64)
    if np.any(var <= 0):
        raise DomainError("lrt_statistic: variance must be positive")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        usable = (mu > 0) & (x > eps_ratio * mu)
        alt_var = np.where(usable, var * x / np.where(mu > 0, mu, 1.0), np.maximum(var * eps_ratio, eps_var))
    ll_null = -0.5 * np.log(2 * np.pi * var) - 0.5 * (x - mu) ** 2 / var
    ll_alt = -0.5 * np.log(2 * np.pi * alt_var)
    stat = np.maximum(-2.0 * (ll_null - ll_alt), 0.0)
    return float(stat) if stat.ndim == 0 else stat


def anomalous_degree(observed, mean, variance, df: int = 1):
    stat = np.atleast_1d(lrt_statistic(observed, mean, variance))
    od = np.array([chi_square_cdf(float(s), df) for s in stat.ravel()]).reshape(stat.shape)
    return od if np.ndim(observed) else float(od[0])


def localize(
    predictive: GaussianParams, x_t: np.ndarray, od_threshold: float = 0.95
) -> list[tuple[int, int, float]]:
    """Entries whose anomalous degree exceeds ``od_threshold``.

    ``predictive`` covers the flattened node-major signal; ``x_t`` is
    ``(n, C)``. Returns ``(node, channel, od)`` sorted by decreasing od.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    mean = np.asarray(dm._val(predictive.mean)).reshape(-1)
    std = np.asarray(dm._val(predictive.std)).reshape(-1)
    if mean.size != x_t.size or std.size != x_t.size:
        raise DimensionError(f"predictive covers {mean.size} entries, signal has {x_t.size}")
    od = anomalous_degree(x_t.reshape(-1), mean, std * std)
    n_ch = x_t.shape[1]
    hits = [(int(i // n_ch), int(i % n_ch), float(od[i])) for i in np.nonzero(od > od_threshold)[0]]
    hits.sort(key=lambda r: (-r[2], r[0], r[1]))
    return hits


# -- scoring ---------------------------------------------------------------


def _tile(state: RnnState, count: int) -> RnnState:
    return RnnState(*(np.broadcast_to(s, (count,) + s.shape) for s in state))


def score_step(
    model: GraphVRNN,
    params: ModelParams,
    state: RnnState,
    x_t: np.ndarray,
    e_t: np.ndarray,
    samples: int = 16,
    seed=0,
) -> tuple[float, RnnState, GaussianParams]:
    """Monte-Carlo detection bound for one step.

    Returns the bound, the state advanced with the observed signal (and the
    posterior mean latent), and the prior-predictive Gaussian over the
    flattened signal (mixture moments of ``samples`` prior draws).
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    cfg = model.config
    state = as_numpy(state)
    rng = np.random.default_rng(seed)
    fx = model.extract_x(params, x_t)
    prior = model.prior_step(params, state)
    post = model._encode(params, fx, e_t, state)
    eps = rng.standard_normal((2 * samples, cfg.latent_dim))
    z = np.concatenate(
        [
            post.mean.value + post.std.value * eps[:samples],
            prior.mean.value + prior.std.value * eps[samples:],
        ]
    )
    dec = model._decode(params, model.extract_z(params, z), _tile(state, 2 * samples))
    mu, sd = dec.mean.value, dec.std.value
    x_flat = np.broadcast_to(np.asarray(x_t, dtype=np.float64).reshape(-1), (samples, cfg.output_dim))
    recon = dm.gaussian_log_density(x_flat, mu[:samples], sd[:samples], axis=-1).value
    kl = dm.kl_diag_gaussians(post, prior).value
    bound = float(recon.mean() - kl)
    pm, ps = mu[samples:], sd[samples:]
    pred_mean = pm.mean(axis=0)
    pred_var = (ps * ps).mean(axis=0) + pm.var(axis=0)
    nxt = model._lstm(params, fx, model.extract_z(params, post.mean.value), state)
    return bound, as_numpy(nxt), GaussianParams(pred_mean, np.sqrt(pred_var))


def advance_state(model: GraphVRNN, params: ModelParams, state: RnnState, x_t, e_t) -> RnnState:
    """Recurrence update with the posterior-mean latent, without scoring."""
    state = as_numpy(state)
    fx = model.extract_x(params, x_t)
    post = model._encode(params, fx, e_t, state)
    return as_numpy(model._lstm(params, fx, model.extract_z(params, post.mean.value), state))


def warm_state(model: GraphVRNN, params: ModelParams, xs, es) -> RnnState:
    state = model.zero_state()
    for x_t, e_t in zip(xs, es):
        state = advance_state(model, params, state, x_t, e_t)
    return state


@dataclass(frozen=True)
class ThresholdCalibration:
    threshold: float
    quantile: float = 0.01
    od_threshold: float = 0.95

    def __post_init__(self):
        if not 0 < self.quantile < 1:
            raise ValueError("quantile must lie in (0, 1)")
        if not 0 < self.od_threshold < 1:
            raise ValueError("od_threshold must lie in (0, 1)")


def calibrate_threshold(
    clean_scores, quantile: float = 0.01, od_threshold: float = 0.95, min_scores: int = 100
) -> ThresholdCalibration:
    """Score threshold at the empirical ``quantile`` of clean scores (linear interpolation)."""
    scores = np.asarray(clean_scores, dtype=np.float64)
    if scores.size < min_scores:
        raise ValueError(f"need at least {min_scores} clean scores, got {scores.size}")
    return ThresholdCalibration(float(np.quantile(scores, quantile)), quantile, od_threshold)


@dataclass
class DetectionReport:
    scores: np.ndarray
    flags: np.ndarray
    nodes: dict[int, list[tuple[int, int, float]]] = field(default_factory=dict)
    pred_mean: np.ndarray | None = None
    pred_std: np.ndarray | None = None
    t0: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "score", "flagged", "top_nodes"])
            for i, (s, f) in enumerate(zip(self.scores, self.flags)):
                top = ";".join(f"{n}:{c}:{od:.4f}" for n, c, od in self.nodes.get(i, []))
                w.writerow([self.t0 + i, repr(float(s)), int(f), top])

    @classmethod
    def from_csv(cls, path) -> "DetectionReport":
        scores, flags, nodes = [], [], {}
        t0 = None
        with open(path, newline="") as fh:
            for i, row in enumerate(csv.DictReader(fh)):
                t0 = int(row["t"]) if t0 is None else t0
                scores.append(float(row["score"]))
                flags.append(bool(int(row["flagged"])))
                if row["top_nodes"]:
                    nodes[i] = [
                        (int(n), int(c), float(od))
                        for n, c, od in (item.split(":") for item in row["top_nodes"].split(";"))
                    ]
        return cls(np.array(scores), np.array(flags, dtype=bool), nodes, t0=t0 or 0)


def detect_series(
    model: GraphVRNN,
    params: ModelParams,
    xs: np.ndarray,
    es: np.ndarray,
    calibration: ThresholdCalibration | None = None,
    samples: int = 16,
    seed: int = 0,
    state: RnnState | None = None,
) -> DetectionReport:
    """Score ``xs`` (``(T, n, C)``) left to right and localise flagged steps.

    Step ``t`` uses the noise seed ``(seed, t)``. Without a calibration
    nothing is flagged. ``state`` lets the caller start from a warmed-up
    recurrent state instead of zeros.
    """
    xs = np.asarray(xs, dtype=np.float64)
    es = np.asarray(es, dtype=np.float64)
    if len(xs) != len(es):
        raise DimensionError(f"series length {len(xs)} vs externals length {len(es)}")
    state = model.zero_state() if state is None else state
    T = len(xs)
    scores = np.empty(T)
    flags = np.zeros(T, dtype=bool)
    pred_mean = np.empty((T, model.config.output_dim))
    pred_std = np.empty_like(pred_mean)
    nodes = {}
    for t in range(T):
        b, state, pred = score_step(model, params, state, xs[t], es[t], samples, (seed, t))
        scores[t] = b
        pred_mean[t], pred_std[t] = pred.mean, pred.std
        if calibration is not None and b < calibration.threshold:
            flags[t] = True
            nodes[t] = localize(pred, xs[t], calibration.od_threshold)
    return DetectionReport(scores, flags, nodes, pred_mean, pred_std)
