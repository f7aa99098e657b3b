"""Variational recurrent network over graph signals.

Every step function accepts optional leading batch dimensions: a signal is
``(..., n, C)``, latents are ``(..., d_z)``, external features are
``(..., d_e)`` and the recurrent state holds ``(..., d_h)`` arrays.
Parameters are a flat ``dict`` of float64 arrays (or tracked ``Var``
leaves while differentiating).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, NamedTuple

import numpy as np

from . import diffmath as dm
from .diffmath import DimensionError, GaussianParams, Var
from .graph import ScaledLaplacian, chebyshev_apply

ModelParams = dict  # name -> np.ndarray


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int
    channels: int = 2
    cheb_order: int = 3
    graph_features: int = 8
    latent_dim: int = 16
    hidden_dim: int = 64
    ext_dim: int = 26
    sigma_floor: float = 1e-4

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == "sigma_floor":
                if not value > 0:
                    raise ValueError("sigma_floor must be positive")
            elif int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value}")

    @property
    def feature_dim(self) -> int:
        return self.n_nodes * self.graph_features

    @property
    def output_dim(self) -> int:
        return self.n_nodes * self.channels


class RnnState(NamedTuple):
    h: Var | np.ndarray
    c: Var | np.ndarray


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    k, c, f = cfg.cheb_order, cfg.channels, cfg.graph_features
    dz, dh, de = cfg.latent_dim, cfg.hidden_dim, cfg.ext_dim
    nf, nc = cfg.feature_dim, cfg.output_dim
    shapes = {
        "cheb": (k, c, f),
        "z_w": (dz, dh),
        "z_b": (dh,),
        "ext_w1": (de, dh),
        "ext_b1": (dh,),
        "ext_w2": (dh, dz),
        "ext_b2": (dz,),
    }
    for head, d_in, d_out in (("prior", dh, dz), ("enc", nf + dh, dz), ("dec", 2 * dh, nc)):
        shapes[f"{head}_w"] = (d_in, dh)
        shapes[f"{head}_b"] = (dh,)
        shapes[f"{head}_mu_w"] = (dh, d_out)
        shapes[f"{head}_mu_b"] = (d_out,)
        shapes[f"{head}_sd_w"] = (dh, d_out)
        shapes[f"{head}_sd_b"] = (d_out,)
    shapes["lstm_w"] = (nf + 2 * dh, 4 * dh)
    shapes["lstm_b"] = (4 * dh,)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, forget-gate bias 1, Chebyshev taps scaled by 1/K."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
            continue
        fan_in, fan_out = shape[-2], shape[-1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-bound, bound, size=shape)
    params["cheb"] /= cfg.cheb_order
    dh = cfg.hidden_dim
    params["lstm_b"][dh : 2 * dh] = 1.0
    return params


def glorot_bound(shape: tuple[int, ...]) -> float:
    return float(np.sqrt(6.0 / (shape[-2] + shape[-1])))


def _dense_heads(p, head: str, inp, floor: float) -> GaussianParams:
    hidden = dm.tanh(dm.add(dm.matmul(inp, p[f"{head}_w"]), p[f"{head}_b"]))
    mean = dm.add(dm.matmul(hidden, p[f"{head}_mu_w"]), p[f"{head}_mu_b"])
    raw = dm.add(dm.matmul(hidden, p[f"{head}_sd_w"]), p[f"{head}_sd_b"])
    return GaussianParams(mean, dm.add(dm.softplus(raw), floor))


def _shape(x) -> tuple[int, ...]:
    return x.shape if isinstance(x, Var) else np.shape(x)


class GraphVRNN:
    """Model structure: a config plus the (fixed) scaled graph Laplacian."""

    def __init__(self, config: ModelConfig, laplacian: ScaledLaplacian):
        if laplacian.n_nodes != config.n_nodes:
            raise DimensionError(
                f"config has {config.n_nodes} nodes but the graph has {laplacian.n_nodes}"
            )
        self.config = config
        self.laplacian = laplacian

    # -- feature extractors ------------------------------------------------

    def extract_x(self, p, x) -> Var:
        cfg = self.config
        shape = _shape(x)
        if shape[-2:] != (cfg.n_nodes, cfg.channels):
            raise DimensionError(f"signal shape {shape}, expected (..., {cfg.n_nodes}, {cfg.channels})")
        y = chebyshev_apply(p["cheb"], self.laplacian, x)
        return dm.reshape(y, shape[:-2] + (cfg.feature_dim,))

    def extract_z(self, p, z) -> Var:
        if _shape(z)[-1] != self.config.latent_dim:
            raise DimensionError(f"latent shape {_shape(z)}, expected last dim {self.config.latent_dim}")
        return dm.tanh(dm.add(dm.matmul(z, p["z_w"]), p["z_b"]))

    def extract_ext(self, p, e) -> Var:
        if _shape(e)[-1] != self.config.ext_dim:
            raise DimensionError(f"external features {_shape(e)}, expected last dim {self.config.ext_dim}")
        hidden = dm.tanh(dm.add(dm.matmul(e, p["ext_w1"]), p["ext_b1"]))
        return dm.add(dm.matmul(hidden, p["ext_w2"]), p["ext_b2"])

    # -- distributions -----------------------------------------------------

    def zero_state(self, batch: tuple[int, ...] = ()) -> RnnState:
        shape = tuple(batch) + (self.config.hidden_dim,)
        return RnnState(np.zeros(shape), np.zeros(shape))

    def prior_step(self, p, state: RnnState) -> GaussianParams:
        return _dense_heads(p, "prior", state.h, self.config.sigma_floor)

    def _encode(self, p, fx, e, state: RnnState) -> GaussianParams:
        q = _dense_heads(p, "enc", dm.concat([fx, state.h], axis=-1), self.config.sigma_floor)
        return GaussianParams(dm.add(q.mean, self.extract_ext(p, e)), q.std)

    def encode_step(self, p, x, e, state: RnnState) -> GaussianParams:
        return self._encode(p, self.extract_x(p, x), e, state)

    def _decode(self, p, fz, state: RnnState) -> GaussianParams:
        return _dense_heads(p, "dec", dm.concat([fz, state.h], axis=-1), self.config.sigma_floor)

    def decode_step(self, p, z, state: RnnState) -> GaussianParams:
        """Generating distribution over the flattened ``n*C`` signal (node-major)."""
        return self._decode(p, self.extract_z(p, z), state)

    # -- recurrence --------------------------------------------------------

    def _lstm(self, p, fx, fz, state: RnnState) -> RnnState:
        dh = self.config.hidden_dim
        gates = dm.add(dm.matmul(dm.concat([fx, fz, state.h], axis=-1), p["lstm_w"]), p["lstm_b"])
        i = dm.sigmoid(gates[..., :dh])
        f = dm.sigmoid(gates[..., dh : 2 * dh])
        o = dm.sigmoid(gates[..., 2 * dh : 3 * dh])
        g = dm.tanh(gates[..., 3 * dh :])
        c = dm.add(dm.mul(f, state.c), dm.mul(i, g))
        h = dm.mul(o, dm.tanh(c))
        return RnnState(h, c)

    def recurrence_step(self, p, x, z, state: RnnState) -> RnnState:
        return self._lstm(p, self.extract_x(p, x), self.extract_z(p, z), state)

    # -- objective ---------------------------------------------------------

    def step_elbo(self, p, x, e, state: RnnState, noise) -> tuple[Var, RnnState]:
        """Single-sample ELBO term for one step and the advanced state."""
        fx = self.extract_x(p, x)
        prior = self.prior_step(p, state)
        post = self._encode(p, fx, e, state)
        z = dm.reparameterize(post, noise)
        fz = self.extract_z(p, z)
        dec = self._decode(p, fz, state)
        x_flat = dm.reshape(x, _shape(x)[:-2] + (self.config.output_dim,))
        recon = dm.gaussian_log_density(x_flat, dec.mean, dec.std, axis=-1)
        kl = dm.kl_diag_gaussians(post, prior, axis=-1)
        return dm.sub(recon, kl), self._lstm(p, fx, fz, state)

    def batch_sequence_elbo(self, p, xs, es, noise) -> Var:
        """Per-sequence ELBO for ``xs`` of shape ``(B, T, n, C)``; returns ``(B,)``."""
        xs = np.asarray(xs, dtype=np.float64)
        es = np.asarray(es, dtype=np.float64)
        if xs.ndim != 4 or es.shape[:2] != xs.shape[:2] or noise.shape[:2] != xs.shape[:2]:
            raise DimensionError(f"batched series {xs.shape}, externals {es.shape}, noise {noise.shape}")
        if xs.shape[1] < 1:
            raise ValueError("empty sequence")
        state = self.zero_state((xs.shape[0],))
        total = None
        for t in range(xs.shape[1]):
            elbo_t, state = self.step_elbo(p, xs[:, t], es[:, t], state, noise[:, t])
            total = elbo_t if total is None else dm.add(total, elbo_t)
        return total

    def sequence_elbo(self, p, xs, es, seed: int) -> Var:
        """Accumulated single-sample ELBO of one series ``(T, n, C)``."""
        xs = np.asarray(xs, dtype=np.float64)
        es = np.asarray(es, dtype=np.float64)
        if xs.ndim != 3 or len(xs) == 0:
            raise ValueError(f"expected a non-empty (T, n, C) series, got {xs.shape}")
        if len(es) != len(xs):
            raise DimensionError(f"series length {len(xs)} vs externals length {len(es)}")
        noise = np.random.default_rng(seed).standard_normal((len(xs), self.config.latent_dim))
        out = self.batch_sequence_elbo(p, xs[None], es[None], noise[None])
        return dm.reshape(out, ())

    # -- sampling ----------------------------------------------------------

    def generate(self, p, steps: int, seed: int) -> np.ndarray:
        """Ancestral sample of ``steps`` snapshots, shape ``(steps, n, C)``."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        cfg = self.config
        rng = np.random.default_rng(seed)
        state = self.zero_state()
        out = np.empty((steps, cfg.n_nodes, cfg.channels))
        for t in range(steps):
            prior = self.prior_step(p, state)
            z = dm.reparameterize(prior, rng.standard_normal(cfg.latent_dim))
            fz = self.extract_z(p, z)
            dec = self._decode(p, fz, state)
            x = dec.mean.value + dec.std.value * rng.standard_normal(cfg.output_dim)
            out[t] = x.reshape(cfg.n_nodes, cfg.channels)
            state = self._lstm(p, self.extract_x(p, out[t]), fz, state)
        return out


def as_numpy(state: RnnState) -> RnnState:
    return RnnState(*(s.value if isinstance(s, Var) else s for s in state))


def check_params(cfg: ModelConfig, params: Mapping[str, np.ndarray]) -> None:
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise DimensionError(f"parameter names differ (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if np.shape(params[name]) != shape:
            raise DimensionError(f"{name}: shape {np.shape(params[name])}, expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise ValueError(f"{name}: non-finite weights")
