"""Noise schedules, the Gaussian forward process, training objectives, and
ancestral sampling.

Timesteps are 1-based: t runs over {1, ..., T} and indexes the schedule arrays
at t-1. Masks enter the diffusion in a {-1, +1} encoding so the noise is
symmetric around zero; 0 is the decode threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, mse_loss, no_grad
from .errors import ConfigError, DataError, ShapeError, SingularityError


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-timestep β_t, α_t = 1-β_t and ᾱ_t = Π_{s<=t} α_s for t = 1..T."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t: int):
        if not 1 <= int(t) <= self.T or int(t) != t:
            raise ConfigError(f"timestep {t} outside 1..{self.T}")


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linearly spaced betas inclusive of both endpoints; ᾱ by running product."""
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"beta bounds must satisfy 0 < start <= end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _raw(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _like(template, arr: np.ndarray):
    return Tensor(arr) if isinstance(template, Tensor) else arr


def forward_sample(x0, t: int, eps, sched: DiffusionSchedule):
    """x_t = sqrt(ᾱ_t)·x₀ + sqrt(1-ᾱ_t)·ε."""
    x0a, epsa = _raw(x0), _raw(eps)
    if x0a.shape != epsa.shape:
        raise ShapeError(f"x0 and eps shapes differ: {x0a.shape} vs {epsa.shape}")
    ab = sched.alpha_bar(t)
    xt = np.sqrt(ab) * x0a + np.sqrt(1.0 - ab) * epsa
    return _like(x0, xt)


def eps_to_x0(x_t, eps_hat, t: int, sched: DiffusionSchedule):
    """Invert the forward closed form for x₀ given a noise estimate."""
    xta, epsa = _raw(x_t), _raw(eps_hat)
    if xta.shape != epsa.shape:
        raise ShapeError(f"x_t and eps_hat shapes differ: {xta.shape} vs {epsa.shape}")
    ab = sched.alpha_bar(t)
    if ab <= 0.0:
        raise SingularityError(f"alpha_bar({t}) = {ab}; cannot recover x0")
    x0 = (xta - np.sqrt(1.0 - ab) * epsa) / np.sqrt(ab)
    return _like(x_t, x0)


def x0_to_eps(x_t, x0_hat, t: int, sched: DiffusionSchedule):
    """Invert the forward closed form for ε given an x₀ estimate."""
    xta, x0a = _raw(x_t), _raw(x0_hat)
    if xta.shape != x0a.shape:
        raise ShapeError(f"x_t and x0_hat shapes differ: {xta.shape} vs {x0a.shape}")
    ab = sched.alpha_bar(t)
    one_minus = 1.0 - ab
    if one_minus <= 0.0:
        raise SingularityError(f"1 - alpha_bar({t}) = {one_minus}; cannot recover eps")
    eps = (xta - np.sqrt(ab) * x0a) / np.sqrt(one_minus)
    return _like(x_t, eps)


# -- timestep weighting -----------------------------------------------------------


@dataclass(frozen=True)
class TimestepWeights:
    """Non-negative per-timestep loss weights with mean 1."""

    weights: np.ndarray = field()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.ndim != 1 or w.size == 0:
            raise ConfigError("weights must be a non-empty 1-d array")
        if not np.all(np.isfinite(w)) or np.any(w < 0.0):
            raise ConfigError("weights must be finite and non-negative")
        if abs(w.mean() - 1.0) > 1e-9:
            raise ConfigError(f"weights must average to 1, got mean {w.mean()!r}")

    def at(self, t: int) -> float:
        if not 1 <= t <= self.weights.size:
            raise ConfigError(f"timestep {t} outside 1..{self.weights.size}")
        return float(self.weights[t - 1])


def _weight_at(weights: TimestepWeights | None, t: int) -> float:
    return 1.0 if weights is None else weights.at(t)


# -- objectives ------------------------------------------------------------------


def epsilon_loss(model, x0, t: int, eps, sched: DiffusionSchedule, y=None,
                 weights: TimestepWeights | None = None) -> Tensor:
    """Noise-matching objective: w_t · mse(ε, model(x_t, t, y)).

    With y the model is conditioned on the image; without it the model runs
    unconditioned. The returned scalar participates in the autodiff graph
    through the model output only.
    """
    xt = Tensor(_raw(forward_sample(x0, t, eps, sched)))
    pred = model(xt, t, y)
    target = Tensor(_raw(eps))
    if pred.shape != target.shape:
        raise ShapeError(f"model output {pred.shape} does not match eps {target.shape}")
    return mse_loss(pred, target) * _weight_at(weights, t)


def x0_loss(model, x0, t: int, eps, sched: DiffusionSchedule,
            weights: TimestepWeights | None = None) -> Tensor:
    """Mask-recovery objective: w_t · mse(x₀, model(x_t, t)), unconditioned."""
    xt = Tensor(_raw(forward_sample(x0, t, eps, sched)))
    pred = model(xt, t, None)
    target = Tensor(_raw(x0))
    if pred.shape != target.shape:
        raise ShapeError(f"model output {pred.shape} does not match x0 {target.shape}")
    return mse_loss(pred, target) * _weight_at(weights, t)


# -- sampling --------------------------------------------------------------------


def sample_timestep(rng: np.random.Generator, sched: DiffusionSchedule) -> int:
    """Uniform draw from {1, ..., T}."""
    return int(rng.integers(1, sched.T + 1))


def ddpm_sample(model, shape, sched: DiffusionSchedule, rng: np.random.Generator,
                predict: str = "eps", y=None, clamp: bool = True) -> np.ndarray:
    """Ancestral sampling from t=T down to 1; returns the final x̂₀.

    ``predict`` names what the model outputs ("eps" or "x0"); when the model
    object advertises its own objective via a ``predicts`` attribute the two
    must agree. The per-step noise scale is σ_t = sqrt(β_t), with no noise
    added on the final step. With ``clamp`` the running x̂₀ estimate is held
    inside [-1, 1], matching the mask encoding.
    """
    if predict not in ("eps", "x0"):
        raise ConfigError(f"predict must be 'eps' or 'x0', got {predict!r}")
    advertised = getattr(model, "predicts", None)
    if advertised is not None and advertised != predict:
        raise ConfigError(f"model predicts {advertised!r} but sampler was asked for {predict!r}")

    x = rng.standard_normal(shape)
    with no_grad():
        for t in range(sched.T, 0, -1):
            out = model(Tensor(x), t, y).data
            ab = sched.alpha_bar(t)
            if predict == "eps":
                x0_hat = (x - np.sqrt(1.0 - ab) * out) / np.sqrt(ab)
            else:
                x0_hat = out
            if clamp:
                x0_hat = np.clip(x0_hat, -1.0, 1.0)
            if t > 1:
                eps_hat = (x - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
                mean = (x - sched.beta(t) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(sched.alpha(t))
                x = mean + np.sqrt(sched.beta(t)) * rng.standard_normal(shape)
            else:
                # At t=1, alpha_bar equals alpha, so the noiseless posterior
                # mean coincides with the x0 estimate itself.
                x = x0_hat
    return x


# -- mask encoding ------------------------------------------------------------------


def encode_mask(mask01) -> np.ndarray:
    """Map a {0,1} mask to the {-1,+1} range the diffusion operates on."""
    m = np.asarray(mask01, dtype=np.float64)
    if not np.all((m == 0.0) | (m == 1.0)):
        raise DataError("mask must contain only 0 and 1")
    return m * 2.0 - 1.0


def decode_mask(x) -> np.ndarray:
    """Threshold a real-valued mask estimate at 0 back to {0,1}."""
    return (np.asarray(_raw(x)) > 0.0).astype(np.float64)


# -- persistence ---------------------------------------------------------------------


def schedule_to_csv(sched: DiffusionSchedule, path) -> None:
    """Dump the schedule as CSV with columns t,beta,alpha,alpha_bar."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "beta", "alpha", "alpha_bar"])
        for i in range(sched.T):
            writer.writerow([i + 1, repr(float(sched.betas[i])),
                             repr(float(sched.alphas[i])), repr(float(sched.alpha_bars[i]))])
