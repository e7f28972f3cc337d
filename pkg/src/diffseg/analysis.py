"""Segmentation metrics, timestep profiling, and the per-pixel Bayes oracle.

The profiling half answers one question from several angles: how much of a
binary mask survives t steps of forward noising, as seen by a trained
denoiser (profiles), by an exact Bayes estimator (quadrature oracle), and
across dataset families (fingerprints). The derivative-based weighting turns
a mask-error profile into a training weight per timestep.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import no_grad
from .diffusion import (
    DiffusionSchedule,
    TimestepWeights,
    encode_mask,
    epsilon_loss,
    eps_to_x0,
    forward_sample,
    x0_loss,
)
from .errors import ConfigError, DataError, FormatError, IoError, ShapeError

# -- profile container ----------------------------------------------------------


@dataclass(frozen=True)
class TimestepProfile:
    """A scalar diagnostic evaluated on a grid of timesteps."""

    t_grid: tuple[int, ...]
    values: tuple[float, ...]
    smoothing_window: int = 1
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "t_grid", tuple(int(t) for t in self.t_grid))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.t_grid) != len(self.values):
            raise ConfigError(
                f"grid has {len(self.t_grid)} points but {len(self.values)} values"
            )
        if not self.t_grid:
            raise ConfigError("profile must contain at least one timestep")
        if any(b <= a for a, b in zip(self.t_grid, self.t_grid[1:])):
            raise ConfigError("t_grid must be strictly increasing")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ConfigError(f"smoothing window must be odd, got {self.smoothing_window}")
        if not all(np.isfinite(v) for v in self.values):
            raise DataError("profile values must be finite")


def smooth(profile: TimestepProfile, window: int) -> TimestepProfile:
    """Centered moving average; the window shrinks near the endpoints."""
    n = len(profile.values)
    if window % 2 == 0 or window < 1:
        raise ConfigError(f"window must be odd and positive, got {window}")
    if window > n:
        raise ConfigError(f"window {window} exceeds profile length {n}")
    kernel = np.ones(window)
    values = np.asarray(profile.values)
    averaged = np.convolve(values, kernel, mode="same") / np.convolve(
        np.ones(n), kernel, mode="same"
    )
    return TimestepProfile(profile.t_grid, tuple(averaged), 1, profile.label)


# -- segmentation metrics ----------------------------------------------------------


def _check_binary(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.isin(arr, (0.0, 1.0)).all():
        raise DataError(f"{name} must contain only 0 and 1")
    return arr


def iou(pred, gt) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    pred = _check_binary(pred, "pred")
    gt = _check_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    inter = float(np.logical_and(pred == 1.0, gt == 1.0).sum())
    union = float(np.logical_or(pred == 1.0, gt == 1.0).sum())
    if union == 0.0:
        return 1.0
    return inter / union


@dataclass(frozen=True)
class CalibrationReport:
    """Expected calibration error with its per-bin breakdown."""

    ece: float
    bin_confidence: tuple[float, ...]
    bin_accuracy: tuple[float, ...]
    bin_count: tuple[int, ...]

    def __post_init__(self):
        if not 0.0 <= self.ece <= 1.0:
            raise DataError(f"ece must lie in [0, 1], got {self.ece}")


def ece(prob_map, gt, bins: int = 10) -> CalibrationReport:
    """Calibration gap between foreground probabilities and outcomes.

    Pixels are binned by confidence max(p, 1-p) into equal-width bins over
    [0.5, 1.0]; empty bins contribute nothing.
    """
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    probs = np.asarray(prob_map, dtype=np.float64)
    if probs.size == 0:
        raise DataError("probability map is empty")
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise DataError("probabilities must lie in [0, 1]")
    gt = _check_binary(gt, "gt")
    if probs.shape != gt.shape:
        raise ShapeError(f"shapes differ: {probs.shape} vs {gt.shape}")

    confidence = np.maximum(probs, 1.0 - probs).ravel()
    correct = ((probs > 0.5) == (gt == 1.0)).ravel()
    index = np.clip(((confidence - 0.5) * (2 * bins)).astype(int), 0, bins - 1)

    total = confidence.size
    gap = 0.0
    mean_conf, accuracy, counts = [], [], []
    for b in range(bins):
        members = index == b
        count = int(members.sum())
        counts.append(count)
        if count == 0:
            mean_conf.append(0.0)
            accuracy.append(0.0)
            continue
        c = float(confidence[members].mean())
        a = float(correct[members].mean())
        mean_conf.append(c)
        accuracy.append(a)
        gap += (count / total) * abs(a - c)
    return CalibrationReport(gap, tuple(mean_conf), tuple(accuracy), tuple(counts))


# -- Bayes oracle ----------------------------------------------------------------

_QUAD_NODES = 240
_quad_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n not in _quad_cache:
        _quad_cache[n] = np.polynomial.legendre.leggauss(n)
    return _quad_cache[n]


def bayes_pixel_mmse(prior_p: float, sched: DiffusionSchedule, t: int) -> float:
    """Least possible MSE for recovering one {-1,+1} pixel from its noised value.

    The pixel is +1 with probability prior_p. Its noisy observation is
    sqrt(abar)*x0 + sqrt(1-abar)*eps, and the optimal estimator is the
    posterior mean m(x) = tanh(sqrt(abar)*x/(1-abar) + logit/2). The error
    1 - E[m^2] is integrated by Gauss-Legendre quadrature, one substitution
    per mixture component so narrow low-noise peaks stay resolved.
    """
    if not 0.0 < prior_p < 1.0:
        raise ConfigError(f"prior probability must lie in (0, 1), got {prior_p}")
    abar = sched.alpha_bar(t)
    var = 1.0 - abar
    if var <= 0.0:
        return 0.0
    s = np.sqrt(abar)
    sigma = np.sqrt(var)
    half_logit = 0.5 * np.log(prior_p / (1.0 - prior_p))

    nodes, weights = _gauss_legendre(_QUAD_NODES)
    u = 12.0 * nodes
    w = 12.0 * weights * np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)

    second_moment = 0.0
    for sign, mass in ((1.0, prior_p), (-1.0, 1.0 - prior_p)):
        x = sign * s + sigma * u
        m = np.tanh(s * x / var + half_logit)
        second_moment += mass * float(np.sum(w * m * m))
    return max(0.0, 1.0 - second_moment)


# -- profiling -----------------------------------------------------------------


def _grid_rng(seed: int, t: int) -> np.random.Generator:
    # One stream per grid point, so evaluation order cannot change results.
    return np.random.default_rng(np.random.SeedSequence([seed, t]))


def _check_profile_args(data, t_grid, sched, n_eval):
    t_grid = [int(t) for t in t_grid]
    if not t_grid:
        raise ConfigError("t_grid must be non-empty")
    if any(b <= a for a, b in zip(t_grid, t_grid[1:])):
        raise ConfigError("t_grid must be strictly increasing")
    for t in t_grid:
        sched.alpha_bar(t)  # validates the range
    if n_eval < 1:
        raise ConfigError(f"n_eval must be >= 1, got {n_eval}")
    if not data:
        raise DataError("no samples to profile on")
    return t_grid


def _default_window(n: int) -> int:
    w = min(51, n)
    return w if w % 2 else w - 1


def _eval_batch(data, rng, n_eval):
    idx = rng.integers(0, len(data), size=n_eval)
    masks = np.stack([encode_mask(data[i].mask) for i in idx])[:, None]
    images = np.stack([data[i].image for i in idx])[:, None]
    eps = rng.standard_normal(masks.shape)
    return masks, images, eps


def profile_mask_error(
    model,
    data,
    sched: DiffusionSchedule,
    t_grid,
    conditioned: bool = False,
    n_eval: int = 8,
    seed: int = 0,
    smoothing_window: int | None = None,
    label: str = "",
) -> TimestepProfile:
    """Mean squared error of the model's clean-mask estimate at each timestep.

    Noise-predicting models are converted to a mask estimate first; estimates
    are clamped to the mask encoding range. `conditioned` feeds the paired
    image to the model, which the model's variant must support.
    """
    t_grid = _check_profile_args(data, t_grid, sched, n_eval)
    predicts = getattr(model, "predicts", None)
    if predicts not in ("eps", "x0"):
        raise ConfigError(f"model must predict 'eps' or 'x0', got {predicts!r}")
    values = []
    with no_grad():
        for t in t_grid:
            masks, images, eps = _eval_batch(data, _grid_rng(seed, t), n_eval)
            x_t = forward_sample(masks, t, eps, sched)
            out = model(x_t, t, images if conditioned else None).data
            x0_hat = eps_to_x0(x_t, out, t, sched) if predicts == "eps" else out
            x0_hat = np.clip(x0_hat, -1.0, 1.0)
            values.append(float(np.mean((x0_hat - masks) ** 2)))
    window = smoothing_window if smoothing_window else _default_window(len(t_grid))
    return TimestepProfile(tuple(t_grid), tuple(values), window, label)


_OBJECTIVES = ("eq1", "eq2", "eq3")


def profile_training_loss(
    model,
    data,
    objective: str,
    sched: DiffusionSchedule,
    t_grid,
    n_eval: int = 8,
    seed: int = 0,
    smoothing_window: int | None = None,
    label: str = "",
) -> TimestepProfile:
    """Per-timestep value of a training objective, holding t fixed per point.

    eq1 diffuses the images unconditionally (generation), eq2 recovers the
    mask from its noised version, eq3 predicts the noise on the mask given
    the paired image.
    """
    if objective not in _OBJECTIVES:
        raise ConfigError(f"objective must be one of {_OBJECTIVES}, got {objective!r}")
    t_grid = _check_profile_args(data, t_grid, sched, n_eval)
    values = []
    with no_grad():
        for t in t_grid:
            masks, images, eps = _eval_batch(data, _grid_rng(seed, t), n_eval)
            if objective == "eq1":
                loss = epsilon_loss(model, 2.0 * images - 1.0, t, eps, sched)
            elif objective == "eq2":
                loss = x0_loss(model, masks, t, eps, sched)
            else:
                loss = epsilon_loss(model, masks, t, eps, sched, y=images)
            values.append(float(loss.data))
    window = smoothing_window if smoothing_window else _default_window(len(t_grid))
    return TimestepProfile(tuple(t_grid), tuple(values), window, label)


# -- dataset fingerprints ----------------------------------------------------------


@dataclass(frozen=True)
class FingerprintEntry:
    kind: str
    t_half: int
    converged: bool
    terminal_value: float


@dataclass(frozen=True)
class FingerprintSummary:
    """Per-kind curve statistics, ordered by how quickly each curve rises."""

    entries: tuple[FingerprintEntry, ...]

    @property
    def ordering(self) -> tuple[str, ...]:
        return tuple(e.kind for e in self.entries)


def fingerprint(profiles, slope_tol: float = 0.05) -> FingerprintSummary:
    """Summarize mask-error curves: half-rise point and tail convergence.

    t_half is the first grid timestep whose value reaches half the terminal
    value. The converged flag holds when the tail slope (over the last 10%
    of the grid, normalized by terminal value over full range) stays below
    slope_tol.
    """
    if not profiles:
        raise ConfigError("no profiles given")
    grids = {p.t_grid for p in profiles.values()}
    if len(grids) != 1:
        raise ConfigError("profiles must share one t_grid")
    entries = []
    for kind, profile in profiles.items():
        t = np.asarray(profile.t_grid, dtype=np.float64)
        v = np.asarray(profile.values)
        terminal = v[-1]
        crossing = np.nonzero(v >= 0.5 * terminal)[0]
        t_half = int(t[crossing[0]]) if crossing.size else int(t[-1])

        span = t[-1] - t[0]
        tail_start = t[-1] - 0.10 * span
        tail = np.nonzero(t >= tail_start)[0]
        if tail.size < 2:
            tail = np.array([len(t) - 2, len(t) - 1])
        i0 = tail[0]
        if span == 0.0:
            normalized = 0.0
        else:
            slope = (v[-1] - v[i0]) / (t[-1] - t[i0])
            normalized = slope * span / max(abs(terminal), 1e-12)
        entries.append(FingerprintEntry(kind, t_half, abs(normalized) < slope_tol, float(terminal)))
    entries.sort(key=lambda e: (e.t_half, e.kind))
    return FingerprintSummary(tuple(entries))


# -- derivative-based timestep weighting ----------------------------------------------


def derivative_weights(
    profile: TimestepProfile, floor: float = 0.05, total: int | None = None
) -> TimestepWeights:
    """Weight timesteps by how fast the mask error grows there.

    The forward difference of the (smoothed) profile is clipped at zero,
    normalized to mean one, lifted by `floor` so no timestep goes untrained,
    and renormalized. Grid gaps are filled by linear interpolation; `total`
    extends the weights (flat at the ends) to a full schedule length when
    the grid stops short of it.
    """
    if len(profile.values) < 2:
        raise ConfigError("profile must contain at least two points to differentiate")
    if floor <= 0.0:
        raise ConfigError(f"floor must be positive, got {floor}")
    if total is None:
        total = profile.t_grid[-1]
    elif total < profile.t_grid[-1]:
        raise ConfigError(
            f"total {total} is shorter than the profiled range {profile.t_grid[-1]}"
        )
    t = np.asarray(profile.t_grid, dtype=np.float64)
    v = np.asarray(profile.values)
    slopes = np.diff(v) / np.diff(t)
    slopes = np.append(slopes, slopes[-1])
    w = np.maximum(slopes, 0.0)
    mean = w.mean()
    if mean > 0.0:
        w = w / mean
    w = (w + floor) / (1.0 + floor)

    full = np.interp(np.arange(1, total + 1, dtype=np.float64), t, w)
    return TimestepWeights(full / full.mean())


# -- CSV interfaces ---------------------------------------------------------------------


def profile_to_csv(profile: TimestepProfile, path) -> None:
    """Write (t, value, smoothed_value) rows; floats keep full precision."""
    smoothed = smooth(profile, profile.smoothing_window)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", "value", "smoothed_value"])
            for t, raw, sm in zip(profile.t_grid, profile.values, smoothed.values):
                writer.writerow([t, repr(raw), repr(sm)])
    except OSError as exc:
        raise IoError(f"cannot write profile to {path}: {exc}") from exc


def load_profile_csv(path, column: str = "value", label: str = "") -> TimestepProfile:
    """Read a profile back; `column` picks the raw or smoothed series."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read profile from {path}: {exc}") from exc
    if not rows or rows[0] != ["t", "value", "smoothed_value"]:
        raise FormatError(f"{path}: expected header t,value,smoothed_value")
    if column not in ("value", "smoothed_value"):
        raise ConfigError(f"column must be 'value' or 'smoothed_value', got {column!r}")
    col = 1 if column == "value" else 2
    t_grid, values = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise FormatError(f"{path}:{i}: expected 3 columns, got {len(row)}")
        try:
            t_grid.append(int(row[0]))
            values.append(float(row[col]))
        except ValueError as exc:
            raise FormatError(f"{path}:{i}: {exc}") from exc
    try:
        return TimestepProfile(tuple(t_grid), tuple(values), 1, label)
    except (ConfigError, DataError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def weights_to_csv(weights: TimestepWeights, path) -> None:
    """Write (t, weight) rows covering every timestep the weights span."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", "weight"])
            for t, w in enumerate(weights.weights, start=1):
                writer.writerow([t, repr(float(w))])
    except OSError as exc:
        raise IoError(f"cannot write weights to {path}: {exc}") from exc


def load_weights_csv(path) -> TimestepWeights:
    """Read weights back; the mean-1 invariant is re-checked on construction."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read weights from {path}: {exc}") from exc
    if not rows or rows[0] != ["t", "weight"]:
        raise FormatError(f"{path}: expected header t,weight")
    values = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise FormatError(f"{path}:{i}: expected 2 columns, got {len(row)}")
        try:
            t, w = int(row[0]), float(row[1])
        except ValueError as exc:
            raise FormatError(f"{path}:{i}: {exc}") from exc
        if t != i - 1:
            raise FormatError(f"{path}:{i}: timesteps must run 1..T, got {t}")
        values.append(w)
    try:
        return TimestepWeights(np.asarray(values))
    except ConfigError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def fingerprint_to_csv(summary: FingerprintSummary, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["kind", "t_half", "converged", "terminal_value"])
            for e in summary.entries:
                writer.writerow([e.kind, e.t_half, int(e.converged), repr(e.terminal_value)])
    except OSError as exc:
        raise IoError(f"cannot write fingerprint summary to {path}: {exc}") from exc
