"""The four training regimes, checkpointing, and ensembled prediction.

Regimes share one loop: sample a batch, evaluate the regime's objective,
take an Adam step, and log interval-averaged loss plus cheap validation
metrics. Regimes differ only in what the network is asked to produce:

* feed-forward (E1): segmentation logits from pure noise and the image,
  trained with the combined Dice and cross-entropy loss;
* diffusion segmentation (E2): the noise added to the mask, conditioned
  on the image;
* mask recovery (E3): the clean mask from its noised version, no image;
* image generation (E4): the noise added to the image itself.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import ece, iou
from .autodiff import Adam, Tensor, dice_ce_loss, no_grad, sigmoid
from .diffusion import (
    DiffusionSchedule,
    TimestepWeights,
    ddpm_sample,
    encode_mask,
    epsilon_loss,
    eps_to_x0,
    forward_sample,
    linear_schedule,
    sample_timestep,
    x0_loss,
)
from .errors import ConfigError, DataError, FormatError, IoError
from .models import DenoiserModel, ModelConfig, build_model, load_model, save_model

EXPERIMENTS = ("E1", "E2", "E3", "E4")

# Ensemble sizes used for the reference evaluations, keyed by dataset kind.
ENSEMBLE_PRESETS = {"nuclei": 25, "lesion": 10, "tumor": 5}

# What the network is trained to output, per regime.
_PREDICTS = {"E1": "logits", "E2": "eps", "E3": "x0", "E4": "eps"}

_VAL_NOISE_SALT = 0x5EED


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on, hashable and comparable."""

    experiment: str
    model: ModelConfig
    lr: float = 1e-5
    batch_size: int = 16
    steps: int = 5000
    seed: int = 0
    beta_start: float = 1e-4
    beta_end: float = 0.02
    weights: TimestepWeights | None = None
    ensemble_n: int = 1
    log_interval: int = 100

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.ensemble_n < 1:
            raise ConfigError(f"ensemble_n must be >= 1, got {self.ensemble_n}")
        if self.log_interval < 1:
            raise ConfigError(f"log_interval must be >= 1, got {self.log_interval}")
        conditional = self.model.image_channels > 0
        if self.experiment in ("E1", "E2") and not conditional:
            raise ConfigError(f"{self.experiment} needs a conditional model (image_channels > 0)")
        if self.experiment in ("E3", "E4") and conditional:
            raise ConfigError(f"{self.experiment} is unconditional; set image_channels=0")
        if self.weights is not None and self.weights.weights.size != self.model.total_timesteps:
            raise ConfigError(
                f"weights cover {self.weights.weights.size} timesteps, "
                f"model uses {self.model.total_timesteps}"
            )

    def schedule(self) -> DiffusionSchedule:
        return linear_schedule(self.model.total_timesteps, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class RunRecord:
    """Interval log of one training run plus its artifact location."""

    experiment: str
    steps: tuple[int, ...]
    losses: tuple[float, ...]
    val_iou: tuple[float, ...]
    val_ece: tuple[float, ...]
    wall_clock: float
    checkpoint_path: str = ""

    def __post_init__(self):
        n = len(self.steps)
        if not (len(self.losses) == len(self.val_iou) == len(self.val_ece) == n):
            raise ConfigError("run record columns must have equal length")
        if not all(np.isfinite(v) for v in self.losses):
            raise DataError("training losses must be finite")
        if self.wall_clock < 0.0:
            raise DataError(f"wall clock must be non-negative, got {self.wall_clock}")


def run_record_to_csv(record: RunRecord, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "loss", "val_iou", "val_ece"])
            for row in zip(record.steps, record.losses, record.val_iou, record.val_ece):
                writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
    except OSError as exc:
        raise IoError(f"cannot write run record to {path}: {exc}") from exc


# -- batch assembly ------------------------------------------------------------


def _stack_masks(pairs, idx) -> np.ndarray:
    return np.stack([encode_mask(pairs[i].mask) for i in idx])[:, None]


def _stack_images(pairs, idx) -> np.ndarray:
    return np.stack([pairs[i].image for i in idx])[:, None]


def _val_rng(config: TrainConfig) -> np.random.Generator:
    # Fixed stream, recreated per evaluation: validation never perturbs the
    # training draw sequence and sees identical noise at every interval.
    return np.random.default_rng(np.random.SeedSequence([config.seed, _VAL_NOISE_SALT]))


# -- per-regime training steps and validation metrics ----------------------------------


def _train_step(config: TrainConfig, model, pairs, rng, sched):
    idx = rng.integers(0, len(pairs), size=config.batch_size)
    if config.experiment == "E1":
        masks01 = np.stack([pairs[i].mask for i in idx])[:, None]
        noise = rng.standard_normal(masks01.shape)
        logits = model(noise, 0, _stack_images(pairs, idx))
        return dice_ce_loss(logits, masks01)
    t = sample_timestep(rng, sched)
    if config.experiment == "E2":
        x0 = _stack_masks(pairs, idx)
        eps = rng.standard_normal(x0.shape)
        return epsilon_loss(model, x0, t, eps, sched, y=_stack_images(pairs, idx),
                            weights=config.weights)
    if config.experiment == "E3":
        x0 = _stack_masks(pairs, idx)
        eps = rng.standard_normal(x0.shape)
        return x0_loss(model, x0, t, eps, sched, weights=config.weights)
    x0 = 2.0 * _stack_images(pairs, idx) - 1.0
    eps = rng.standard_normal(x0.shape)
    return epsilon_loss(model, x0, t, eps, sched, weights=config.weights)


def _segmentation_metrics(probs: np.ndarray, masks01: np.ndarray) -> tuple[float, float]:
    per_image = [iou((p > 0.5).astype(float), m) for p, m in zip(probs, masks01)]
    return float(np.mean(per_image)), ece(probs, masks01).ece


def _validate(config: TrainConfig, model, val, sched) -> tuple[float, float]:
    """Cheap segmentation quality proxy; NaN where no mask is being predicted."""
    if config.experiment == "E4" or not val:
        return float("nan"), float("nan")
    rng = _val_rng(config)
    idx = np.arange(len(val))
    masks01 = np.stack([p.mask for p in val])[:, None]
    with no_grad():
        if config.experiment == "E1":
            noise = rng.standard_normal(masks01.shape)
            logits = model(noise, 0, _stack_images(val, idx))
            probs = sigmoid(logits).data
        else:
            t = max(1, round(0.25 * sched.T))
            x0 = _stack_masks(val, idx)
            eps = rng.standard_normal(x0.shape)
            x_t = forward_sample(x0, t, eps, sched)
            y = _stack_images(val, idx) if config.experiment == "E2" else None
            out = model(x_t, t, y).data
            x0_hat = eps_to_x0(x_t, out, t, sched) if config.experiment == "E2" else out
            probs = np.clip((np.clip(x0_hat, -1.0, 1.0) + 1.0) / 2.0, 0.0, 1.0)
    return _segmentation_metrics(probs[:, 0], masks01[:, 0])


# -- the shared loop ----------------------------------------------------------------------


def _run(config: TrainConfig, data, out_dir) -> tuple[DenoiserModel, RunRecord]:
    train, val = data
    if not train:
        raise DataError("training split is empty")
    rng = np.random.default_rng(config.seed)
    model = build_model(config.model, rng)
    model.predicts = _PREDICTS[config.experiment]
    sched = config.schedule()
    opt = Adam(model.parameters(), lr=config.lr)

    start = time.perf_counter()
    log_steps, losses, vious, veces = [], [], [], []
    acc, count = 0.0, 0
    for step in range(1, config.steps + 1):
        loss = _train_step(config, model, train, rng, sched)
        loss.backward()
        opt.step()
        acc += float(loss.data)
        count += 1
        if step % config.log_interval == 0 or step == config.steps:
            viou, vece = _validate(config, model, val, sched)
            log_steps.append(step)
            losses.append(acc / count)
            vious.append(viou)
            veces.append(vece)
            acc, count = 0.0, 0
    wall = time.perf_counter() - start

    ckpt = ""
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_file = out_dir / f"{config.experiment.lower()}_{config.model.variant}.ckpt"
        save_checkpoint(model, ckpt_file, extra={
            "experiment": config.experiment,
            "lr": config.lr,
            "steps": config.steps,
            "seed": config.seed,
            "beta_start": config.beta_start,
            "beta_end": config.beta_end,
        })
        ckpt = str(ckpt_file)
    record = RunRecord(config.experiment, tuple(log_steps), tuple(losses),
                       tuple(vious), tuple(veces), wall, ckpt)
    if out_dir is not None:
        run_record_to_csv(record, Path(out_dir) / f"{config.experiment.lower()}_run.csv")
    return model, record


def _checked(config: TrainConfig, expected: str) -> TrainConfig:
    if config.experiment != expected:
        raise ConfigError(f"config is for {config.experiment}, this trainer runs {expected}")
    return config


def train_feedforward(config: TrainConfig, data, out_dir=None):
    """E1: one-pass segmentation net fed pure noise plus the image (t fixed at 0)."""
    return _run(_checked(config, "E1"), data, out_dir)


def train_diffusion_seg(config: TrainConfig, data, out_dir=None):
    """E2: conditional noise prediction on noised masks, t drawn uniformly."""
    return _run(_checked(config, "E2"), data, out_dir)


def train_mask_recovery(config: TrainConfig, data, out_dir=None):
    """E3: clean-mask regression from noised masks, no conditioning."""
    return _run(_checked(config, "E3"), data, out_dir)


def train_image_gen(config: TrainConfig, data, out_dir=None):
    """E4: unconditional noise prediction on the images themselves."""
    return _run(_checked(config, "E4"), data, out_dir)


_TRAINERS = {
    "E1": train_feedforward,
    "E2": train_diffusion_seg,
    "E3": train_mask_recovery,
    "E4": train_image_gen,
}


def train(config: TrainConfig, data, out_dir=None):
    """Dispatch to the regime named in the config."""
    return _TRAINERS[config.experiment](config, data, out_dir)


# -- ensembled prediction ---------------------------------------------------------------------


def ensemble_predict(model, image, n: int, sched: DiffusionSchedule,
                     rng: np.random.Generator, return_members: bool = False):
    """Aggregate n stochastic segmentations into mean, spread, and a mask.

    Feed-forward models resample their noise input per member; noise
    predictors run one full reverse chain per member. Member maps live in
    [0, 1]; the binary mask thresholds the mean at 0.5.
    """
    if n < 1:
        raise ConfigError(f"ensemble size must be >= 1, got {n}")
    predicts = getattr(model, "predicts", None)
    if predicts not in ("logits", "eps"):
        raise ConfigError(
            f"ensembling needs a feed-forward or noise-predicting model, got {predicts!r}"
        )
    cfg = model.config
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.shape != (cfg.image_channels, image.shape[1], image.shape[2]):
        raise ConfigError(f"image must have {cfg.image_channels} channel(s), got {image.shape}")
    h, w = image.shape[1:]
    y = np.broadcast_to(image, (n, cfg.image_channels, h, w))
    shape = (n, cfg.target_channels, h, w)

    with no_grad():
        if predicts == "logits":
            noise = rng.standard_normal(shape)
            members = sigmoid(model(noise, 0, y)).data
        else:
            x0_hat = ddpm_sample(model, shape, sched, rng, predict="eps", y=y)
            members = (x0_hat + 1.0) / 2.0

    mean_map = members.mean(axis=0)
    std_map = members.std(axis=0)
    binary = (mean_map > 0.5).astype(np.float64)
    if cfg.target_channels == 1:
        mean_map, std_map, binary = mean_map[0], std_map[0], binary[0]
        members = members[:, 0]
    if return_members:
        return mean_map, std_map, binary, members
    return mean_map, std_map, binary


# -- checkpointing -----------------------------------------------------------------------------


def save_checkpoint(model: DenoiserModel, path, extra: dict | None = None) -> None:
    """Persist parameters, config, objective, and any extra record fields."""
    save_model(model, path, extra)


def load_checkpoint(path, variant: str | None = None) -> tuple[DenoiserModel, dict]:
    """Restore a model and its record; optionally insist on an architecture."""
    model, record = load_model(path)
    if variant is not None and model.config.variant != variant:
        raise FormatError(
            f"checkpoint holds a {model.config.variant!r} model, expected {variant!r}"
        )
    return model, record
