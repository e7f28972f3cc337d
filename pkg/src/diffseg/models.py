"""Miniature UNet denoisers with three conditioning mechanisms.

The three variants mirror, at desk scale, the ways published diffusion
segmenters inject the conditioning image:

* ``concat``: the image is concatenated to the noisy mask at the input.
* ``encoder_sum``: a separate image encoder mirrors the main encoder's
  channel plan and its features are added at each resolution level.
* ``ff_parser``: like ``encoder_sum``, but each image feature map passes
  through a learned frequency-domain gate before the addition.

With ``image_channels = 0`` the ``concat`` variant degenerates to an
unconditional denoiser, which is how the mask-only and generation regimes
run. Architectures are declared stand-ins: depth and width are tuned for
single-core training, not for fidelity to any published network.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    channel_bias,
    concat,
    conv2d,
    matmul,
    relu,
    upsample2x,
    _accumulate,
)
from .errors import ConfigError, FormatError, IoError, ShapeError

VARIANTS = ("concat", "encoder_sum", "ff_parser")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; parameter count is a pure function of these."""

    variant: str = "concat"
    base_channels: int = 16
    depth: int = 2
    time_embed_dim: int = 32
    image_channels: int = 1
    target_channels: int = 1
    image_size: int = 32
    total_timesteps: int = 1000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError(f"time_embed_dim must be even and >= 2, got {self.time_embed_dim}")
        if self.image_channels < 0 or self.target_channels < 1:
            raise ConfigError("channel counts must be non-negative (targets >= 1)")
        if self.total_timesteps < 1:
            raise ConfigError(f"total_timesteps must be >= 1, got {self.total_timesteps}")
        div = 1 << self.depth
        if self.image_size < div or self.image_size % div:
            raise ConfigError(
                f"image_size {self.image_size} must be divisible by 2^depth = {div}"
            )
        if self.variant in ("encoder_sum", "ff_parser") and self.image_channels < 1:
            raise ConfigError(f"variant {self.variant!r} needs image_channels >= 1")


def sinusoidal_time_embedding(t: int, dim: int, T: int) -> np.ndarray:
    """Interleaved sin/cos of t at geometrically spaced frequencies.

    Frequencies run from 1 down to 1/T so neighbouring timesteps differ in
    the fast components while the slow ones encode global position. All
    entries lie in [-1, 1].
    """
    if dim < 2 or dim % 2:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.array([1.0])
    else:
        freqs = (1.0 / max(T, 2)) ** (np.arange(half) / (half - 1))
    angles = t * freqs
    emb = np.empty(dim)
    emb[0::2] = np.sin(angles)
    emb[1::2] = np.cos(angles)
    return emb


# -- frequency-domain gating -------------------------------------------------------

_dft_cache: dict[int, np.ndarray] = {}


def _dft_matrix(n: int) -> np.ndarray:
    if n not in _dft_cache:
        k = np.arange(n)
        _dft_cache[n] = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return _dft_cache[n]


def ff_parser(feature, gate) -> Tensor:
    """Gate a feature map elementwise in the 2-D Fourier domain.

    Each channel is transformed with a dense DFT, multiplied by the learned
    real gate, transformed back, and the imaginary residue is discarded. The
    operator is linear and self-adjoint in the real sense, so the feature
    gradient reuses the forward transform. Accepts [C,H,W] or batched
    [B,C,H,W] features; the gate is always [C,H,W].
    """
    f = as_tensor(feature)
    g = as_tensor(gate)
    if g.data.ndim != 3:
        raise ShapeError(f"gate must be [C,H,W], got {g.shape}")
    if f.data.ndim not in (3, 4) or f.data.shape[-3:] != g.shape:
        raise ShapeError(f"feature {f.shape} incompatible with gate {g.shape}")
    c, h, w = g.shape
    wh = _dft_matrix(h)
    ww = _dft_matrix(w)
    iwh = np.conj(wh)
    iww = np.conj(ww)
    scale = 1.0 / (h * w)

    def gated(x: np.ndarray) -> np.ndarray:
        spectrum = (wh @ x @ ww) * g.data
        return np.real(iwh @ spectrum @ iww) * scale

    data = gated(f.data)

    def bwd(grad_out):
        if f.grad is not None:
            _accumulate(f, gated(grad_out))
        if g.grad is not None:
            spectrum = wh @ f.data @ ww
            inv = (iwh @ grad_out @ iww) * scale
            gg = np.real(spectrum * inv)
            if gg.ndim == 4:
                gg = gg.sum(axis=0)
            _accumulate(g, gg)

    return Tensor._result(data, (f, g), bwd)


# -- model ---------------------------------------------------------------------------


class DenoiserModel:
    """UNet-style denoiser; callable as model(x_t, t, y) -> Tensor.

    ``predicts`` marks the training objective the parameters were fitted to
    ("eps" or "x0"); it stays None until a training loop assigns it.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.predicts: str | None = None

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def __call__(self, x_t, t: int, y=None) -> Tensor:
        return forward(self, x_t, t, y)

    @property
    def conditional(self) -> bool:
        return self.config.image_channels > 0


def _he(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)


def _conv_params(rng, params, name, cin, cout, k=3):
    params[f"{name}.w"] = _he(rng, (cout, cin, k, k), cin * k * k)
    params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)


def _time_params(rng, params, name, embed_dim, cout):
    params[f"{name}.w"] = _he(rng, (embed_dim, cout), embed_dim)
    params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)


def build_model(config: ModelConfig, rng: np.random.Generator) -> DenoiserModel:
    """He-initialized denoiser; two builds from the same seed are identical."""
    cfg = config
    chans = [cfg.base_channels * (1 << i) for i in range(cfg.depth + 1)]
    params: dict[str, Tensor] = {}

    cin = cfg.target_channels + (cfg.image_channels if cfg.variant == "concat" else 0)
    _conv_params(rng, params, "stem", cin, chans[0])
    for i in range(cfg.depth):
        _conv_params(rng, params, f"enc{i}", chans[i], chans[i])
        _time_params(rng, params, f"enc{i}_time", cfg.time_embed_dim, chans[i])
        _conv_params(rng, params, f"down{i}", chans[i], chans[i + 1], k=2)
    _conv_params(rng, params, "mid", chans[-1], chans[-1])
    _time_params(rng, params, "mid_time", cfg.time_embed_dim, chans[-1])
    for i in reversed(range(cfg.depth)):
        _conv_params(rng, params, f"up{i}", chans[i + 1], chans[i])
        _conv_params(rng, params, f"dec{i}", 2 * chans[i], chans[i])
        _time_params(rng, params, f"dec{i}_time", cfg.time_embed_dim, chans[i])
    params["head.w"] = _he(rng, (cfg.target_channels, chans[0], 1, 1), chans[0])
    params["head.b"] = Tensor(np.zeros(cfg.target_channels), requires_grad=True)

    if cfg.variant in ("encoder_sum", "ff_parser"):
        _conv_params(rng, params, "img_stem", cfg.image_channels, chans[0])
        size = cfg.image_size
        for i in range(cfg.depth):
            _conv_params(rng, params, f"img_enc{i}", chans[i], chans[i])
            if cfg.variant == "ff_parser":
                params[f"gate{i}"] = Tensor(np.ones((chans[i], size, size)), requires_grad=True)
            if i + 1 < cfg.depth:
                _conv_params(rng, params, f"img_down{i}", chans[i], chans[i + 1], k=2)
            size //= 2
    return DenoiserModel(cfg, params)


def _block(params, name, h, pad=1, stride=1):
    return channel_bias(conv2d(h, params[f"{name}.w"], stride=stride, pad=pad), params[f"{name}.b"])


def _time_bias(params, name, emb_row: Tensor):
    w = params[f"{name}.w"]
    return matmul(emb_row, w).reshape(w.shape[1]) + params[f"{name}.b"]


def _image_features(model: DenoiserModel, y: Tensor) -> list[Tensor]:
    cfg = model.config
    p = model.params
    feats = []
    g = relu(_block(p, "img_stem", y))
    for i in range(cfg.depth):
        g = relu(_block(p, f"img_enc{i}", g))
        if cfg.variant == "ff_parser":
            feats.append(ff_parser(g, p[f"gate{i}"]))
        else:
            feats.append(g)
        if i + 1 < cfg.depth:
            g = relu(_block(p, f"img_down{i}", g, pad=0, stride=2))
    return feats


def forward(model: DenoiserModel, x_t, t: int, y=None) -> Tensor:
    """Denoiser forward pass; output shape equals the noisy-input shape."""
    cfg = model.config
    p = model.params
    x = as_tensor(x_t)
    if x.data.ndim != 4 or x.shape[1] != cfg.target_channels:
        raise ShapeError(f"expected input [B,{cfg.target_channels},H,W], got {x.shape}")
    b, _, h, w = x.shape
    div = 1 << cfg.depth
    if h % div or w % div:
        raise ShapeError(f"spatial extent {h}x{w} not divisible by 2^depth = {div}")

    if cfg.image_channels == 0:
        if y is not None:
            raise ConfigError("model is unconditional but a condition image was given")
        feats = None
    else:
        if y is None:
            raise ConfigError("conditional model called without a condition image")
        y = as_tensor(y)
        if y.data.ndim != 4 or y.shape != (b, cfg.image_channels, h, w):
            raise ShapeError(
                f"condition image must be [{b},{cfg.image_channels},{h},{w}], got {y.shape}"
            )
        if cfg.variant == "ff_parser" and (h, w) != (cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"frequency gates are built for {cfg.image_size}x{cfg.image_size} inputs"
            )
        feats = _image_features(model, y) if cfg.variant != "concat" else None

    emb = Tensor(sinusoidal_time_embedding(t, cfg.time_embed_dim, cfg.total_timesteps)[None, :])

    if cfg.variant == "concat" and cfg.image_channels > 0:
        x = concat([x, y], axis=1)
    hcur = relu(_block(p, "stem", x))
    skips = []
    for i in range(cfg.depth):
        hcur = relu(channel_bias(_block(p, f"enc{i}", hcur), _time_bias(p, f"enc{i}_time", emb)))
        if feats is not None:
            hcur = hcur + feats[i]
        skips.append(hcur)
        hcur = relu(_block(p, f"down{i}", hcur, pad=0, stride=2))
    hcur = relu(channel_bias(_block(p, "mid", hcur), _time_bias(p, "mid_time", emb)))
    for i in reversed(range(cfg.depth)):
        hcur = relu(_block(p, f"up{i}", upsample2x(hcur)))
        hcur = concat([hcur, skips[i]], axis=1)
        hcur = relu(channel_bias(_block(p, f"dec{i}", hcur), _time_bias(p, f"dec{i}_time", emb)))
    return channel_bias(conv2d(hcur, p["head.w"]), p["head.b"])


# -- checkpoints ------------------------------------------------------------------------

_MAGIC = b"DSEGCKP1"
_VERSION = 1


def save_model(model: DenoiserModel, path, extra: dict | None = None) -> None:
    """Write a versioned checkpoint: header, JSON config record, named blobs."""
    record = {"config": asdict(model.config), "predicts": model.predicts}
    record.update(extra or {})
    payload = json.dumps(record, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", _VERSION))
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
            fh.write(struct.pack("<I", len(model.params)))
            for name, tensor in model.params.items():
                nb = name.encode("utf-8")
                fh.write(struct.pack("<I", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<I", tensor.data.ndim))
                fh.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.shape))
                fh.write(tensor.data.astype("<f8").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return buf


def load_model(path) -> tuple[DenoiserModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, metadata record)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    with fh:
        if _read_exact(fh, 8, "magic") != _MAGIC:
            raise FormatError(f"{path} is not a model checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (jlen,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        try:
            record = json.loads(_read_exact(fh, jlen, "config").decode("utf-8"))
            config = ModelConfig(**record["config"])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"malformed checkpoint config: {exc}") from exc
        model = build_model(config, np.random.default_rng(0))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        if count != len(model.params):
            raise FormatError(
                f"checkpoint has {count} parameters, config implies {len(model.params)}"
            )
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            if name not in model.params:
                raise FormatError(f"unexpected parameter {name!r} in checkpoint")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "shape"))
            expected = model.params[name].shape
            if tuple(shape) != expected:
                raise FormatError(f"parameter {name!r} has shape {shape}, expected {expected}")
            n = int(np.prod(shape)) if shape else 1
            blob = _read_exact(fh, 8 * n, f"data of {name!r}")
            model.params[name].data[...] = np.frombuffer(blob, dtype="<f8").reshape(shape)
        trailing = fh.read(1)
        if trailing:
            raise FormatError("checkpoint has trailing bytes")
    model.predicts = record.get("predicts")
    return model, record
