"""Synthetic segmentation datasets and file I/O.

Three generator families provide stand-ins for the dataset archetypes the
analyses care about: a single centered lesion, many small nuclei, and tumor
tissue whose coverage swings between absent and dominant. What matters is not
realism but that the three families have clearly different foreground
statistics (one big blob vs. many specks vs. feast-or-famine coverage).

Everything is a pure function of (spec, seed): sample i draws from a
generator seeded with SeedSequence([seed, i]), so datasets are reproducible
byte for byte and order-independent.
"""

from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError, IoError

KINDS = ("lesion", "nuclei", "tumor")


@dataclass(frozen=True)
class MaskImagePair:
    """A binary mask with its single-channel conditioning image."""

    mask: np.ndarray
    image: np.ndarray
    id: str

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float64)
        image = np.asarray(self.image, dtype=np.float64)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "image", image)
        if mask.shape != image.shape or mask.ndim != 2:
            raise DataError(f"mask {mask.shape} and image {image.shape} must be equal 2-d shapes")
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise DataError(f"mask of {self.id!r} is not binary")
        if image.min() < 0.0 or image.max() > 1.0:
            raise DataError(f"image of {self.id!r} leaves [0, 1]")


@dataclass(frozen=True)
class DatasetSpec:
    """What to generate: family, sample count, square extent, and seed."""

    kind: str
    count: int
    size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}, expected one of {KINDS}")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        size = self.size
        if size < 8 or size > 64 or size & (size - 1):
            raise ConfigError(f"size must be a power of two in [8, 64], got {size}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


def _sample_rng(spec: DatasetSpec, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, index])))


def _pixel_grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return yy, xx


def _star_blob(size, cy, cx, radii, yy, xx) -> np.ndarray:
    """Rasterize a star-convex region: inside iff distance <= r(angle)."""
    k = radii.size
    theta = np.arctan2(yy - cy, xx - cx)  # [-pi, pi]
    pos = (theta + np.pi) / (2.0 * np.pi) * k
    i0 = np.floor(pos).astype(int) % k
    frac = pos - np.floor(pos)
    r_at = radii[i0] * (1.0 - frac) + radii[(i0 + 1) % k] * frac
    dist = np.hypot(yy - cy, xx - cx)
    return (dist <= r_at).astype(np.float64)


def _lesion_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    # Size spans the whole allowed area range and the outline is an
    # anisotropic star polygon: area, position, and orientation of one large
    # structure are the slowest-degrading mask signals under noise, which is
    # what sets this family apart from the cluster families.
    yy, xx = _pixel_grid(size)
    mask = None
    for _ in range(20):
        jitter = 0.10 * size
        cy = size / 2.0 + rng.uniform(-jitter, jitter)
        cx = size / 2.0 + rng.uniform(-jitter, jitter)
        target = rng.uniform(0.16, 0.49)
        r0 = size * np.sqrt(target / np.pi)
        q = rng.uniform(1.2, 2.2)
        phi = rng.uniform(0.0, np.pi)
        theta = np.linspace(0.0, 2.0 * np.pi, 12, endpoint=False) + phi
        ell = np.sqrt(q) / np.sqrt(q * q * np.sin(theta) ** 2 + np.cos(theta) ** 2)
        radii = r0 * ell * (1.0 + 0.25 * rng.uniform(-1.0, 1.0, 12))
        mask = _star_blob(size, cy, cx, radii, yy, xx)
        if 0.15 <= mask.mean() <= 0.50:
            return mask
    return mask  # pathological rng streams only; bounds are asserted in tests


def _nuclei_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = _pixel_grid(size)
    mask = np.zeros((size, size))
    n = int(rng.integers(10, 18))
    for _ in range(n):
        cy = rng.uniform(0.0, size)
        cx = rng.uniform(0.0, size)
        a = rng.uniform(2.0, 2.8)
        b = rng.uniform(2.0, 2.8)
        phi = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(phi) + dy * np.sin(phi)) / a
        v = (-dx * np.sin(phi) + dy * np.cos(phi)) / b
        mask[u * u + v * v <= 1.0] = 1.0
    return mask


def _tumor_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    # Three regimes: absent tissue, one heavy centered mass just over half
    # coverage, and scattered small clusters. The heavy mass is deliberately
    # stereotyped (near-centered, near-round): the regimes must exist per the
    # family contract, but keeping their variability low leaves cluster
    # placement as the dominant source of mask variance.
    yy, xx = _pixel_grid(size)
    regime = rng.random()
    if regime < 0.13:
        return np.zeros((size, size))  # tissue absent
    if regime < 0.26:
        target = rng.uniform(0.52, 0.58)
        r0 = size * np.sqrt(target / np.pi)
        cy = size / 2.0 + rng.uniform(-0.03, 0.03) * size
        cx = size / 2.0 + rng.uniform(-0.03, 0.03) * size
        radii = r0 * (1.0 + 0.10 * rng.uniform(-1.0, 1.0, 8))
        return _star_blob(size, cy, cx, radii, yy, xx)
    mask = np.zeros((size, size))
    count = int(rng.integers(1, 6))
    for _ in range(count):
        cy = rng.uniform(0.15 * size, 0.85 * size)
        cx = rng.uniform(0.15 * size, 0.85 * size)
        r0 = size * rng.uniform(0.07, 0.11)
        radii = r0 * (1.0 + 0.3 * rng.uniform(-1.0, 1.0, 8))
        mask = np.maximum(mask, _star_blob(size, cy, cx, radii, yy, xx))
    return mask


def _bilinear_upsample(coarse: np.ndarray, size: int) -> np.ndarray:
    n = coarse.shape[0]
    pos = np.linspace(0.0, n - 1.0, size)
    i0 = np.clip(np.floor(pos).astype(int), 0, n - 2)
    frac = pos - i0
    rows = coarse[i0] * (1.0 - frac)[:, None] + coarse[i0 + 1] * frac[:, None]
    cols = rows[:, i0] * (1.0 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]
    return cols


FOREGROUND_CONTRAST = 0.3
PIXEL_NOISE_SIGMA = 0.1


def render_condition_image(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency texture plus a constant foreground contrast and pixel noise.

    The contrast (0.3) comfortably beats the noise (sigma 0.1), so foreground
    and background intensities stay separable without being trivially so.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise DataError("mask must be binary")
    size = mask.shape[0]
    coarse = rng.uniform(-1.0, 1.0, (5, 5))
    base = 0.35 + 0.12 * _bilinear_upsample(coarse, size)
    image = base + FOREGROUND_CONTRAST * mask + PIXEL_NOISE_SIGMA * rng.standard_normal(mask.shape)
    return np.clip(image, 0.0, 1.0)


_MASK_FNS = {"lesion": _lesion_mask, "nuclei": _nuclei_mask, "tumor": _tumor_mask}


def generate_dataset(spec: DatasetSpec) -> list[MaskImagePair]:
    """Generate spec.count mask/image pairs for the spec's family."""
    mask_fn = _MASK_FNS[spec.kind]
    pairs = []
    for i in range(spec.count):
        rng = _sample_rng(spec, i)
        mask = mask_fn(rng, spec.size)
        image = render_condition_image(mask, rng)
        pairs.append(MaskImagePair(mask=mask, image=image, id=f"{spec.kind}-{i:04d}"))
    return pairs


def gen_lesion(spec: DatasetSpec) -> list[MaskImagePair]:
    """One star-convex blob near the center covering 15-50% of the image."""
    if spec.kind != "lesion":
        raise ConfigError(f"gen_lesion got kind {spec.kind!r}")
    return generate_dataset(spec)


def gen_nuclei(spec: DatasetSpec) -> list[MaskImagePair]:
    """10-40 small ellipses (semi-axes 2-4 px), overlap allowed."""
    if spec.kind != "nuclei":
        raise ConfigError(f"gen_nuclei got kind {spec.kind!r}")
    return generate_dataset(spec)


def gen_tumor(spec: DatasetSpec) -> list[MaskImagePair]:
    """0-5 mid-size clusters; some masks empty, some mostly covered."""
    if spec.kind != "tumor":
        raise ConfigError(f"gen_tumor got kind {spec.kind!r}")
    return generate_dataset(spec)


# -- train/val split ------------------------------------------------------------------


def split_train_val(dataset: list, ratio: float, seed: int) -> tuple[list, list]:
    """Deterministic shuffled split; both parts must end up non-empty."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(dataset)
    n_train = int(round(ratio * n))
    if n_train == 0 or n_train == n:
        raise ConfigError(f"split of {n} items at ratio {ratio} leaves an empty part")
    order = np.random.default_rng(seed).permutation(n)
    train = [dataset[i] for i in order[:n_train]]
    val = [dataset[i] for i in order[n_train:]]
    return train, val


# -- PGM I/O ---------------------------------------------------------------------------


def save_pgm(path, array: np.ndarray) -> None:
    """Write a [0,1] float array as an 8-bit binary PGM (magic P5)."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"PGM wants a 2-d array, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError("PGM values must lie in [0, 1]")
    quantized = np.round(arr * 255.0).astype(np.uint8)
    h, w = arr.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(quantized.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _pgm_tokens(blob: bytes):
    """Header tokens of a PGM, skipping '#' comments, plus the pixel offset."""
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(blob):
        c = blob[i : i + 1]
        if c == b"#":
            i = blob.find(b"\n", i)
            if i < 0:
                break
            i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j : j + 1].isspace() and blob[j : j + 1] != b"#":
                j += 1
            tokens.append(blob[i:j])
            i = j
    if len(tokens) < 4 or i >= len(blob):
        raise FormatError("PGM header incomplete")
    return tokens, i + 1  # single whitespace byte separates header and pixels


def load_pgm(path) -> np.ndarray:
    """Read a binary PGM back into floats in [0, 1]."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    tokens, offset = _pgm_tokens(blob)
    if tokens[0] != b"P5":
        raise FormatError(f"{path} is not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise FormatError(f"non-numeric PGM header in {path}") from exc
    if w < 1 or h < 1 or not 1 <= maxval <= 255:
        raise FormatError(f"bad PGM dimensions {w}x{h} maxval {maxval}")
    pixels = blob[offset:]
    if len(pixels) != w * h:
        raise FormatError(f"PGM payload is {len(pixels)} bytes, expected {w * h}")
    raw = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
    return raw.astype(np.float64) / maxval


# -- dataset directories -------------------------------------------------------------------

MANIFEST_NAME = "manifest.csv"
_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")


def save_dataset(directory, train: list[MaskImagePair], val: list[MaskImagePair],
                 kind: str) -> None:
    """Write `<id>_img.pgm` / `<id>_mask.pgm` pairs plus a manifest CSV."""
    os.makedirs(directory, exist_ok=True)
    try:
        with open(os.path.join(directory, MANIFEST_NAME), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "split", "kind"])
            for split, pairs in (("train", train), ("val", val)):
                for pair in pairs:
                    writer.writerow([pair.id, split, kind])
    except OSError as exc:
        raise IoError(f"cannot write manifest in {directory}: {exc}") from exc
    for pairs in (train, val):
        for pair in pairs:
            save_pgm(os.path.join(directory, f"{pair.id}_img.pgm"), pair.image)
            save_pgm(os.path.join(directory, f"{pair.id}_mask.pgm"), pair.mask)


def load_dataset(directory) -> tuple[list[MaskImagePair], list[MaskImagePair], str]:
    """Read a dataset directory back; returns (train, val, kind)."""
    manifest = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(manifest, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read manifest {manifest}: {exc}") from exc
    if not rows or rows[0] != ["id", "split", "kind"]:
        raise FormatError(f"manifest {manifest} has an unexpected header")
    train: list[MaskImagePair] = []
    val: list[MaskImagePair] = []
    kinds = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise FormatError(f"manifest line {lineno}: expected 3 columns, got {len(row)}")
        pair_id, split, kind = row
        if not _ID_RE.match(pair_id):
            raise FormatError(f"manifest line {lineno}: illegal id {pair_id!r}")
        if split not in ("train", "val"):
            raise FormatError(f"manifest line {lineno}: unknown split {split!r}")
        kinds.add(kind)
        image = load_pgm(os.path.join(directory, f"{pair_id}_img.pgm"))
        mask = load_pgm(os.path.join(directory, f"{pair_id}_mask.pgm"))
        pair = MaskImagePair(mask=mask, image=image, id=pair_id)
        (train if split == "train" else val).append(pair)
    if len(kinds) != 1:
        raise FormatError(f"manifest {manifest} must name exactly one kind, got {sorted(kinds)}")
    return train, val, kinds.pop()
