"""Synthetic identity catalogs.

An identity is a fixed constellation of Gaussian blobs on a grayscale
canvas; views of it are re-rendered after jittering the constellation
(translation plus a small rotation about the image center) and get clamped
pixel noise on top.  Working at blob level keeps views exact: there is no
pixel resampling, so jitter 0 and noise 0 reproduce the base image bit for
bit.

Label noise comes in two flavours: "label mess" keeps the image and swaps
the label to a different catalog identity; "distractor" renders a brand-new
out-of-catalog identity and files it under a random in-catalog label.
Injection counts are exact floors of the requested rates.

All randomness flows from numpy SeedSequence spawned as (catalog seed,
stream, index), so any identity or view can be regenerated in isolation."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from latse.pgm import write_pgm

MIN_SPREAD = 1e-3
DISTRACTOR_ID_BASE = 1_000_000

# SeedSequence stream tags
_STREAM_SPEC = 0
_STREAM_VIEWS = 1
_STREAM_NOISE = 2
_STREAM_DISTRACTOR_SPEC = 3
_STREAM_DISTRACTOR_VIEWS = 4


class NoiseFlag(str, enum.Enum):
    CLEAN = "clean"
    LABEL_MESS = "label_mess"
    DISTRACTOR = "distractor"


@dataclass(frozen=True)
class IdentitySpec:
    """Blob constellation defining one identity.

    Each blob is (cx, cy, spread, amplitude) with cx/cy/spread as fractions
    of the canvas, so the same spec renders at any resolution."""

    identity: int
    blobs: tuple[tuple[float, float, float, float], ...]


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float in [0, 1], read-only
    label: int         # identity the trainer is told
    true_id: int       # identity that produced the pixels
    noise_flag: NoiseFlag


def make_identity_spec(identity: int, catalog_seed: int,
                       stream: int = _STREAM_SPEC) -> IdentitySpec:
    rng = np.random.default_rng([catalog_seed, stream, identity])
    n_blobs = int(rng.integers(3, 7))
    blobs = []
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        spread = rng.uniform(0.05, 0.14)
        amp = rng.uniform(0.55, 1.0)
        blobs.append((float(cx), float(cy), float(spread), float(amp)))
    return IdentitySpec(identity=identity, blobs=tuple(blobs))


def _render_blobs(blobs, h: int, w: int) -> np.ndarray:
    ys = np.arange(h, dtype=float)[:, None]
    xs = np.arange(w, dtype=float)[None, :]
    img = np.zeros((h, w))
    scale = min(h, w)
    for cx, cy, spread, amp in blobs:
        px = cx * (w - 1)
        py = cy * (h - 1)
        s = max(spread, MIN_SPREAD) * scale
        img += amp * np.exp(-((xs - px) ** 2 + (ys - py) ** 2) / (2.0 * s * s))
    return np.clip(img, 0.0, 1.0)


def render_identity(spec: IdentitySpec, h: int = 32, w: int = 32) -> np.ndarray:
    """The identity's canonical (jitter-free, noise-free) image."""
    return _render_blobs(spec.blobs, h, w)


def _transform_blobs(blobs, angle: float, dx: float, dy: float,
                     h: int, w: int):
    """Rotate constellation about the canvas center, then translate.

    Offsets are in pixels; the identity transform returns blobs unchanged so
    zero jitter is bitwise exact."""
    if angle == 0.0 and dx == 0.0 and dy == 0.0:
        return blobs
    ca, sa = math.cos(angle), math.sin(angle)
    ccx, ccy = (w - 1) / 2.0, (h - 1) / 2.0
    out = []
    for cx, cy, spread, amp in blobs:
        px = cx * (w - 1) - ccx
        py = cy * (h - 1) - ccy
        qx = ca * px - sa * py + ccx + dx
        qy = sa * px + ca * py + ccy + dy
        out.append((qx / (w - 1), qy / (h - 1), spread, amp))
    return tuple(out)


def sample_views(spec: IdentitySpec, count: int, jitter: float,
                 pixel_noise: float, seed, h: int = 32, w: int = 32) -> list[Sample]:
    """Render jittered noisy views of one identity.

    jitter is the translation half-range in pixels; rotation half-range is
    jitter/10 radians.  Pixel noise is Gaussian, then the image is clamped
    back to [0, 1]."""
    rng = np.random.default_rng(seed)
    views = []
    for _ in range(count):
        dx, dy = rng.uniform(-jitter, jitter, size=2)
        angle = rng.uniform(-jitter / 10.0, jitter / 10.0)
        img = _render_blobs(_transform_blobs(spec.blobs, angle, dx, dy, h, w), h, w)
        noise = rng.normal(0.0, pixel_noise, size=(h, w)) if pixel_noise > 0 else 0.0
        img = np.clip(img + noise, 0.0, 1.0)
        img.setflags(write=False)
        views.append(Sample(image=img, label=spec.identity,
                            true_id=spec.identity, noise_flag=NoiseFlag.CLEAN))
    return views


def inject_noise(samples: list[Sample], mess_rate: float, distractor_rate: float,
                 seed: int, jitter: float = 0.0, pixel_noise: float = 0.0) -> list[Sample]:
    """Replace exact floors of the sample list with mislabeled or distractor
    samples.

    Catalog identities are taken from the incoming labels.  Mess keeps the
    pixels and draws a different label uniformly; distractors render fresh
    identities (ids offset by 1e6) and draw any catalog label."""
    if not 0.0 <= mess_rate <= 1.0 or not 0.0 <= distractor_rate <= 1.0:
        raise ValueError("rates must be in [0, 1]")
    if mess_rate + distractor_rate > 1.0:
        raise ValueError("rates sum above 1")
    n = len(samples)
    n_mess = int(math.floor(mess_rate * n))
    n_dist = int(math.floor(distractor_rate * n))
    out = list(samples)
    if n_mess == 0 and n_dist == 0:
        return out
    ids = np.array(sorted({s.label for s in samples}), dtype=np.int64)
    if len(ids) < 2 and n_mess:
        raise ValueError("label mess needs at least two identities")
    h, w = samples[0].image.shape
    rng = np.random.default_rng([seed, _STREAM_NOISE])
    perm = rng.permutation(n)
    for i in perm[:n_mess]:
        old = out[i]
        pos = int(np.searchsorted(ids, old.true_id))
        r = int(rng.integers(len(ids) - 1))
        wrong = int(ids[r + (r >= pos)])
        out[i] = Sample(image=old.image, label=wrong, true_id=old.true_id,
                        noise_flag=NoiseFlag.LABEL_MESS)
    for j, i in enumerate(perm[n_mess:n_mess + n_dist]):
        spec = make_identity_spec(DISTRACTOR_ID_BASE + j, seed,
                                  stream=_STREAM_DISTRACTOR_SPEC)
        view = sample_views(spec, 1, jitter, pixel_noise,
                            seed=[seed, _STREAM_DISTRACTOR_VIEWS, j], h=h, w=w)[0]
        label = int(ids[int(rng.integers(len(ids)))])
        out[i] = Sample(image=view.image, label=label, true_id=spec.identity,
                        noise_flag=NoiseFlag.DISTRACTOR)
    return out


@dataclass(frozen=True)
class DataConfig:
    catalog_seed: int = 7
    train_identities: int = 200
    views_per_identity: int = 30
    eval_identities: int = 50
    eval_views: int = 10
    image_h: int = 32
    image_w: int = 32
    mess_rate: float = 0.0
    distractor_rate: float = 0.0
    jitter: float = 2.0
    pixel_noise: float = 0.03

    def __post_init__(self) -> None:
        if self.catalog_seed < 0:
            raise ValueError("catalog_seed must be non-negative")
        counts = (self.train_identities, self.views_per_identity,
                  self.eval_identities, self.eval_views,
                  self.image_h, self.image_w)
        if any(c <= 0 for c in counts):
            raise ValueError("catalog sizes must be positive")
        if not 0.0 <= self.mess_rate <= 1.0 or not 0.0 <= self.distractor_rate <= 1.0:
            raise ValueError("noise rates must be in [0, 1]")
        if self.mess_rate + self.distractor_rate > 1.0:
            raise ValueError("noise rates sum above 1")
        if self.jitter < 0.0 or self.pixel_noise < 0.0:
            raise ValueError("jitter and pixel_noise must be non-negative")


@dataclass
class Catalog:
    train: list[Sample]
    eval: list[Sample]


@lru_cache(maxsize=4)
def build_catalog(cfg: DataConfig) -> Catalog:
    """Deterministic catalog: train identities 0..T-1, eval identities
    T..T+E-1, noise injected into train only.  Cached; treat as read-only."""
    h, w = cfg.image_h, cfg.image_w
    train: list[Sample] = []
    for i in range(cfg.train_identities):
        spec = make_identity_spec(i, cfg.catalog_seed)
        train += sample_views(spec, cfg.views_per_identity, cfg.jitter,
                              cfg.pixel_noise,
                              seed=[cfg.catalog_seed, _STREAM_VIEWS, i], h=h, w=w)
    train = inject_noise(train, cfg.mess_rate, cfg.distractor_rate,
                         cfg.catalog_seed, jitter=cfg.jitter,
                         pixel_noise=cfg.pixel_noise)
    eval_: list[Sample] = []
    for i in range(cfg.train_identities,
                   cfg.train_identities + cfg.eval_identities):
        spec = make_identity_spec(i, cfg.catalog_seed)
        eval_ += sample_views(spec, cfg.eval_views, cfg.jitter, cfg.pixel_noise,
                              seed=[cfg.catalog_seed, _STREAM_VIEWS, i], h=h, w=w)
    return Catalog(train=train, eval=eval_)


def identity_base(identity: int, cfg: DataConfig) -> np.ndarray:
    """Canonical image of any identity in the catalog's universe."""
    spec = make_identity_spec(identity, cfg.catalog_seed)
    return render_identity(spec, cfg.image_h, cfg.image_w)


def stack_samples(samples: list[Sample]):
    """Samples as flat arrays: (images (N, H*W), labels, true_ids, noisy mask)."""
    x = np.stack([s.image.reshape(-1) for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    true_ids = np.array([s.true_id for s in samples], dtype=np.int64)
    noisy = np.array([s.noise_flag is not NoiseFlag.CLEAN for s in samples],
                     dtype=bool)
    return x, labels, true_ids, noisy


def export_dataset(catalog: Catalog, out_dir, config_hash: str | None = None) -> Path:
    """Write every sample as a PGM plus a manifest CSV; returns the manifest path."""
    out = Path(out_dir)
    manifest = out / "manifest.csv"
    rows = []
    for split, samples in (("train", catalog.train), ("eval", catalog.eval)):
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples):
            rel = f"{split}/{i:05d}.pgm"
            write_pgm(out / rel, s.image, config_hash=config_hash)
            rows.append((rel, s.label, s.true_id, s.noise_flag.value, split))
    with open(manifest, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "true_id", "noise_flag", "split"])
        writer.writerows(rows)
    return manifest
