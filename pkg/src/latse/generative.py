"""Decoder targets and the generative loss.

The decoder turns unit embeddings back into images.  Its target for a class
is a momentum-tracked mean of the class's training images: each accepted
sample moves the stored image by y <- (1 - momentum) * x + momentum * y.
The loss against that target is

    GLoss = L1 + SimLoss,    SimLoss = (1 - SSIM) / 2,

with SSIM computed per Wang et al. 2004: an 11x11 Gaussian window (sigma
1.5) slides over the valid region, local statistics come from the window,
and stabilizers c1 = (0.01 L)^2, c2 = (0.03 L)^2 with dynamic range L = 1.
Both terms come with analytic gradients w.r.t. the generated image; the
SSIM gradient redistributes each window's contribution back over the pixels
it saw by a transposed (full-mode) convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve


class IdentityMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.sigma <= 0.0 or self.dynamic_range <= 0.0:
            raise ValueError("sigma and dynamic_range must be positive")
        if self.k1 <= 0.0 or self.k2 <= 0.0:
            raise ValueError("stabilizer constants must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Separable Gaussian window normalized to sum exactly one."""
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_core(x: np.ndarray, y: np.ndarray, cfg: SsimConfig, want_grad: bool):
    """Batched SSIM over (N, H, W) stacks.

    Returns (per-image mean SSIM, d(mean SSIM)/dx or None).  The window is
    symmetric, so fftconvolve doubles as correlation for the forward stats;
    the gradient terms need true convolution, which it is."""
    win = gaussian_window(cfg.window, cfg.sigma)[None]
    conv = lambda im: fftconvolve(im, win, mode="valid", axes=(1, 2))
    mu_x = conv(x)
    mu_y = conv(y)
    var_x = conv(x * x) - mu_x * mu_x
    var_y = conv(y * y) - mu_y * mu_y
    cov = conv(x * y) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + cfg.c1
    a2 = 2.0 * cov + cfg.c2
    b1 = mu_x * mu_x + mu_y * mu_y + cfg.c1
    b2 = var_x + var_y + cfg.c2
    denom = b1 * b2
    smap = (a1 * a2) / denom
    value = smap.mean(axis=(1, 2))
    if not want_grad:
        return value, None
    # Per window position p and pixel q: d ssim(p)/dx_q =
    # (2 w_{q-p}/denom) * [a2*mu_y + a1*(y_q - mu_y) - smap*(b2*mu_x + b1*(x_q - mu_x))].
    # Split into a constant map and coefficients of y_q and x_q, then spread
    # each map over pixels with a full-mode convolution.
    m0 = (mu_y * (a2 - a1) + smap * mu_x * (b1 - b2)) / denom
    m1 = a1 / denom
    m2 = smap * b1 / denom
    spread = lambda m: fftconvolve(m, win, mode="full", axes=(1, 2))
    npos = smap.shape[1] * smap.shape[2]
    grad = (2.0 / npos) * (spread(m0) + y * spread(m1) - x * spread(m2))
    return value, grad


def _check_pair(a: np.ndarray, b: np.ndarray, cfg: SsimConfig) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("expected 2D images")
    if min(a.shape) < cfg.window:
        raise ValueError(
            f"window {cfg.window} larger than image {a.shape}")


def ssim(a: np.ndarray, b: np.ndarray, cfg: SsimConfig | None = None) -> float:
    """Mean SSIM between two images in [0, dynamic_range]."""
    cfg = cfg or SsimConfig()
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_pair(a, b, cfg)
    for im, name in ((a, "a"), (b, "b")):
        if im.min() < 0.0 or im.max() > cfg.dynamic_range:
            raise ValueError(f"image {name} outside [0, {cfg.dynamic_range}]")
    value, _ = _ssim_core(a[None], b[None], cfg, want_grad=False)
    return float(value[0])


def gloss(gen: np.ndarray, target: np.ndarray, cfg: SsimConfig | None = None):
    """L1 plus structural term for one image pair.

    Returns (loss, d loss/d gen).  The L1 gradient uses sign with sign(0)=0;
    with cfg.enabled False the structural term is skipped entirely, which
    also lifts the window-size floor on image size."""
    cfg = cfg or SsimConfig()
    gen = np.asarray(gen, dtype=float)
    target = np.asarray(target, dtype=float)
    if gen.shape != target.shape:
        raise ValueError(f"image shapes differ: {gen.shape} vs {target.shape}")
    diff = gen - target
    loss = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    if cfg.enabled:
        _check_pair(gen, target, cfg)
        value, sgrad = _ssim_core(gen[None], target[None], cfg, want_grad=True)
        loss += (1.0 - float(value[0])) / 2.0
        grad -= 0.5 * sgrad[0]
    return loss, grad


def gloss_batch(gen: np.ndarray, targets: np.ndarray,
                cfg: SsimConfig | None = None):
    """Mean GLoss over an (N, H, W) batch and its gradient w.r.t. gen."""
    cfg = cfg or SsimConfig()
    gen = np.asarray(gen, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if gen.shape != targets.shape or gen.ndim != 3:
        raise ValueError(f"expected matching (N, H, W) stacks, got "
                         f"{gen.shape} vs {targets.shape}")
    n = gen.shape[0]
    pix = gen.shape[1] * gen.shape[2]
    diff = gen - targets
    per = np.abs(diff).mean(axis=(1, 2))
    grad = np.sign(diff) / pix
    if cfg.enabled:
        if min(gen.shape[1:]) < cfg.window:
            raise ValueError(f"window {cfg.window} larger than image "
                             f"{gen.shape[1:]}")
        value, sgrad = _ssim_core(gen, targets, cfg, want_grad=True)
        per = per + (1.0 - value) / 2.0
        grad = grad - 0.5 * sgrad
    return float(per.mean()), grad / n


@dataclass
class GenTarget:
    """Momentum-tracked mean image for one identity.

    The first accepted sample initializes the image; later samples move it
    by y <- (1 - momentum) * x + momentum * y, computed as x + momentum *
    (y - x) so that x == y is an exact fixed point."""

    identity: int
    image: np.ndarray
    momentum: float = 0.9
    initialized: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def update_target(target: GenTarget, sample: np.ndarray, identity: int) -> GenTarget:
    """Fold one sample of the matching identity into the running mean."""
    if identity != target.identity:
        raise IdentityMismatchError(
            f"sample identity {identity} vs target {target.identity}")
    sample = np.asarray(sample, dtype=float)
    if target.initialized and sample.shape != target.image.shape:
        raise ValueError("sample shape differs from target image")
    if not target.initialized:
        target.image = sample.copy()
        target.initialized = True
    else:
        target.image = sample + target.momentum * (target.image - sample)
    return target


@dataclass
class GenOutput:
    """Decoded images with the embeddings they came from."""

    images: np.ndarray            # (N, H, W) in [0, 1]
    source_embedding: np.ndarray  # (N, d)


def decode(params, embeddings: np.ndarray, image_shape: tuple[int, int]) -> GenOutput:
    out, _ = decode_with_cache(params, embeddings, image_shape)
    return out


def decode_with_cache(params, embeddings: np.ndarray,
                      image_shape: tuple[int, int]):
    from latse.net import net_forward  # local import, no cycle at module load

    embeddings = np.asarray(embeddings, dtype=float)
    h, w = image_shape
    if h * w != params.topology.dims[-1]:
        raise ValueError(f"decoder emits {params.topology.dims[-1]} values, "
                         f"cannot reshape to {image_shape}")
    flat, cache = net_forward(params, embeddings)
    return GenOutput(flat.reshape(-1, h, w), embeddings), cache


def export_panel(path, inputs: np.ndarray, generated: np.ndarray,
                 config_hash: str | None = None, gap: int = 2) -> None:
    """Write a three-row contact sheet: inputs, reconstructions, |difference|."""
    from latse.pgm import write_pgm

    inputs = np.asarray(inputs, dtype=float)
    generated = np.asarray(generated, dtype=float)
    if inputs.shape != generated.shape or inputs.ndim != 3:
        raise ValueError("inputs and generated must be matching (N, H, W) stacks")
    rows = [inputs, generated, np.abs(inputs - generated)]
    n, h, w = inputs.shape
    panel = np.ones((3 * h + 2 * gap, n * w + (n - 1) * gap))
    for r, stack in enumerate(rows):
        y0 = r * (h + gap)
        for i in range(n):
            x0 = i * (w + gap)
            panel[y0:y0 + h, x0:x0 + w] = np.clip(stack[i], 0.0, 1.0)
    write_pgm(path, panel, config_hash=config_hash)
