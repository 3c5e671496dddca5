"""Margin-softmax probabilities over feature/center angles.

A spherical classifier scores class j with the logit s*cos(theta_j), where
theta_j is the angle between the sample's unit embedding and the unit center
of class j.  Margin losses keep the non-target logits and replace only the
logit of the labelled class with a penalised target logit:

    softmax    cos(theta)
    combined   cos(m1*theta + m2) - m3   (SphereFace / ArcFace / CosFace style)
    linear     -a*theta + b

Two design rules decide whether a target-logit curve is sound.  P1 (margin
penalty): the target logit never exceeds cos(theta), so the margin can only
depress the target probability.  P2 (monotone): the target logit never
increases with theta, so the only way to gain target probability is to
shrink the angle.  Both are audited on the pre-scale target logit; because
exp is strictly increasing and the non-target logits are untouched, a
verdict at any scale s > 0 is a verdict at every scale.

`check_principles` audits a spec on a dense theta grid and reports the
offending intervals; `emit_curves` tabulates target-logit curves for
side-by-side comparison.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-38
P1_TOL = 1e-12
P2_TOL = 1e-12
DEFAULT_GRID_STEP = 1e-3


class Family(str, enum.Enum):
    SOFTMAX = "softmax"
    COMBINED = "combined"
    LINEAR = "linear"


@dataclass(frozen=True)
class MarginSpec:
    """Immutable description of one margin loss.

    m1/m2/m3 are read only for the combined family, a/b only for the linear
    family.  s scales logits just before the softmax.
    """

    family: Family
    m1: float = 1.0
    m2: float = 0.0
    m3: float = 0.0
    a: float = 1.0
    b: float = 1.0
    s: float = 16.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", Family(self.family))
        if not self.s > 0.0:
            raise ValueError(f"scale must be positive, got {self.s}")
        if self.family is Family.COMBINED:
            if self.m1 < 1.0 or self.m2 < 0.0 or self.m3 < 0.0:
                raise ValueError(
                    f"combined margin needs m1 >= 1, m2 >= 0, m3 >= 0, "
                    f"got ({self.m1}, {self.m2}, {self.m3})"
                )
        if self.family is Family.LINEAR and not self.a > 0.0:
            raise ValueError(f"linear margin needs a > 0, got {self.a}")

    @classmethod
    def softmax(cls, s: float = 16.0) -> "MarginSpec":
        return cls(Family.SOFTMAX, s=s)

    @classmethod
    def combined(cls, m1: float = 1.0, m2: float = 0.0, m3: float = 0.0,
                 s: float = 16.0) -> "MarginSpec":
        return cls(Family.COMBINED, m1=m1, m2=m2, m3=m3, s=s)

    @classmethod
    def linear(cls, a: float = 0.88, b: float = 0.88, s: float = 16.0) -> "MarginSpec":
        return cls(Family.LINEAR, a=a, b=b, s=s)

    def label(self) -> str:
        """Short name usable as a CSV column header."""
        g = lambda v: f"{v:g}"
        if self.family is Family.SOFTMAX:
            return "softmax"
        if self.family is Family.COMBINED:
            return f"combined_m1_{g(self.m1)}_m2_{g(self.m2)}_m3_{g(self.m3)}"
        return f"linear_a_{g(self.a)}_b_{g(self.b)}"


def standard_specs(s: float = 16.0) -> dict[str, MarginSpec]:
    """The five specs used throughout for comparisons.

    Margins follow the usual published values: additive angle 0.5, additive
    cosine 0.35, multiplicative angle 4."""
    return {
        "softmax": MarginSpec.softmax(s=s),
        "add_angle": MarginSpec.combined(m2=0.5, s=s),
        "add_cos": MarginSpec.combined(m3=0.35, s=s),
        "mult_angle": MarginSpec.combined(m1=4.0, s=s),
        "linear": MarginSpec.linear(0.88, 0.88, s=s),
    }


@dataclass
class AngleBatch:
    """Angles between N embeddings and K class centers, plus the label column.

    angles: (N, K) radians in [0, pi].  target_index: (N,) ints in [0, K)."""

    angles: np.ndarray
    target_index: np.ndarray

    def __post_init__(self) -> None:
        self.angles = np.asarray(self.angles, dtype=float)
        self.target_index = np.asarray(self.target_index, dtype=np.int64)
        if self.angles.ndim != 2:
            raise ValueError(f"angles must be (N, K), got shape {self.angles.shape}")
        if self.target_index.shape != (self.angles.shape[0],):
            raise ValueError("target_index must be one label per row")
        if self.angles.size and (self.angles.min() < 0.0 or self.angles.max() > math.pi):
            raise ValueError("angles outside [0, pi]")
        if self.target_index.size and (
            self.target_index.min() < 0 or self.target_index.max() >= self.angles.shape[1]
        ):
            raise ValueError("target_index outside [0, K)")

    @property
    def num_samples(self) -> int:
        return self.angles.shape[0]

    @property
    def num_classes(self) -> int:
        return self.angles.shape[1]


@dataclass
class ProbDist:
    """Per-sample class probabilities; rows sum to one."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 2:
            raise ValueError("probs must be (N, K)")
        if self.probs.size:
            if self.probs.min() < 0.0:
                raise ValueError("negative probability")
            sums = self.probs.sum(axis=1)
            if np.max(np.abs(sums - 1.0)) > 1e-9:
                raise ValueError("rows do not sum to 1")


def _target_logit_raw(spec: MarginSpec, theta: np.ndarray) -> np.ndarray:
    if spec.family is Family.SOFTMAX:
        return np.cos(theta)
    if spec.family is Family.COMBINED:
        return np.cos(spec.m1 * theta + spec.m2) - spec.m3
    return -spec.a * theta + spec.b


def _target_slope(spec: MarginSpec, theta: np.ndarray) -> np.ndarray:
    """d(target logit)/d(theta), pre-scale."""
    if spec.family is Family.SOFTMAX:
        return -np.sin(theta)
    if spec.family is Family.COMBINED:
        return -spec.m1 * np.sin(spec.m1 * theta + spec.m2)
    return np.full_like(theta, -spec.a)


def target_logit(spec: MarginSpec, theta):
    """Pre-scale logit assigned to the labelled class at angle theta.

    Accepts a scalar or an array; every entry must lie in [0, pi]."""
    th = np.asarray(theta, dtype=float)
    if th.size and (th.min() < 0.0 or th.max() > math.pi):
        raise ValueError("theta outside [0, pi]")
    out = _target_logit_raw(spec, th)
    if np.ndim(theta) == 0:
        return float(out)
    return out


def _scaled_logits(spec: MarginSpec, batch: AngleBatch) -> np.ndarray:
    z = spec.s * np.cos(batch.angles)
    rows = np.arange(batch.num_samples)
    t = batch.target_index
    z[rows, t] = spec.s * _target_logit_raw(spec, batch.angles[rows, t])
    return z


def margin_probability(spec: MarginSpec, batch: AngleBatch) -> ProbDist:
    """Softmax over scaled logits with the margin applied to the target entry.

    Uses max-subtraction, so rows sum to one to float accuracy at any s."""
    z = _scaled_logits(spec, batch)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return ProbDist(e / e.sum(axis=1, keepdims=True))


@dataclass
class DLossResult:
    loss: float
    grad_theta: np.ndarray  # (N, K), d(mean loss)/d(angles)
    clamped: bool           # True if any target probability hit the log floor


def dloss(spec: MarginSpec, batch: AngleBatch) -> DLossResult:
    """Mean cross entropy of the margin probabilities at the labelled class,
    with the analytic gradient through every angle.

    The gradient treats angles as free variables: for sample i,
    dL/dtheta_ij = (p_ij - [j == label_i]) * dz_j/dtheta_ij / N, where z is
    the scaled logit row (z_j = s*cos for j != label, the scaled target logit
    otherwise).  Target probabilities below LOG_FLOOR are clamped inside the
    log only; the flag in the result records that this happened."""
    probs = margin_probability(spec, batch).probs
    n = batch.num_samples
    rows = np.arange(n)
    t = batch.target_index
    pt = probs[rows, t]
    clamped = bool(np.any(pt < LOG_FLOOR))
    loss = float(np.mean(-np.log(np.maximum(pt, LOG_FLOOR))))

    dz = -spec.s * np.sin(batch.angles)
    dz[rows, t] = spec.s * _target_slope(spec, batch.angles[rows, t])
    resid = probs.copy()
    resid[rows, t] -= 1.0
    grad = resid * dz / n
    return DLossResult(loss=loss, grad_theta=grad, clamped=clamped)


def make_grid(start: float, end: float, step: float) -> np.ndarray:
    """Uniform theta grid over [start, end], end included, clipped to the domain."""
    if step <= 0.0:
        raise ValueError("step must be positive")
    if not (0.0 <= start < end <= math.pi + 1e-12):
        raise ValueError("grid must satisfy 0 <= start < end <= pi")
    end = min(end, math.pi)
    n = int(math.floor((end - start) / step + 1e-9))
    grid = start + step * np.arange(n + 1)
    np.minimum(grid, end, out=grid)
    if end - grid[-1] > 1e-12:
        grid = np.append(grid, end)
    return grid


def _mask_intervals(grid: np.ndarray, fail: np.ndarray, pair: bool) -> list[tuple[float, float]]:
    """Maximal runs of failing entries as closed theta intervals.

    With pair=True, fail[k] refers to the step grid[k] -> grid[k+1]."""
    idx = np.flatnonzero(fail)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate(([0], breaks + 1))
    ends = np.concatenate((breaks, [idx.size - 1]))
    out = []
    for s_, e_ in zip(starts, ends):
        lo = float(grid[idx[s_]])
        hi = float(grid[idx[e_] + 1] if pair else grid[idx[e_]])
        out.append((lo, hi))
    return out


@dataclass
class PrincipleReport:
    """Audit verdicts for one margin spec on one grid."""

    spec: MarginSpec
    grid_start: float
    grid_end: float
    grid_step: float
    p1_ok: bool
    p1_violations: list[tuple[float, float]] = field(default_factory=list)
    p2_ok: bool = True
    p2_violations: list[tuple[float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.p1_ok and self.p2_ok

    def lines(self) -> list[str]:
        fmt_iv = lambda ivs: " ".join(f"{lo!r}:{hi!r}" for lo, hi in ivs)
        return [
            "# margin principle audit",
            "# P1: target logit <= cos(theta); P2: target logit non-increasing.",
            "# Audited on pre-scale target logits; verdicts hold for every s > 0.",
            f"family = {self.spec.family.value}",
            f"m1 = {self.spec.m1!r}",
            f"m2 = {self.spec.m2!r}",
            f"m3 = {self.spec.m3!r}",
            f"a = {self.spec.a!r}",
            f"b = {self.spec.b!r}",
            f"s = {self.spec.s!r}",
            f"grid_start = {self.grid_start!r}",
            f"grid_end = {self.grid_end!r}",
            f"grid_step = {self.grid_step!r}",
            f"p1_ok = {str(self.p1_ok).lower()}",
            f"p1_violations = {fmt_iv(self.p1_violations)}",
            f"p2_ok = {str(self.p2_ok).lower()}",
            f"p2_violations = {fmt_iv(self.p2_violations)}",
        ]

    def write(self, path, config_hash: str | None = None) -> None:
        lines = self.lines()
        if config_hash:
            lines.insert(0, f"# config_hash={config_hash}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def check_principles(
    spec: MarginSpec,
    grid_start: float = 0.0,
    grid_end: float = math.pi,
    step: float = DEFAULT_GRID_STEP,
) -> PrincipleReport:
    """Audit P1 and P2 on a uniform grid.

    P1 fails wherever target_logit(theta) > cos(theta) + tolerance.  P2 fails
    on any adjacent pair where the target logit increases beyond tolerance;
    reported intervals span from the first offending grid point to the last."""
    grid = make_grid(grid_start, grid_end, step)
    tl = _target_logit_raw(spec, grid)
    p1_fail = tl > np.cos(grid) + P1_TOL
    p2_fail = tl[1:] > tl[:-1] + P2_TOL
    p1_iv = _mask_intervals(grid, p1_fail, pair=False)
    p2_iv = _mask_intervals(grid, p2_fail, pair=True)
    return PrincipleReport(
        spec=spec,
        grid_start=float(grid[0]),
        grid_end=float(grid[-1]),
        grid_step=step,
        p1_ok=not p1_iv,
        p1_violations=p1_iv,
        p2_ok=not p2_iv,
        p2_violations=p2_iv,
    )


@dataclass
class CurveTable:
    """Target-logit curves tabulated on a shared grid."""

    grid: np.ndarray
    labels: list[str]
    values: np.ndarray  # (len(grid), len(labels))

    def write_csv(self, path, config_hash: str | None = None) -> None:
        with open(path, "w") as fh:
            if config_hash:
                fh.write(f"# config_hash={config_hash}\n")
            fh.write("theta," + ",".join(self.labels) + "\n")
            for i, th in enumerate(self.grid):
                row = ",".join(f"{v:.9f}" for v in self.values[i])
                fh.write(f"{th:.9f},{row}\n")


def emit_curves(specs: Sequence[MarginSpec] | Iterable[MarginSpec],
                grid: np.ndarray) -> CurveTable:
    specs = list(specs)
    values = np.column_stack([_target_logit_raw(sp, grid) for sp in specs])
    return CurveTable(grid=np.asarray(grid, float), labels=[sp.label() for sp in specs],
                      values=values)
