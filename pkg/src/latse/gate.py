"""Teacher top-k acceptance.

A trained teacher scores every sample; a sample passes when its label is
among the teacher's k most probable classes.  Rejected samples keep flowing
through the student's forward pass but contribute no gradient.  Ranking ties
are broken toward the lower class index via a stable sort, so decisions are
reproducible bit for bit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from latse.margins import ProbDist


@dataclass(frozen=True)
class GateDecision:
    sample_index: int
    label: int
    teacher_top_k: tuple[int, ...]  # class indices, most probable first
    passed: bool


def gate(teacher_probs: ProbDist, labels: np.ndarray, k: int) -> list[GateDecision]:
    """Decide acceptance for each row of a probability batch.

    k = 0 rejects everything (the caller normally skips gating instead);
    k >= num_classes accepts everything."""
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    probs = teacher_probs.probs
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (probs.shape[0],):
        raise ValueError("labels must be one per row")
    kk = min(k, probs.shape[1])
    # stable argsort on -probs: equal probabilities rank lower index first
    order = np.argsort(-probs, axis=1, kind="stable")[:, :kk]
    decisions = []
    for i, label in enumerate(labels):
        top = tuple(int(c) for c in order[i])
        decisions.append(GateDecision(sample_index=i, label=int(label),
                                      teacher_top_k=top,
                                      passed=int(label) in top))
    return decisions


def passed_mask(decisions: list[GateDecision]) -> np.ndarray:
    return np.array([d.passed for d in decisions], dtype=bool)


def filter_gradients(decisions: list[GateDecision], grad: np.ndarray):
    """Zero the gradient rows of rejected samples.

    Returns (filtered copy, number of rejected rows).  Row count must match
    the decision list; denominators are untouched, a rejected sample simply
    contributes nothing."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape[0] != len(decisions):
        raise ValueError(f"{grad.shape[0]} gradient rows vs "
                         f"{len(decisions)} decisions")
    mask = passed_mask(decisions)
    out = grad.copy()
    out[~mask] = 0.0
    return out, int((~mask).sum())


@dataclass
class GateStats:
    """Confusion of gate rejections against ground-truth noise flags."""

    total: int
    noisy: int
    rejected: int
    rejected_noisy: int
    rejected_clean: int

    @property
    def noise_recall(self) -> float:
        """Fraction of noisy samples the gate rejects."""
        return self.rejected_noisy / self.noisy if self.noisy else 0.0

    @property
    def noise_precision(self) -> float:
        """Fraction of rejections that are actually noisy."""
        return self.rejected_noisy / self.rejected if self.rejected else 0.0

    @property
    def clean_false_rejection(self) -> float:
        """Fraction of clean samples the gate rejects."""
        clean = self.total - self.noisy
        return self.rejected_clean / clean if clean else 0.0

    def lines(self) -> list[str]:
        return [
            "metric,value",
            f"total,{self.total}",
            f"noisy,{self.noisy}",
            f"rejected,{self.rejected}",
            f"rejected_noisy,{self.rejected_noisy}",
            f"rejected_clean,{self.rejected_clean}",
            f"noise_recall,{self.noise_recall!r}",
            f"noise_precision,{self.noise_precision!r}",
            f"clean_false_rejection,{self.clean_false_rejection!r}",
        ]


def gate_stats(passed: np.ndarray, noisy: np.ndarray) -> GateStats:
    """Tally rejections against noise flags; both arrays are boolean."""
    passed = np.asarray(passed, dtype=bool)
    noisy = np.asarray(noisy, dtype=bool)
    if passed.shape != noisy.shape:
        raise ValueError("mask shapes differ")
    rejected = ~passed
    return GateStats(
        total=int(passed.size),
        noisy=int(noisy.sum()),
        rejected=int(rejected.sum()),
        rejected_noisy=int((rejected & noisy).sum()),
        rejected_clean=int((rejected & ~noisy).sum()),
    )
