"""Open-set evaluation: verification sweeps and rank-1 identification.

Verification works on cosine similarity of embedding pairs.  The threshold
sweep considers every observed similarity, every midpoint between adjacent
distinct similarities and one sentinel above the maximum, predicts "same"
at similarity >= threshold, and keeps the best accuracy; ties go to the
lowest threshold."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass
class PairSet:
    """Index pairs into an embedding matrix plus same-identity flags."""

    index_a: np.ndarray
    index_b: np.ndarray
    same: np.ndarray  # bool

    def __post_init__(self) -> None:
        self.index_a = np.asarray(self.index_a, dtype=np.int64)
        self.index_b = np.asarray(self.index_b, dtype=np.int64)
        self.same = np.asarray(self.same, dtype=bool)
        if not (self.index_a.shape == self.index_b.shape == self.same.shape):
            raise ValueError("pair arrays must share one shape")

    @property
    def num_pairs(self) -> int:
        return self.index_a.size


def make_pairs(labels: np.ndarray, n_same: int, n_diff: int, seed) -> PairSet:
    """Sample a balanced pair list from a labelled gallery.

    Same pairs draw an identity with at least two views, then two distinct
    views; different pairs draw two distinct identities and one view each.
    Sampling is with replacement across pairs."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    ids, counts = np.unique(labels, return_counts=True)
    rich = ids[counts >= 2]
    if n_same > 0 and rich.size == 0:
        raise ValueError("no identity has two views")
    if n_diff > 0 and ids.size < 2:
        raise ValueError("need at least two identities")
    by_id = {int(i): np.flatnonzero(labels == i) for i in ids}
    a, b, same = [], [], []
    for _ in range(n_same):
        ident = int(rich[rng.integers(rich.size)])
        views = by_id[ident]
        i, j = rng.choice(views.size, size=2, replace=False)
        a.append(views[i])
        b.append(views[j])
        same.append(True)
    for _ in range(n_diff):
        i, j = rng.choice(ids.size, size=2, replace=False)
        a.append(by_id[int(ids[i])][rng.integers(by_id[int(ids[i])].size)])
        b.append(by_id[int(ids[j])][rng.integers(by_id[int(ids[j])].size)])
        same.append(False)
    return PairSet(np.array(a), np.array(b), np.array(same))


def cosine_similarities(embeddings: np.ndarray, pairs: PairSet) -> np.ndarray:
    e = np.asarray(embeddings, dtype=float)
    va = e[pairs.index_a]
    vb = e[pairs.index_b]
    num = np.einsum("nd,nd->n", va, vb)
    den = np.linalg.norm(va, axis=1) * np.linalg.norm(vb, axis=1)
    return num / den


def verification_accuracy(embeddings: np.ndarray, pairs: PairSet):
    """Best same/different accuracy over the threshold sweep.

    Returns (accuracy, threshold); the threshold is the smallest among
    maximizers."""
    sims = cosine_similarities(embeddings, pairs)
    same = pairs.same
    uniq = np.unique(sims)
    cand = np.concatenate([uniq, (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1] + 1.0]])
    cand.sort(kind="stable")
    sorted_same = np.sort(sims[same])
    sorted_diff = np.sort(sims[~same])
    # predict same at sim >= t: hits = same-pairs at/above t plus diff-pairs below
    same_ge = sorted_same.size - np.searchsorted(sorted_same, cand, side="left")
    diff_lt = np.searchsorted(sorted_diff, cand, side="left")
    acc = (same_ge + diff_lt) / sims.size
    best = int(np.argmax(acc))  # argmax returns the first max: lowest threshold
    return float(acc[best]), float(cand[best])


def identification_rank1(probe_emb: np.ndarray, probe_ids: np.ndarray,
                         gallery_emb: np.ndarray, gallery_ids: np.ndarray) -> float:
    """Fraction of probes whose nearest gallery entry (by cosine) shares the
    identity.  Ties resolve to the first gallery index."""
    probe_emb = np.asarray(probe_emb, dtype=float)
    gallery_emb = np.asarray(gallery_emb, dtype=float)
    probe_ids = np.asarray(probe_ids, dtype=np.int64)
    gallery_ids = np.asarray(gallery_ids, dtype=np.int64)
    if gallery_emb.shape[0] == 0 or probe_emb.shape[0] == 0:
        raise ValueError("empty probe or gallery")
    pn = probe_emb / np.linalg.norm(probe_emb, axis=1, keepdims=True)
    gn = gallery_emb / np.linalg.norm(gallery_emb, axis=1, keepdims=True)
    sims = pn @ gn.T
    nearest = np.argmax(sims, axis=1)
    return float(np.mean(gallery_ids[nearest] == probe_ids))


def write_eval_report(path, rows: list[dict], config_hash: str | None = None) -> None:
    """CSV report; rows share keys, fixed column order from the first row."""
    if not rows:
        raise ValueError("no rows to write")
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in cols])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
