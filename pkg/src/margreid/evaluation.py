"""Single-shot ranking evaluation: CMC curves, per-query score fusion, and
the raw-descriptor Euclidean baseline."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class ProtocolError(ValueError):
    pass


@dataclass
class ScoreMatrix:
    """Dissimilarities, ascending = better; one gallery entry per identity."""

    scores: np.ndarray  # (n_probe, n_gallery)
    probe_ids: list[str]
    gallery_ids: list[str]

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=float)
        if self.scores.shape != (len(self.probe_ids), len(self.gallery_ids)):
            raise ValueError("score matrix shape does not match the id lists")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if len(set(self.gallery_ids)) != len(self.gallery_ids):
            raise ProtocolError("single-shot gallery must contain each identity exactly once")


@dataclass
class CmcCurve:
    rates: np.ndarray  # rates[r] = fraction of probes with true match at rank <= r+1

    def __post_init__(self) -> None:
        self.rates = np.asarray(self.rates, dtype=float)
        if np.any(self.rates < -1e-12) or np.any(self.rates > 1 + 1e-12):
            raise ValueError("rates must lie in [0, 1]")
        if np.any(np.diff(self.rates) < -1e-12):
            raise ValueError("rates must be nondecreasing")

    def at_rank(self, r: int) -> float:
        return float(self.rates[min(r, len(self.rates)) - 1])


def match_ranks(s: ScoreMatrix) -> np.ndarray:
    """1-based rank of each probe's true match under ascending score.

    Ties are broken deterministically in favor of the lower gallery index.
    """
    gallery_index = {g: j for j, g in enumerate(s.gallery_ids)}
    ranks = np.empty(len(s.probe_ids), dtype=np.int64)
    for i, pid in enumerate(s.probe_ids):
        if pid not in gallery_index:
            raise ProtocolError(f"probe identity {pid!r} missing from the gallery")
        j = gallery_index[pid]
        row = s.scores[i]
        target = row[j]
        ranks[i] = 1 + int((row < target).sum()) + int((row[:j] == target).sum())
    return ranks


def cmc(s: ScoreMatrix) -> CmcCurve:
    """Cumulative match rates over every rank of the gallery."""
    ranks = match_ranks(s)
    n_gallery = len(s.gallery_ids)
    counts = np.bincount(ranks, minlength=n_gallery + 1)[1:]
    rates = np.cumsum(counts) / len(s.probe_ids)
    return CmcCurve(rates=rates)


def _rescale_rows(scores: np.ndarray) -> np.ndarray:
    """Min-max rescale each row to [0, 1]; constant rows map to zeros."""
    lo = scores.min(axis=1, keepdims=True)
    hi = scores.max(axis=1, keepdims=True)
    span = hi - lo
    out = np.zeros_like(scores)
    np.divide(scores - lo, span, out=out, where=span > 0)
    return out


def fuse_scores(score_lists: list[ScoreMatrix]) -> ScoreMatrix:
    """Per-query min-max rescale of each method's row, then element-wise sum."""
    if not score_lists:
        raise ValueError("nothing to fuse")
    first = score_lists[0]
    for other in score_lists[1:]:
        if other.probe_ids != first.probe_ids or other.gallery_ids != first.gallery_ids:
            raise ValueError("fusion requires identical probe/gallery id layouts")
    fused = np.zeros_like(first.scores)
    for s in score_lists:
        fused += _rescale_rows(s.scores)
    return ScoreMatrix(scores=fused, probe_ids=list(first.probe_ids), gallery_ids=list(first.gallery_ids))


def euclidean_baseline(probe_feats: np.ndarray, gallery_feats: np.ndarray, probe_ids: list[str], gallery_ids: list[str]) -> ScoreMatrix:
    """Pairwise Euclidean distances over raw feature vectors."""
    p = np.asarray(probe_feats, dtype=float)
    g = np.asarray(gallery_feats, dtype=float)
    sq = (p**2).sum(axis=1)[:, None] + (g**2).sum(axis=1)[None, :] - 2.0 * p @ g.T
    dists = np.sqrt(np.maximum(sq, 0.0))
    return ScoreMatrix(scores=dists, probe_ids=probe_ids, gallery_ids=gallery_ids)


def single_shot_split(dataset, seed: int = 0):
    """One probe image (view a) and one gallery image (view b) per identity.

    Identities with several images in a view are subsampled uniformly under
    the given seed; identities missing either view are excluded with a
    warning. Returns (probe_records, gallery_records) sorted by identity.
    """
    from . import rngs  # local import to keep module deps one-way

    rng = rngs.stream(seed, "eval.single_shot")
    by_key: dict[tuple[str, str], list] = {}
    for rec in dataset.records:
        by_key.setdefault((rec.identity, rec.view), []).append(rec)
    identities = sorted({rec.identity for rec in dataset.records})
    probes, gallery = [], []
    for ident in identities:
        in_a = by_key.get((ident, "a"), [])
        in_b = by_key.get((ident, "b"), [])
        if not in_a or not in_b:
            log.warning("identity %s lacks images in one view; excluded from the single-shot split", ident)
            continue
        probes.append(in_a[int(rng.integers(len(in_a)))] if len(in_a) > 1 else in_a[0])
        gallery.append(in_b[int(rng.integers(len(in_b)))] if len(in_b) > 1 else in_b[0])
    return probes, gallery


def write_cmc_csv(path: str | Path, curve: CmcCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "rate"])
        for r, rate in enumerate(curve.rates, start=1):
            writer.writerow([r, f"{rate:.17g}"])


def write_scores_csv(path: str | Path, s: ScoreMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["probe_id", *s.gallery_ids])
        for pid, row in zip(s.probe_ids, s.scores):
            writer.writerow([pid, *(f"{v:.17g}" for v in row)])


def read_scores_csv(path: str | Path) -> ScoreMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["probe_id"]:
        raise ValueError(f"{path}: not a score matrix CSV")
    gallery_ids = rows[0][1:]
    probe_ids = [r[0] for r in rows[1:]]
    scores = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return ScoreMatrix(scores=scores, probe_ids=probe_ids, gallery_ids=gallery_ids)
