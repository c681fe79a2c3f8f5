"""End-to-end wiring: exemplars -> kernel space -> invariant layer ->
concatenation + PCA -> metric training -> single-shot evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rngs
from .config import PipelineConfig
from .data import Dataset, DatasetRecord, compute_descriptors
from .evaluation import CmcCurve, ScoreMatrix, cmc, euclidean_baseline, single_shot_split
from .kernelmap import ExemplarSet, estimate_bandwidth, kernel_map_batch, load_exemplars, save_exemplars
from .layer1 import EncoderParams, PairBatch, encode, load_encoder, save_encoder, train_alternating
from .metric import MetricParams, load_metric, sample_pairs, save_metric, score_matrix, train_metric
from .numerics import PcaModel, pca_fit, pca_project
from .container import load_tensors, save_tensors

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A stage failed; message names the stage."""


@dataclass
class Artifacts:
    exemplars: ExemplarSet
    probe_encoder: EncoderParams
    gallery_encoder: EncoderParams
    pca: PcaModel
    metric: MetricParams


def _stage(name):
    def deco(fn):
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except PipelineError:
                raise
            except Exception as exc:
                raise PipelineError(f"stage {name!r} failed: {exc}") from exc

        return wrapper

    return deco


def stripes_of(dataset: Dataset) -> np.ndarray:
    """All stripe descriptors in record order, shape (6 * n_records, 430)."""
    return np.vstack([rec.stripes for rec in dataset.records])


def matched_pairs(dataset: Dataset) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Stripe descriptor pairs for identities present in both views.

    Multi-image identities contribute the first image per view (deterministic
    record order). Returns (identities, probe stripes, gallery stripes), each
    side shaped (6 * n_pairs, 430) with stripe i of one side aligned to
    stripe i of the other.
    """
    first: dict[tuple[str, str], DatasetRecord] = {}
    for rec in dataset.records:
        first.setdefault((rec.identity, rec.view), rec)
    idents = sorted({i for (i, v) in first if v == "a"} & {i for (i, v) in first if v == "b"})
    if not idents:
        raise PipelineError("stage 'pairs' failed: no identity appears in both views")
    phi = [first[(i, "a")].stripes for i in idents]
    psi = [first[(i, "b")].stripes for i in idents]
    return idents, np.vstack(phi), np.vstack(psi)


@_stage("exemplars")
def build_exemplars(train: Dataset, cfg: PipelineConfig) -> ExemplarSet:
    stripes = stripes_of(train)
    bandwidth = cfg.bandwidth if cfg.bandwidth > 0 else estimate_bandwidth(stripes, seed=cfg.seed)
    return ExemplarSet(exemplars=stripes, bandwidth=bandwidth)


def global_representations(dataset: Dataset, ex: ExemplarSet, pp: EncoderParams, pg: EncoderParams) -> tuple[list[DatasetRecord], np.ndarray]:
    """Concatenated per-stripe latent codes per image (before PCA).

    View 'a' records pass through the probe network, view 'b' through the
    gallery network. Shape (n_records, 6 * D_h).
    """
    reps = []
    for rec in dataset.records:
        responses = kernel_map_batch(rec.stripes, ex)
        z = encode(pp if rec.view == "a" else pg, responses)
        reps.append(z.ravel())
    return list(dataset.records), np.vstack(reps)


@_stage("train")
def train_pipeline(train: Dataset, cfg: PipelineConfig, history: dict | None = None) -> Artifacts:
    """Run every training stage on an already-descriptor-bearing dataset."""
    train = compute_descriptors(train)
    ex = build_exemplars(train, cfg)
    log.info("exemplar set: %d anchors, bandwidth %.4f", len(ex), ex.bandwidth)

    idents, phi_desc, psi_desc = matched_pairs(train)
    phi = kernel_map_batch(phi_desc, ex)
    psi = kernel_map_batch(psi_desc, ex)
    l1_history: list = []
    pp, pg = train_alternating(PairBatch(phi=phi, psi=psi), cfg.layer1_config(), seed=cfg.seed, history=l1_history)

    records, reps = global_representations(train, ex, pp, pg)
    pca = pca_fit(reps, cfg.d_ml)
    projected = pca_project(pca, reps)

    by_key = {(rec.identity, rec.view): projected[i] for i, rec in enumerate(records)}
    pair_ids = [i for i in idents if (i, "a") in by_key and (i, "b") in by_key]
    probe_reps = np.stack([by_key[(i, "a")] for i in pair_ids])
    gallery_reps = np.stack([by_key[(i, "b")] for i in pair_ids])
    pairs = sample_pairs(probe_reps, gallery_reps, rho=cfg.rho, rng=rngs.stream(cfg.seed, "metric.negatives"))
    ml_history: list = []
    metric = train_metric(pairs, cfg.metric_config(), seed=cfg.seed, history=ml_history)

    if history is not None:
        history["layer1"] = l1_history
        history["metric"] = ml_history
    return Artifacts(exemplars=ex, probe_encoder=pp, gallery_encoder=pg, pca=pca, metric=metric)


@dataclass
class EvalResult:
    scores: ScoreMatrix
    curve: CmcCurve
    baseline_scores: ScoreMatrix
    baseline_curve: CmcCurve

    def summary(self) -> dict[str, float]:
        out = {}
        for r in (1, 5, 10, 20):
            out[f"rank{r}"] = self.curve.at_rank(r)
            out[f"baseline_rank{r}"] = self.baseline_curve.at_rank(r)
        return out


@_stage("evaluate")
def evaluate_pipeline(test: Dataset, art: Artifacts, cfg: PipelineConfig) -> EvalResult:
    """Single-shot protocol on the test identities."""
    test = compute_descriptors(test)
    probes, gallery = single_shot_split(test, seed=cfg.seed)
    probe_ids = [r.identity for r in probes]
    gallery_ids = [r.identity for r in gallery]

    def represent(recs, params):
        responses = kernel_map_batch(np.vstack([r.stripes for r in recs]), art.exemplars)
        z = encode(params, responses)
        per_image = z.reshape(len(recs), -1)
        return pca_project(art.pca, per_image)

    k_probe = represent(probes, art.probe_encoder)
    k_gallery = represent(gallery, art.gallery_encoder)
    scores = ScoreMatrix(scores=score_matrix(art.metric, k_probe, k_gallery), probe_ids=probe_ids, gallery_ids=gallery_ids)

    raw_p = np.stack([r.stripes.ravel() for r in probes])
    raw_g = np.stack([r.stripes.ravel() for r in gallery])
    baseline = euclidean_baseline(raw_p, raw_g, probe_ids, gallery_ids)
    return EvalResult(scores=scores, curve=cmc(scores), baseline_scores=baseline, baseline_curve=cmc(baseline))


ARTIFACT_FILES = {
    "exemplars": "exemplars.bin",
    "probe_encoder": "encoder_probe.bin",
    "gallery_encoder": "encoder_gallery.bin",
    "pca": "pca.bin",
    "metric": "metric.bin",
}


def save_artifacts(out_dir: str | Path, art: Artifacts) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_exemplars(out_dir / ARTIFACT_FILES["exemplars"], art.exemplars)
    save_encoder(out_dir / ARTIFACT_FILES["probe_encoder"], art.probe_encoder)
    save_encoder(out_dir / ARTIFACT_FILES["gallery_encoder"], art.gallery_encoder)
    save_tensors(out_dir / ARTIFACT_FILES["pca"], [art.pca.mean, art.pca.basis, art.pca.eigenvalues])
    save_metric(out_dir / ARTIFACT_FILES["metric"], art.metric)


def load_artifacts(in_dir: str | Path) -> Artifacts:
    in_dir = Path(in_dir)
    mean, basis, eigenvalues = load_tensors(in_dir / ARTIFACT_FILES["pca"])
    return Artifacts(
        exemplars=load_exemplars(in_dir / ARTIFACT_FILES["exemplars"]),
        probe_encoder=load_encoder(in_dir / ARTIFACT_FILES["probe_encoder"]),
        gallery_encoder=load_encoder(in_dir / ARTIFACT_FILES["gallery_encoder"]),
        pca=PcaModel(mean=mean, basis=basis, eigenvalues=eigenvalues),
        metric=load_metric(in_dir / ARTIFACT_FILES["metric"]),
    )


def write_training_log(path: str | Path, history: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "network", "round", "step", "objective"])
        for net, rnd, vals in _grouped_layer1(history.get("layer1", [])):
            for step, v in enumerate(vals):
                writer.writerow(["layer1", net, rnd, step, f"{v:.17g}"])
        for step, v in enumerate(history.get("metric", [])):
            writer.writerow(["metric", "", 0, step, f"{v:.17g}"])


def _grouped_layer1(rows):
    grouped: dict[tuple[str, int], list[float]] = {}
    order = []
    for net, rnd, val in rows:
        key = (net, rnd)
        if key not in grouped:
            grouped[key] = []
            order.append(key)
        grouped[key].append(val)
    return [(net, rnd, grouped[(net, rnd)]) for net, rnd in order]
