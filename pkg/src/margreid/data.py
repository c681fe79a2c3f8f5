"""Dataset ingestion, train/test splitting, and a synthetic two-view generator.

Directory layout for image datasets:

    root/view_a/<identity>_<index>.ppm
    root/view_b/<identity>_<index>.ppm

Precomputed-descriptor datasets use the CSV export format (one bare
430-column row per stripe, plus an index CSV), so users of datasets that
cannot be redistributed can skip image decoding entirely.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rngs
from .features import BLOCK_SIZES, DESCRIPTOR_DIM, N_STRIPES, ImageRGB, decode_ppm, image_descriptors

VIEWS = ("a", "b")


class IngestionError(ValueError):
    pass


@dataclass
class DatasetRecord:
    identity: str
    view: str  # "a" | "b"
    image: ImageRGB | None = None
    stripes: np.ndarray | None = None  # (6, 430) when precomputed
    image_id: str = ""

    def __post_init__(self) -> None:
        if self.view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}")
        if self.stripes is not None and self.stripes.shape != (N_STRIPES, DESCRIPTOR_DIM):
            raise ValueError("precomputed records need exactly 6 stripes of 430 dims")
        if not self.image_id:
            self.image_id = f"{self.identity}_0"


@dataclass
class Dataset:
    records: list[DatasetRecord] = field(default_factory=list)

    def identities(self) -> list[str]:
        return sorted({r.identity for r in self.records})

    def subset(self, identities) -> "Dataset":
        keep = set(identities)
        return Dataset(records=[r for r in self.records if r.identity in keep])

    def __len__(self) -> int:
        return len(self.records)


def _parse_filename(name: str) -> tuple[str, str]:
    stem = name[: -len(".ppm")]
    if "_" not in stem:
        raise IngestionError(f"filename {name!r} is not <identity>_<index>.ppm")
    identity, _, index = stem.rpartition("_")
    if not identity or not index:
        raise IngestionError(f"filename {name!r} is not <identity>_<index>.ppm")
    return identity, stem


def load_dataset(root: str | Path) -> Dataset:
    """Decode every image under root/view_a and root/view_b."""
    root = Path(root)
    problems: list[str] = []
    records: list[DatasetRecord] = []
    for view in VIEWS:
        view_dir = root / f"view_{view}"
        if not view_dir.is_dir():
            raise IngestionError(f"missing view directory {view_dir}")
        for path in sorted(view_dir.glob("*.ppm")):
            try:
                identity, image_id = _parse_filename(path.name)
                img = decode_ppm(path.read_bytes())
            except ValueError as exc:
                problems.append(f"{path}: {exc}")
                continue
            records.append(DatasetRecord(identity=identity, view=view, image=img, image_id=image_id))
    if problems:
        raise IngestionError("failed to ingest:\n  " + "\n  ".join(problems))
    return Dataset(records=records)


def compute_descriptors(dataset: Dataset) -> Dataset:
    """Fill in per-stripe descriptors for records that carry raw images."""
    out = []
    for rec in dataset.records:
        if rec.stripes is None:
            if rec.image is None:
                raise IngestionError(f"record {rec.image_id} has neither image nor descriptors")
            rec = DatasetRecord(
                identity=rec.identity, view=rec.view, image=rec.image,
                stripes=image_descriptors(rec.image), image_id=rec.image_id,
            )
        out.append(rec)
    return Dataset(records=out)


def split_train_test(dataset: Dataset, p: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Sample p identities (without replacement) into train; rest are test."""
    identities = dataset.identities()
    if not (0 < p < len(identities)):
        raise ValueError(f"training identity count {p} must be in (0, {len(identities)})")
    rng = rngs.stream(seed, "data.split")
    train_ids = set(rng.choice(identities, size=p, replace=False).tolist())
    return dataset.subset(train_ids), dataset.subset(set(identities) - train_ids)


def _block_normalize(x: np.ndarray) -> np.ndarray:
    out = x.copy()
    start = 0
    for size in BLOCK_SIZES:
        block = out[start : start + size]
        total = block.sum()
        if total > 0:
            block /= total
        start += size
    return out


@dataclass
class SynthConfig:
    n_identities: int
    latent_dim: int
    noise_scale: float
    stripes_per_image: int = N_STRIPES
    feature_dim: int = DESCRIPTOR_DIM
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_identities <= 0 or self.latent_dim <= 0:
            raise ValueError("counts must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")
        if self.feature_dim != DESCRIPTOR_DIM or self.stripes_per_image != N_STRIPES:
            raise ValueError("synthetic descriptors must match the 6-stripe / 430-dim layout")


# weight of the per-view factor relative to the shared per-stripe factor;
# larger values make the two views look less alike in raw feature space
VIEW_FACTOR_WEIGHT = 3.0


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Two-view dataset of blockwise-normalized softplus features.

    Each identity draws a latent vector; each (view, stripe) owns a fixed
    mixing matrix of a shared per-stripe part plus a view-specific part, so
    matched cross-view descriptors are related but not equal. Outputs satisfy
    the stripe-descriptor invariants (nonnegative, per-block l1 mass 1).
    """
    g_rng = rngs.stream(cfg.seed, "synth.mixing")
    scale = 1.0 / np.sqrt(cfg.latent_dim)
    shared = {s: g_rng.normal(scale=scale, size=(cfg.feature_dim, cfg.latent_dim)) for s in range(cfg.stripes_per_image)}
    mixing = {
        (v, s): shared[s] + VIEW_FACTOR_WEIGHT * g_rng.normal(scale=scale, size=(cfg.feature_dim, cfg.latent_dim))
        for v in VIEWS
        for s in range(cfg.stripes_per_image)
    }
    lat_rng = rngs.stream(cfg.seed, "synth.latents")
    noise_rng = rngs.stream(cfg.seed, "synth.noise")
    records = []
    for i in range(cfg.n_identities):
        ident = f"id{i:04d}"
        u = lat_rng.normal(size=cfg.latent_dim)
        for v in VIEWS:
            stripes = np.empty((cfg.stripes_per_image, cfg.feature_dim))
            for s in range(cfg.stripes_per_image):
                raw = mixing[(v, s)] @ u
                if cfg.noise_scale > 0:
                    raw = raw + noise_rng.normal(scale=cfg.noise_scale, size=cfg.feature_dim)
                stripes[s] = _block_normalize(np.logaddexp(0.0, raw))
            records.append(DatasetRecord(identity=ident, view=v, stripes=stripes, image_id=f"{ident}_0"))
    return Dataset(records=records)


def save_descriptor_dataset(dataset: Dataset, out_dir: str | Path) -> dict[str, Path]:
    """Write view_a.csv / view_b.csv (bare 430-column rows) plus index.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {v: out_dir / f"view_{v}.csv" for v in VIEWS}
    index_path = out_dir / "index.csv"
    row_counters = {v: 0 for v in VIEWS}
    handles = {v: open(paths[v], "w", newline="") for v in VIEWS}
    try:
        with open(index_path, "w", newline="") as idx_fh:
            idx = csv.writer(idx_fh)
            idx.writerow(["image_id", "view", "stripe_index", "row"])
            for rec in dataset.records:
                if rec.stripes is None:
                    raise IngestionError(f"record {rec.image_id} has no descriptors to export")
                for s in range(rec.stripes.shape[0]):
                    handles[rec.view].write(",".join(f"{v:.17g}" for v in rec.stripes[s]) + "\n")
                    idx.writerow([rec.image_id, rec.view, s, row_counters[rec.view]])
                    row_counters[rec.view] += 1
    finally:
        for fh in handles.values():
            fh.close()
    paths["index"] = index_path
    return paths


def load_descriptor_dataset(in_dir: str | Path) -> Dataset:
    """Inverse of save_descriptor_dataset."""
    in_dir = Path(in_dir)
    matrices = {}
    for v in VIEWS:
        path = in_dir / f"view_{v}.csv"
        if not path.is_file():
            raise IngestionError(f"missing descriptor file {path}")
        matrices[v] = np.loadtxt(path, delimiter=",", ndmin=2)
    index_path = in_dir / "index.csv"
    if not index_path.is_file():
        raise IngestionError(f"missing index file {index_path}")
    grouped: dict[tuple[str, str], dict[int, int]] = {}
    with open(index_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            grouped.setdefault((row["image_id"], row["view"]), {})[int(row["stripe_index"])] = int(row["row"])
    records = []
    for (image_id, view), stripe_rows in sorted(grouped.items()):
        if sorted(stripe_rows) != list(range(N_STRIPES)):
            raise IngestionError(f"image {image_id} view {view} does not have exactly {N_STRIPES} stripes")
        stripes = np.stack([matrices[view][stripe_rows[s]] for s in range(N_STRIPES)])
        identity, _, _ = image_id.rpartition("_")
        if not identity:
            raise IngestionError(f"image id {image_id!r} does not parse as <identity>_<index>")
        records.append(DatasetRecord(identity=identity, view=view, stripes=stripes, image_id=image_id))
    return Dataset(records=records)


def write_split_manifest(path: str | Path, train: Dataset, test: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["identity", "partition"])
        for ident in train.identities():
            writer.writerow([ident, "train"])
        for ident in test.identities():
            writer.writerow([ident, "test"])
