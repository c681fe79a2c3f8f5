"""RBF chi-squared exemplar kernel space.

Stripe descriptors are compared with the chi-squared histogram distance and
mapped to similarity vectors against a fixed set of anchor descriptors
(exemplars, normally all training stripes). The mapped vector of a stripe is
the layer-1 input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rngs

EXEMPLAR_MAGIC = b"MRX1"
MAX_BANDWIDTH_PAIRS = 100_000


class DegenerateBandwidthError(ValueError):
    pass


@dataclass(frozen=True)
class ExemplarSet:
    exemplars: np.ndarray  # (n, dim) nonnegative
    bandwidth: float

    def __post_init__(self) -> None:
        if self.exemplars.ndim != 2 or self.exemplars.shape[0] == 0:
            raise ValueError("exemplar set must be a nonempty 2-d array")
        if np.any(self.exemplars < 0):
            raise ValueError("exemplars must be nonnegative")
        if not (self.bandwidth > 0):
            raise ValueError("bandwidth must be positive")

    def __len__(self) -> int:
        return self.exemplars.shape[0]


def chi2_distance(x: np.ndarray, y: np.ndarray) -> float:
    """sum_d (x_d - y_d)^2 / (x_d + y_d), with 0/0 terms defined as 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if np.any(x < 0) or np.any(y < 0):
        raise ValueError("chi-squared distance requires nonnegative entries")
    den = x + y
    num = (x - y) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        terms = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(terms.sum())


def chi2_cross(x: np.ndarray, y: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Pairwise chi-squared distances between row sets, shape (len(x), len(y)).

    Small problems broadcast in one shot; large ones accumulate one feature
    dimension at a time, which keeps the working set at a few (n, m) buffers
    instead of an (n, m, D) cube.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError("expect 2-d arrays with matching feature dimension")
    if np.any(x < 0) or np.any(y < 0):
        raise ValueError("chi-squared distance requires nonnegative entries")
    n, m = x.shape[0], y.shape[0]
    if n * m <= chunk * chunk:
        diff = x[:, None, :] - y[None, :, :]
        den = x[:, None, :] + y[None, :, :]
        np.square(diff, out=diff)
        den[den == 0.0] = 1.0  # numerator is zero exactly where den was
        np.divide(diff, den, out=diff)
        return diff.sum(axis=2)
    out = np.zeros((n, m))
    num = np.empty((n, m))
    den = np.empty((n, m))
    for d in range(x.shape[1]):
        u = x[:, d][:, None]
        v = y[:, d][None, :]
        np.subtract(u, v, out=num)
        np.square(num, out=num)
        np.add(u, v, out=den)
        den[den == 0.0] = 1.0
        np.divide(num, den, out=num)
        out += num
    return out


def _pair_indices(n: int, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """k distinct unordered index pairs (i < j) sampled uniformly."""
    total = n * (n - 1) // 2
    chosen = rng.choice(total, size=k, replace=False)
    # invert the triangular row offsets: pair t belongs to row i with
    # offset(i) <= t < offset(i+1), offset(i) = i*n - i*(i+1)/2
    i_arr = np.arange(n, dtype=np.int64)
    offsets = i_arr * n - i_arr * (i_arr + 1) // 2
    i = np.searchsorted(offsets, chosen, side="right") - 1
    j = chosen - offsets[i] + i + 1
    return i.astype(np.int64), j.astype(np.int64)


def estimate_bandwidth(descriptors: np.ndarray, seed: int = 0, max_pairs: int = MAX_BANDWIDTH_PAIRS) -> float:
    """Mean pairwise chi-squared distance over at most `max_pairs` pairs.

    All pairs are used when there are few enough; otherwise a fixed-seed
    uniform subset. Identical-everywhere inputs have no usable scale.
    """
    x = np.asarray(descriptors, dtype=float)
    if x.shape[0] < 2:
        raise DegenerateBandwidthError("need at least 2 descriptors to estimate a bandwidth")
    n = x.shape[0]
    total = n * (n - 1) // 2
    if total <= max_pairs:
        dists = chi2_cross(x, x)
        mean = float(dists[np.triu_indices(n, k=1)].mean())
    else:
        i, j = _pair_indices(n, max_pairs, rngs.stream(seed, "kernel.bandwidth"))
        diff = (x[i] - x[j]) ** 2
        den = x[i] + x[j]
        with np.errstate(invalid="ignore", divide="ignore"):
            terms = np.where(den > 0, diff / np.where(den > 0, den, 1.0), 0.0)
        mean = float(terms.sum(axis=1).mean())
    if mean <= 0.0:
        raise DegenerateBandwidthError("all sampled descriptor pairs are identical; bandwidth undefined")
    return mean


def kernel_map(x: np.ndarray, ex: ExemplarSet) -> np.ndarray:
    """Similarity vector exp(-chi2(x, e_j) / (2 * bandwidth)) over all exemplars."""
    d = chi2_cross(np.asarray(x, dtype=float)[None, :], ex.exemplars)[0]
    return np.exp(-d / (2.0 * ex.bandwidth))


def kernel_map_batch(x: np.ndarray, ex: ExemplarSet, chunk: int = 256) -> np.ndarray:
    """Kernel responses for a stack of descriptors, shape (len(x), len(ex))."""
    d = chi2_cross(np.asarray(x, dtype=float), ex.exemplars, chunk=chunk)
    return np.exp(-d / (2.0 * ex.bandwidth))


def save_exemplars(path: str | Path, ex: ExemplarSet) -> None:
    n, dim = ex.exemplars.shape
    with open(path, "wb") as fh:
        fh.write(EXEMPLAR_MAGIC)
        fh.write(struct.pack("<QQd", n, dim, ex.bandwidth))
        fh.write(np.ascontiguousarray(ex.exemplars, dtype="<f8").tobytes())


def load_exemplars(path: str | Path) -> ExemplarSet:
    data = Path(path).read_bytes()
    if data[:4] != EXEMPLAR_MAGIC:
        raise ValueError(f"{path}: bad exemplar file magic")
    n, dim, bandwidth = struct.unpack_from("<QQd", data, 4)
    payload = data[4 + 24 :]
    if len(payload) != 8 * n * dim:
        raise ValueError(f"{path}: exemplar payload size mismatch")
    arr = np.frombuffer(payload, dtype="<f8").reshape(n, dim).copy()
    return ExemplarSet(exemplars=arr, bandwidth=float(bandwidth))
