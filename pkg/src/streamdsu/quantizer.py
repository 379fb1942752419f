"""k-means codebooks and nearest-centroid unit assignment."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import FeatureMatrix


@dataclass
class Codebook:
    centroids: np.ndarray  # (V, F)
    trained_on: str = ""

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ValueError("codebook must be a non-empty (V, F) matrix")
        if self.vocab_size > 1:
            gaps = sq_distances(self.centroids, self.centroids)
            np.fill_diagonal(gaps, np.inf)
            if gaps.min() <= 1e-18:
                raise ValueError("codebook has duplicate centroids")

    def require_vocab(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("a unit vocabulary needs at least two centroids")

    @property
    def vocab_size(self) -> int:
        return self.centroids.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centroids.shape[1]

    def save(self, directory: str | Path) -> None:
        save_checkpoint(directory, {"kind": "codebook", "vocab_size": self.vocab_size,
                                    "feature_dim": self.feature_dim, "trained_on": self.trained_on},
                        {"centroids": self.centroids})

    @classmethod
    def load(cls, directory: str | Path) -> "Codebook":
        manifest, tensors = load_checkpoint(directory)
        return cls(tensors["centroids"], manifest.get("trained_on", ""))


@dataclass
class DsuSequence:
    units: np.ndarray  # int64 ids
    frame_rate_hz: float = 0.0

    def __post_init__(self):
        self.units = np.asarray(self.units, dtype=np.int64).reshape(-1)

    def __len__(self):
        return self.units.size


def sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances (N, V), accumulated in float64."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the closest centroid per row, ties to the lowest index.

    Scored as 2 c·x − ‖c‖² in float64 (‖x‖² is common to every centroid), the
    same arithmetic as the linear head from :func:`codebook_to_linear`, so the
    two agree bit for bit.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    return np.argmax(x @ (2.0 * c).T - np.sum(c * c, axis=1), axis=1)


def distortion(x: np.ndarray, centroids: np.ndarray) -> float:
    """Mean squared distance of each sample to its nearest centroid."""
    return float(np.mean(np.min(sq_distances(x, centroids), axis=1)))


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = sq_distances(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            raise ValueError("k-means++: fewer distinct samples than centroids")
        idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, sq_distances(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans_fit(samples: np.ndarray, vocab_size: int, iters: int = 50, seed: int = 0,
               trained_on: str = "", return_history: bool = False):
    """k-means++ seeding followed by up to ``iters`` Lloyd rounds.

    Empty clusters are re-seeded with the sample farthest from its current
    centroid. ``return_history`` also yields the distortion after seeding and
    after every round.

    V=1 is accepted (the single-mean case) but such a codebook cannot be
    used to assign units.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be (N, F)")
    n = x.shape[0]
    if vocab_size < 1 or n < vocab_size:
        raise ValueError(f"need at least {vocab_size} samples, got {n}")
    if np.all(x == x[0]):
        raise ValueError("all samples are identical")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, vocab_size, rng)
    history = [distortion(x, centroids)]
    labels = nearest(x, centroids)
    for _ in range(iters):
        new = centroids.copy()
        counts = np.bincount(labels, minlength=vocab_size)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        if not filled.all():
            d = sq_distances(x, new)[np.arange(n), labels]
            for v in np.flatnonzero(~filled):
                far = int(np.argmax(d))
                new[v] = x[far]
                d[far] = -1.0
        new_labels = nearest(x, new)
        centroids = new
        history.append(distortion(x, centroids))
        if np.array_equal(new_labels, labels) and filled.all():
            labels = new_labels
            break
        labels = new_labels
    book = Codebook(centroids, trained_on)
    return (book, history) if return_history else book


def assign(codebook: Codebook, features: FeatureMatrix | np.ndarray) -> DsuSequence:
    codebook.require_vocab()
    frames = features.frames if isinstance(features, FeatureMatrix) else np.asarray(features)
    rate = features.frame_rate_hz if isinstance(features, FeatureMatrix) else 0.0
    if frames.ndim != 2 or frames.shape[1] != codebook.feature_dim:
        raise ValueError(f"feature dim {frames.shape[-1]} != codebook dim {codebook.feature_dim}")
    return DsuSequence(nearest(frames, codebook.centroids), rate)


def codebook_to_linear(codebook: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Linear layer whose argmax equals nearest-centroid assignment.

    argmin_v ‖s − c_v‖² = argmax_v (2 c_v·s − ‖c_v‖²), so W = 2C and b_v = −‖c_v‖².
    """
    codebook.require_vocab()
    c = codebook.centroids
    return 2.0 * c, -np.sum(c * c, axis=1)


# -- text interchange: one utterance per line, space-separated ids -----------

def write_units(path: str | Path, sequences: list[DsuSequence | np.ndarray]) -> None:
    lines = []
    for seq in sequences:
        units = seq.units if isinstance(seq, DsuSequence) else np.asarray(seq)
        lines.append(" ".join(str(int(u)) for u in units))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_units(path: str | Path, frame_rate_hz: float = 0.0) -> list[DsuSequence]:
    out = []
    for line in Path(path).read_text().splitlines():
        out.append(DsuSequence(np.array([int(t) for t in line.split()], dtype=np.int64), frame_rate_hz))
    return out
