"""
Split a training set into K disjoint subsets of similar samples.

Pipeline: hidden-layer features of a trained base network -> Fisher LDA
(supervised by the class labels) -> k-means with k-means++ seeding. Subset
indices are 0-based in memory and 1-based in the partition text file.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .data import Dataset
from .numerics import Network


def default_tap_layer(network: Network) -> int:
    """Output of the layer just before the classifier (last linear layer)."""
    return len(network.layers) - 2


def extract_features(network: Network, features, tap_layer: int | None = None) -> np.ndarray:
    if tap_layer is None:
        tap_layer = default_tap_layer(network)
    if not 0 <= tap_layer < len(network.layers) - 1:
        raise ValueError(f"tap layer {tap_layer} is not a hidden layer index in [0, {len(network.layers) - 1})")
    out, _ = network.forward(features, upto=tap_layer)
    return out.reshape(out.shape[0], -1)


# -----------------------------------------------------------------------------
# LDA
# -----------------------------------------------------------------------------


@dataclass
class LdaModel:
    projection: np.ndarray  # (input_dim, out_dim)
    class_means: np.ndarray  # (num_classes, input_dim)
    mean: np.ndarray  # (input_dim,)
    eigenvalues: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.projection.shape[1]

    def project(self, features) -> np.ndarray:
        return (np.asarray(features, dtype=float) - self.mean) @ self.projection


def scatter_matrices(x: np.ndarray, y: np.ndarray):
    classes = np.unique(y)
    mean = x.mean(axis=0)
    d = x.shape[1]
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    means = []
    for c in classes:
        xc = x[y == c]
        mc = xc.mean(axis=0)
        means.append(mc)
        centered = xc - mc
        sw += centered.T @ centered
        diff = (mc - mean)[:, None]
        sb += len(xc) * (diff @ diff.T)
    return sw, sb, np.array(means), mean


def lda_fit(features, labels, requested_dim: int) -> LdaModel:
    """Fisher LDA with within-class scatter regularised by 1e-6 * trace(Sw) / dim."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels)
    if requested_dim < 1:
        raise ValueError("requested LDA dimension must be >= 1")
    n_classes = len(np.unique(y))
    if n_classes < 2:
        raise ValueError("LDA needs at least two classes")
    d = x.shape[1]
    out_dim = min(requested_dim, n_classes - 1, d)
    sw, sb, means, mean = scatter_matrices(x, y)
    eps = 1e-6 * np.trace(sw) / d
    if eps <= 0:
        # every sample sits on its class mean
        eps = 1e-6
    evals, evecs = scipy.linalg.eigh(sb, sw + eps * np.eye(d))
    order = np.argsort(evals)[::-1][:out_dim]
    w = evecs[:, order]
    # fix the sign of each direction so repeated fits agree
    pivot = np.abs(w).argmax(axis=0)
    w = w * np.sign(w[pivot, np.arange(out_dim)])
    return LdaModel(w, means, mean, evals[order])


def lda_project(model: LdaModel, features) -> np.ndarray:
    return model.project(features)


# -----------------------------------------------------------------------------
# k-means
# -----------------------------------------------------------------------------


@dataclass
class DatasetPartition:
    K: int
    assignment: np.ndarray  # (T,) 0-based subset index
    centroids: np.ndarray  # (K, dim)
    seed: int = 0
    sample_ids: np.ndarray | None = None
    objective_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.assignment))
        if self.assignment.min() < 0 or self.assignment.max() >= self.K:
            raise ValueError(f"subset indices must lie in [0, {self.K})")

    @property
    def T(self) -> int:
        return len(self.assignment)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.K)

    def members(self, k: int) -> np.ndarray:
        return np.nonzero(self.assignment == k)[0]

    def verify(self, num_samples: int) -> None:
        if self.T != num_samples:
            raise ValueError(f"partition covers {self.T} samples, dataset has {num_samples}")
        if np.any(self.sizes() == 0):
            raise ValueError(f"empty subsets: {np.nonzero(self.sizes() == 0)[0] + 1}")


def kmeans_objective(x, assignment, centroids) -> float:
    return float(((x - centroids[assignment]) ** 2).sum())


def _sq_dists(x, centroids):
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)


def kmeans_pp_init(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    T = len(x)
    chosen = [int(rng.integers(T))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(T, p=d2 / total))
        else:
            # all remaining points coincide with a centre
            rest = np.setdiff1d(np.arange(T), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(1))
    return x[chosen].copy()


def kmeans(features, K: int, seed: int = 0, max_iters: int = 100, debug: bool = False) -> DatasetPartition:
    """Lloyd iterations from k-means++ seeds; ties go to the lowest centroid index.

    An emptied cluster keeps its previous centroid. ``objective_history`` holds
    the objective after every assignment step and every centroid update.
    """
    x = np.asarray(features, dtype=float)
    T = len(x)
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > T:
        raise ValueError(f"K={K} exceeds the number of samples T={T}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(x, K, rng)
    assignment = _sq_dists(x, centroids).argmin(axis=1)
    history = [kmeans_objective(x, assignment, centroids)]

    def record():
        history.append(kmeans_objective(x, assignment, centroids))
        if debug:
            assert history[-1] <= history[-2], f"k-means objective increased: {history[-2]} -> {history[-1]}"

    for _ in range(max_iters):
        for k in range(K):
            members = x[assignment == k]
            if len(members):
                centroids[k] = members.mean(axis=0)
        record()
        new = _sq_dists(x, centroids).argmin(axis=1)
        if np.array_equal(new, assignment):
            break
        assignment = new
        record()
    return DatasetPartition(K, assignment, centroids, seed, objective_history=history)


def repair_empty(x: np.ndarray, part: DatasetPartition) -> DatasetPartition:
    """Refill each empty subset by splitting the largest one at its two most distant members."""
    assignment = part.assignment.copy()
    centroids = part.centroids.copy()
    while True:
        sizes = np.bincount(assignment, minlength=part.K)
        empty = np.nonzero(sizes == 0)[0]
        if not len(empty):
            break
        big = int(sizes.argmax())
        members = np.nonzero(assignment == big)[0]
        pts = x[members]
        d = _sq_dists(pts, pts)
        i, j = np.unravel_index(d.argmax(), d.shape)
        to_j = ((pts - pts[j]) ** 2).sum(1) < ((pts - pts[i]) ** 2).sum(1)
        if not to_j.any():
            # identical points: move one member so the subset is non-empty
            to_j[-1] = True
        assignment[members[to_j]] = empty[0]
        centroids[big] = x[assignment == big].mean(axis=0)
        centroids[empty[0]] = x[assignment == empty[0]].mean(axis=0)
    return DatasetPartition(part.K, assignment, centroids, part.seed, part.sample_ids, part.objective_history)


def partition_dataset(base_network: Network, dataset: Dataset, K: int, D: int | None = None, seed: int = 0,
                      tap_layer: int | None = None, max_iters: int = 100) -> DatasetPartition:
    """features -> LDA(D) -> k-means(K), with empty-subset repair."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if K == 1:
        T = len(dataset)
        return DatasetPartition(1, np.zeros(T, dtype=np.int64), np.zeros((1, 1)), seed, dataset.ids)
    feats = extract_features(base_network, dataset.features, tap_layer)
    if D is None:
        D = min(32, dataset.num_classes - 1)
    lda = lda_fit(feats, dataset.labels, D)
    z = lda.project(feats)
    part = kmeans(z, K, seed=seed, max_iters=max_iters)
    part.sample_ids = dataset.ids
    return repair_empty(z, part)


def best_match_agreement(assignment, truth) -> float:
    """Agreement after the best one-to-one relabelling of cluster ids."""
    from scipy.optimize import linear_sum_assignment

    a = np.asarray(assignment)
    t = np.asarray(truth)
    ka, kt = a.max() + 1, t.max() + 1
    counts = np.zeros((ka, kt), dtype=np.int64)
    np.add.at(counts, (a, t), 1)
    rows, cols = linear_sum_assignment(-counts)
    return float(counts[rows, cols].sum() / len(a))


# -----------------------------------------------------------------------------
# Text format: "K=<k> T=<t> seed=<s>" then "sample_id<TAB>subset_index" (1-based)
# -----------------------------------------------------------------------------


def format_partition(part: DatasetPartition) -> str:
    lines = [f"K={part.K} T={part.T} seed={part.seed}"]
    lines += [f"{sid}\t{k + 1}" for sid, k in zip(part.sample_ids, part.assignment)]
    return "\n".join(lines) + "\n"


def save_partition(path, part: DatasetPartition) -> None:
    with open(path, "w") as f:
        f.write(format_partition(part))


def parse_partition(text: str) -> DatasetPartition:
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty partition file")
    try:
        head = dict(field.split("=", 1) for field in lines[0].split())
        K, T, seed = int(head["K"]), int(head["T"]), int(head["seed"])
    except (KeyError, ValueError) as err:
        raise ValueError(f"line 1: bad partition header {lines[0]!r}") from err
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != T:
        raise ValueError(f"header says T={T} but file has {len(body)} sample lines")
    ids = np.empty(T, dtype=np.int64)
    assignment = np.empty(T, dtype=np.int64)
    for i, ln in enumerate(body):
        try:
            sid, k = ln.split("\t")
            ids[i], assignment[i] = int(sid), int(k) - 1
        except ValueError as err:
            raise ValueError(f"line {i + 2}: expected 'sample_id<TAB>subset_index', got {ln!r}") from err
        if not 0 <= assignment[i] < K:
            raise ValueError(f"line {i + 2}: subset index {assignment[i] + 1} outside 1..{K}")
    return DatasetPartition(K, assignment, np.zeros((K, 0)), seed, ids)


def load_partition(path) -> DatasetPartition:
    with open(path) as f:
        return parse_partition(f.read())
