import numpy as np
import pytest

from mixdcnn.data import Dataset, SynthSpec, generate_synthetic
from mixdcnn.numerics import Network
from mixdcnn.partition import (
    DatasetPartition,
    best_match_agreement,
    extract_features,
    format_partition,
    kmeans,
    kmeans_objective,
    lda_fit,
    lda_project,
    load_partition,
    parse_partition,
    partition_dataset,
    repair_empty,
    save_partition,
)
from mixdcnn.trainer import TrainSpec, pretrain_base

# features ---------------------------------------------------------------------------


def test_identity_tap(rng):
    net = Network.mlp((4, 6, 6, 3), rng)
    hidden = net.layers[2]
    hidden.weight.value[...] = np.eye(6)
    hidden.bias.value[...] = 0.0
    x = rng.standard_normal((5, 4))
    before = extract_features(net, x, tap_layer=1)
    after = extract_features(net, x, tap_layer=2)
    np.testing.assert_array_equal(after, before)


def test_features_deterministic_and_per_sample(rng):
    net = Network.mlp((4, 8, 6, 3), rng)
    x = rng.standard_normal((10, 4))
    a = extract_features(net, x)
    assert a.tobytes() == extract_features(net, x).tobytes()
    for t in range(10):
        h = x[t]
        for layer in net.layers[:4]:
            h = layer.forward(h[None])[0][0]
        np.testing.assert_allclose(a[t], h, atol=1e-14)


def test_invalid_tap(rng):
    net = Network.mlp((4, 6, 3), rng)
    with pytest.raises(ValueError):
        extract_features(net, np.zeros((1, 4)), tap_layer=2)
    with pytest.raises(ValueError):
        extract_features(net, np.zeros((1, 4)), tap_layer=-1)


# LDA --------------------------------------------------------------------------------


def test_lda_two_classes_matches_fisher_direction(rng):
    sigma = 1.0
    x0 = rng.normal(0.0, sigma, (200, 2))
    x1 = rng.normal(0.0, sigma, (200, 2)) + np.array([10.0 * sigma, 0.0])
    x = np.vstack([x0, x1])
    y = np.repeat([0, 1], 200)
    model = lda_fit(x, y, 1)
    assert model.out_dim == 1
    z = lda_project(model, x)[:, 0]
    gap = abs(z[y == 1].mean() - z[y == 0].mean())
    pooled = np.sqrt((z[y == 0].var(ddof=1) + z[y == 1].var(ddof=1)) / 2)
    assert gap > 5 * pooled
    # oracle: Sw^-1 (mu1 - mu0)
    sw = sum((xc - xc.mean(0)).T @ (xc - xc.mean(0)) for xc in (x0, x1))
    w = np.linalg.solve(sw, x1.mean(0) - x0.mean(0))
    cos = abs(w @ model.projection[:, 0]) / (np.linalg.norm(w) * np.linalg.norm(model.projection[:, 0]))
    assert cos > 1 - 1e-4
    # projected class means keep their order along the discriminant
    means = lda_project(model, model.class_means)[:, 0]
    assert np.sign(means[1] - means[0]) == np.sign(z[y == 1].mean() - z[y == 0].mean())


@pytest.mark.parametrize("classes,requested,dim,expected", [(5, 128, 10, 4), (5, 2, 10, 2), (2, 7, 3, 1), (9, 32, 3, 3)])
def test_lda_out_dim(rng, classes, requested, dim, expected):
    x = rng.standard_normal((classes * 6, dim))
    y = np.repeat(np.arange(classes), 6)
    assert lda_fit(x, y, requested).out_dim == expected


def test_lda_errors_and_degenerate_scatter(rng):
    with pytest.raises(ValueError):
        lda_fit(rng.standard_normal((5, 3)), np.zeros(5), 2)
    # one sample per class: Sw == 0, regularisation must still give a projection
    model = lda_fit(np.eye(3), [0, 1, 2], 2)
    assert np.all(np.isfinite(model.projection))
    # duplicated columns make Sw singular
    x = rng.standard_normal((30, 2))
    x = np.hstack([x, x[:, :1]])
    assert np.all(np.isfinite(lda_fit(x, np.repeat([0, 1, 2], 10), 2).projection))


# k-means ----------------------------------------------------------------------------


def test_kmeans_two_pairs():
    x = np.array([[0.0, 0.0], [0.1, 0.0], [50.0, 50.0], [50.0, 50.1]])
    part = kmeans(x, 2, seed=0)
    assert part.assignment[0] == part.assignment[1] != part.assignment[2] == part.assignment[3]


def test_kmeans_k_equals_t(rng):
    x = rng.standard_normal((6, 2))
    part = kmeans(x, 6, seed=1)
    assert sorted(part.assignment.tolist()) == list(range(6))
    assert kmeans_objective(x, part.assignment, part.centroids) == 0.0


def test_kmeans_deterministic_and_errors(rng):
    x = rng.standard_normal((40, 3))
    a, b = kmeans(x, 3, seed=5), kmeans(x, 3, seed=5)
    np.testing.assert_array_equal(a.assignment, b.assignment)
    with pytest.raises(ValueError):
        kmeans(x[:2], 3)


def test_kmeans_objective_monotone(rng):
    for _ in range(20):
        x = rng.standard_normal((int(rng.integers(10, 60)), 2)) * rng.uniform(0.1, 5)
        part = kmeans(x, int(rng.integers(1, 6)), seed=int(rng.integers(1000)), debug=True)
        assert all(b <= a for a, b in zip(part.objective_history, part.objective_history[1:]))


def test_repair_empty_cluster():
    x = np.array([[0.0], [1.0], [2.0], [10.0]])
    part = DatasetPartition(3, np.array([0, 0, 0, 1]), np.array([[1.0], [10.0], [99.0]]))
    fixed = repair_empty(x, part)
    assert np.all(fixed.sizes() > 0)
    assert fixed.sizes().sum() == 4
    # the two farthest members of the big cluster (0 and 2) end up in different subsets
    assert fixed.assignment[0] != fixed.assignment[2]


def test_repair_identical_points():
    x = np.zeros((3, 1))
    part = DatasetPartition(2, np.zeros(3, dtype=int), np.zeros((2, 1)))
    assert np.all(repair_empty(x, part).sizes() > 0)


# pipeline ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def benchmark():
    train, _ = generate_synthetic(SynthSpec(seed=0))
    base, _ = pretrain_base(train, TrainSpec(seed=0))
    return train, base


def test_partition_k1(benchmark):
    train, base = benchmark
    part = partition_dataset(base, train, K=1)
    assert part.sizes().tolist() == [len(train)]


def test_partition_recovers_coarse_groups(benchmark):
    train, base = benchmark
    part = partition_dataset(base, train, K=2, seed=0)
    assert best_match_agreement(part.assignment, train.coarse) >= 0.9
    assert part.sizes().sum() == len(train) and np.all(part.sizes() > 0)


def test_partition_deterministic(benchmark):
    train, base = benchmark
    a = partition_dataset(base, train, K=3, seed=4)
    b = partition_dataset(base, train, K=3, seed=4)
    np.testing.assert_array_equal(a.assignment, b.assignment)


def test_best_match_agreement():
    assert best_match_agreement([1, 1, 0, 0], [0, 0, 1, 1]) == 1.0
    assert best_match_agreement([0, 1, 0, 1], [0, 0, 1, 1]) == 0.5


# text format ------------------------------------------------------------------------


def test_partition_file_round_trip(tmp_path):
    part = DatasetPartition(3, np.array([0, 2, 1, 2]), np.zeros((3, 1)), seed=9, sample_ids=np.array([5, 6, 7, 8]))
    text = format_partition(part)
    assert text.splitlines()[0] == "K=3 T=4 seed=9"
    assert text.splitlines()[1] == "5\t1"
    save_partition(tmp_path / "p.txt", part)
    back = load_partition(tmp_path / "p.txt")
    np.testing.assert_array_equal(back.assignment, part.assignment)
    np.testing.assert_array_equal(back.sample_ids, part.sample_ids)
    assert (back.K, back.seed) == (3, 9)


@pytest.mark.parametrize("text,match", [
    ("", "empty"),
    ("K=2 T=x seed=0\n", "line 1"),
    ("K=2 T=2 seed=0\n0\t1\n", "T=2"),
    ("K=2 T=1 seed=0\n0\t3\n", "line 2"),
    ("K=2 T=1 seed=0\n0 1\n", "line 2"),
])
def test_partition_file_errors(text, match):
    with pytest.raises(ValueError, match=match):
        parse_partition(text)


def test_verify_detects_empty_subset():
    part = DatasetPartition(3, np.array([0, 0, 2]), np.zeros((3, 1)))
    with pytest.raises(ValueError, match="empty"):
        part.verify(3)
    with pytest.raises(ValueError, match="covers"):
        DatasetPartition(1, np.zeros(2, dtype=int), np.zeros((1, 1))).verify(3)


def test_dataset_ids_in_partition(benchmark):
    train, base = benchmark
    shifted = Dataset(train.features, train.labels, train.num_classes, train.coarse, "train", 1000)
    part = partition_dataset(base, shifted, K=2)
    assert part.sample_ids[0] == 1000
