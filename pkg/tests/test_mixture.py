import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mixdcnn.gradcheck import has_tie, mixture_loss, numeric_gradient, relative_error
from mixdcnn.mixture import (
    ExpertBank,
    assign_subset_labels,
    ensemble_combine,
    expert_confidence,
    format_trace,
    gated_combine,
    mix_logits,
    mixture_backward,
    mixture_forward,
    occupation_weights,
    parse_trace_line,
    trace_from_logits,
)
from mixdcnn.numerics import Network, cross_entropy, softmax

E = math.e


def random_bank(rng, K, N, d=4, hidden=5):
    return ExpertBank([Network.mlp((d, hidden, N), rng) for _ in range(K)])


def random_logits(rng, K, N, margin):
    while True:
        z = rng.normal(scale=2.0, size=(K, N))
        if not has_tie(z, margin):
            return z


# confidence / occupation ---------------------------------------------------------


def test_confidence_examples():
    assert expert_confidence([0.2, 0.9, -1.0]) == (0.9, 1)
    assert expert_confidence([3.0, 3.0, 1.0]) == (3.0, 0)
    assert expert_confidence([-5.0]) == (-5.0, 0)
    with pytest.raises(ValueError):
        expert_confidence([])


def test_occupation_examples():
    np.testing.assert_allclose(occupation_weights([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(occupation_weights([1.0, 0.0]), [E / (1 + E), 1 / (1 + E)], atol=1e-15)
    np.testing.assert_allclose(occupation_weights([1.0, 0.0]), [0.7310586, 0.2689414], atol=5e-8)
    with pytest.raises(ValueError):
        occupation_weights([])
    with pytest.raises(ValueError):
        occupation_weights([0.0, np.inf])


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=6), st.floats(-100, 100))
def test_occupation_properties(conf, c):
    a = occupation_weights(conf)
    assert np.all(a >= 0) and abs(a.sum() - 1) <= 1e-9
    np.testing.assert_allclose(occupation_weights(np.array(conf) + c), a, atol=1e-12)
    np.testing.assert_allclose(occupation_weights([c] * len(conf)), np.full(len(conf), 1 / len(conf)), atol=1e-15)


# mixing --------------------------------------------------------------------------


def test_mix_examples():
    np.testing.assert_allclose(mix_logits([[1.0, 0.0], [0.0, 1.0]], [0.5, 0.5]), [0.5, 0.5])
    z = np.array([[1.5, -2.0, 0.25]])
    assert mix_logits(z, [1.0]).tobytes() == z[0].tobytes()
    alpha = occupation_weights([1.0, 0.0])
    # e/(1+e) and -e/(1+e) + 2/(1+e), evaluated exactly
    expected = [E / (1 + E), (2 - E) / (1 + E)]
    np.testing.assert_allclose(mix_logits([[1.0, -1.0], [0.0, 2.0]], alpha), expected, atol=1e-15)
    np.testing.assert_allclose(expected, [0.7310586, -0.1931757], atol=1e-7)


def test_mix_shape_mismatch():
    with pytest.raises(ValueError):
        mix_logits(np.zeros((2, 3)), [0.5, 0.25, 0.25])
    with pytest.raises(ValueError):
        gated_combine(np.zeros((2, 3)), [1.0])


def test_mix_uniform_is_mean(rng):
    z = rng.standard_normal((4, 6))
    np.testing.assert_allclose(mix_logits(z, np.full(4, 0.25)), z.mean(axis=0), atol=1e-12)


# gated / ensemble ------------------------------------------------------------------


def test_gated_examples(rng):
    rows = softmax(rng.standard_normal((3, 4)))
    np.testing.assert_array_equal(gated_combine(rows, [0.0, 1.0, 0.0]), rows[1])
    same = np.tile(rows[0], (3, 1))
    np.testing.assert_allclose(gated_combine(same, [0.2, 0.3, 0.5]), rows[0], atol=1e-15)
    np.testing.assert_allclose(gated_combine([[0.9, 0.1], [0.2, 0.8]], [0.5, 0.5]), [0.55, 0.45], atol=1e-15)


def test_ensemble_examples(rng):
    np.testing.assert_allclose(ensemble_combine([[1.0, 0.0], [0.0, 1.0]]), [0.5, 0.5])
    p = softmax(rng.standard_normal((1, 5)))
    np.testing.assert_array_equal(ensemble_combine(p), p[0])
    rows = softmax(rng.standard_normal((3, 5)))
    assert ensemble_combine(rows).tobytes() == gated_combine(rows, np.full(3, 1 / 3)).tobytes()


@settings(max_examples=50)
@given(st.integers(1, 5), st.integers(1, 7), st.integers(0, 2**32 - 1))
def test_gated_output_is_distribution(K, N, seed):
    r = np.random.default_rng(seed)
    out = gated_combine(softmax(r.standard_normal((K, N))), softmax(r.standard_normal(K)))
    assert np.all(out >= 0) and abs(out.sum() - 1) <= 1e-12


# forward trace ----------------------------------------------------------------------


def test_trace_matches_straight_line_oracle():
    rng = np.random.default_rng(7)
    bank = random_bank(rng, K=2, N=3)
    x = rng.standard_normal(4)
    trace = mixture_forward(bank, x)
    z = [list(e(x[None])[0]) for e in bank]
    ref = oracles.mixture_forward(z)
    np.testing.assert_allclose(trace.per_expert_logits, z, atol=1e-10)
    np.testing.assert_allclose(trace.confidences, ref["confidences"], atol=1e-10)
    np.testing.assert_array_equal(trace.argmax_index, ref["argmax"])
    np.testing.assert_allclose(trace.occupation, ref["alpha"], atol=1e-10)
    np.testing.assert_allclose(trace.mixed_logits, ref["mixed"], atol=1e-10)
    np.testing.assert_allclose(trace.class_probs, ref["probs"], atol=1e-10)


def test_trace_invariants(rng):
    bank = random_bank(rng, K=3, N=4)
    trace = mixture_forward(bank, rng.standard_normal((10, 4)))
    assert np.all(trace.occupation > 0) and np.all(trace.occupation <= 1)
    np.testing.assert_allclose(trace.occupation.sum(-1), 1, atol=1e-9)
    np.testing.assert_array_equal(trace.confidences, trace.per_expert_logits.max(-1))
    ref = np.einsum("bk,bkn->bn", trace.occupation, trace.per_expert_logits)
    np.testing.assert_allclose(trace.mixed_logits, ref, atol=1e-12)
    np.testing.assert_array_equal(trace.class_probs, softmax(trace.mixed_logits))


def test_identical_experts_give_uniform_alpha(rng):
    net = Network.mlp((4, 5, 3), rng)
    bank = ExpertBank([net.copy() for _ in range(3)])
    x = rng.standard_normal(4)
    trace = mixture_forward(bank, x)
    assert np.all(trace.occupation == 1 / 3)
    np.testing.assert_allclose(trace.mixed_logits, net(x[None])[0], atol=1e-15)


def test_forced_one_hot_alpha(rng):
    bank = random_bank(rng, K=3, N=4)
    x = rng.standard_normal(4)
    trace = mixture_forward(bank, x, forced_alpha=[0.0, 1.0, 0.0])
    np.testing.assert_allclose(trace.class_probs, softmax(bank[1](x[None])[0]), atol=1e-12)


def test_single_expert_is_plain_network(rng):
    net = Network.mlp((4, 5, 3), rng)
    x = rng.standard_normal((6, 4))
    trace = mixture_forward(ExpertBank([net]), x)
    assert trace.class_probs.tobytes() == softmax(net(x)).tobytes()


def test_permutation_equivariance(rng):
    bank = random_bank(rng, K=4, N=3)
    x = rng.standard_normal((5, 4))
    perm = [2, 0, 3, 1]
    a = mixture_forward(bank, x)
    b = mixture_forward(ExpertBank([bank[k] for k in perm]), x)
    np.testing.assert_allclose(b.occupation, a.occupation[:, perm], rtol=0, atol=1e-15)
    # sum the permuted bank's terms back in the original expert order
    inv = np.argsort(perm)
    resorted = mix_logits(b.per_expert_logits[:, inv], b.occupation[:, inv])
    np.testing.assert_allclose(resorted, a.mixed_logits, rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.mixed_logits, a.mixed_logits, atol=1e-12)
    np.testing.assert_allclose(b.class_probs, a.class_probs, atol=1e-12)


def test_global_shift_invariance(rng):
    z = rng.standard_normal((3, 5))
    a = trace_from_logits(z)
    b = trace_from_logits(z + 7.5)
    np.testing.assert_allclose(b.occupation, a.occupation, atol=1e-12)
    np.testing.assert_allclose(b.class_probs, a.class_probs, atol=1e-12)


def test_per_expert_shift_increases_weight(rng):
    z = rng.standard_normal((3, 5))
    for k in range(3):
        shifted = z.copy()
        shifted[k] += 0.3
        assert trace_from_logits(shifted).occupation[k] > trace_from_logits(z).occupation[k]


# backward ---------------------------------------------------------------------------


def test_backward_single_expert_is_cross_entropy(rng):
    z = rng.standard_normal((1, 4))
    dz = mixture_backward(trace_from_logits(z), 2)
    _, g = cross_entropy(z[0], 2)
    np.testing.assert_array_equal(dz[0], g)


def test_backward_label_range(rng):
    trace = trace_from_logits(rng.standard_normal((2, 3)))
    with pytest.raises(ValueError):
        mixture_backward(trace, 3)
    with pytest.raises(ValueError):
        mixture_backward(trace, 0, mode="frozen")


@pytest.mark.parametrize("mode", ["full", "stopped"])
def test_backward_matches_oracle_finite_differences(mode):
    rng = np.random.default_rng(11)
    z = random_logits(rng, 3, 4, margin=0.1)
    label = 1
    trace = trace_from_logits(z)
    analytic = mixture_backward(trace, label, mode)
    if mode == "full":
        numeric = np.array(oracles.central_difference(lambda v: oracles.mixture_loss(v, label), z.tolist(), 1e-5))
    else:
        alpha = list(trace.occupation)
        numeric = np.array(oracles.central_difference(
            lambda v: -math.log(oracles.softmax(oracles.mix(v, alpha))[label]), z.tolist(), 1e-5))
    assert relative_error(analytic, numeric) <= 1e-5


def test_backward_identical_experts_finite_differences(rng):
    row = rng.standard_normal(4)
    row[np.argmax(row)] += 0.5  # unique argmax
    z = np.tile(row, (3, 1))
    trace = trace_from_logits(z)
    assert np.all(trace.occupation == 1 / 3)
    dz = mixture_backward(trace, 0)
    g = trace.class_probs - np.eye(4)[0]
    # the alpha path contributes nothing when every expert is the same
    np.testing.assert_allclose(dz.sum(0), g, atol=1e-12)
    # a perturbation of one expert breaks the symmetry; compare one-sided paths by central differences
    numeric = numeric_gradient(lambda v: mixture_loss(v, 0), z)
    assert relative_error(dz, numeric) <= 1e-5


def test_stopped_mode_drops_alpha_path(rng):
    z = random_logits(rng, 3, 4, margin=0.1)
    trace = trace_from_logits(z)
    full = mixture_backward(trace, 0, "full")
    stopped = mixture_backward(trace, 0, "stopped")
    np.testing.assert_allclose(stopped, trace.occupation[:, None] * (trace.class_probs - np.eye(4)[0]), atol=1e-15)
    diff = full - stopped
    # the extra term only touches each expert's argmax entry
    mask = np.zeros_like(diff, dtype=bool)
    mask[np.arange(3), trace.argmax_index] = True
    assert np.all(diff[~mask] == 0)


def test_batched_backward_equals_per_sample(rng):
    z = rng.standard_normal((5, 3, 4))
    labels = rng.integers(0, 4, size=5)
    batched = mixture_backward(trace_from_logits(z), labels)
    for b in range(5):
        np.testing.assert_allclose(batched[b], mixture_backward(trace_from_logits(z[b]), labels[b]), atol=1e-15)


def test_every_expert_gets_gradient(rng):
    z = random_logits(rng, 4, 3, 1e-3)
    dz = mixture_backward(trace_from_logits(z), 0)
    assert np.all(np.abs(dz).sum(axis=1) > 0)


def test_end_to_end_parameter_gradient(rng):
    """Mixture gradient chained through the expert networks matches finite differences."""
    bank = random_bank(rng, K=2, N=3)
    x = rng.standard_normal((3, 4))
    y = np.array([0, 2, 1])

    def loss():
        t = trace_from_logits(bank.logits(x))
        return float(cross_entropy(t.mixed_logits, y)[0].sum())

    outs = [e.forward(x) for e in bank]
    trace = trace_from_logits(np.stack([o[0] for o in outs], axis=1))
    dz = mixture_backward(trace, y)
    for k, (e, (_, caches)) in enumerate(zip(bank, outs)):
        e.zero_grad()
        e.backward(caches, dz[:, k])
    for p in bank.parameters():
        num = np.zeros_like(p.value)
        for i in np.ndindex(p.value.shape):
            old = p.value[i]
            p.value[i] = old + 1e-6
            fp = loss()
            p.value[i] = old - 1e-6
            fm = loss()
            p.value[i] = old
            num[i] = (fp - fm) / 2e-6
        assert relative_error(p.grad, num) <= 1e-5, p.name


# subset labels ----------------------------------------------------------------------


class _Fixed:
    """Expert stand-in returning fixed logits."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=float)
        self.output_dim = self.logits.shape[-1]
        self.input_shape = (1,)

    def __call__(self, x):
        return np.tile(self.logits, (len(x), 1))


def test_subset_label_examples(rng):
    bank = ExpertBank([_Fixed([0.1, 0.5]), _Fixed([0.9, 0.0])])
    assert assign_subset_labels(bank, np.zeros((1, 1))).tolist() == [1]
    net = Network.mlp((4, 5, 3), rng)
    same = ExpertBank([net.copy() for _ in range(3)])
    assert assign_subset_labels(same, rng.standard_normal((20, 4))).tolist() == [0] * 20


def test_subset_labels_match_loop_oracle():
    rng = np.random.default_rng(3)
    bank = random_bank(rng, K=3, N=4)
    x = rng.standard_normal((50, 4))
    got = assign_subset_labels(bank, x)
    for t in range(50):
        z = [list(e(x[t : t + 1])[0]) for e in bank]
        assert got[t] == oracles.subset_label(z)


# diagnostic format ------------------------------------------------------------------


def test_trace_text_round_trip(rng):
    trace = mixture_forward(random_bank(rng, 3, 4), rng.standard_normal((4, 4)))
    lines = format_trace(trace, sample_ids=[10, 11, 12, 13])
    assert len(lines) == 4
    rec = parse_trace_line(lines[2])
    assert rec["id"] == 12
    np.testing.assert_array_equal(rec["C"], trace.confidences[2])
    np.testing.assert_array_equal(rec["alpha"], trace.occupation[2])
    np.testing.assert_array_equal(rec["mixed"], trace.mixed_logits[2])
    assert rec["pred"] == trace.prediction[2]
