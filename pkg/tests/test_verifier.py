import numpy as np
import pytest

from arpoison.ar import ARCoefficients, ar_generate, crop_init_band
from arpoison.errors import ChannelOutOfRange, DimensionTooSmall
from arpoison.search import ARProcessSet
from arpoison.verifier import build_manual_cnn, forward, logits_batch, verify_separability


def _toy_set():
    a = ARCoefficients.from_block([[0.2, 0.1, 0.3], [-0.1, 0.25, 0.05], [0.1, 0.1, 0.0]])
    b = ARCoefficients.from_block([[-0.3, 0.4, 0.1], [0.2, 0.3, -0.2], [0.25, 0.25, 0.0]])
    return ARProcessSet([[a], [b]], 3)


def test_build_published(published):
    cnn = build_manual_cnn(published, channel=0)
    assert cnn.conv_filters.shape == (10, 3, 3)
    np.testing.assert_allclose(cnn.conv_filters.sum(axis=(1, 2)), [p.total - 1 for p in published.channel(0)])
    assert np.all(np.abs(cnn.conv_filters.sum(axis=(1, 2))) <= 5e-3)
    np.testing.assert_array_equal(
        cnn.conv_filters[0], [[0.1561, -0.0710, 0.3743], [-0.1896, 0.0461, 0.6075], [0.0539, 0.0226, -1.0]]
    )
    np.testing.assert_array_equal(cnn.linear_weights, -np.eye(10))
    np.testing.assert_array_equal(cnn.linear_bias, np.ones(10))


def test_build_toy_linear_layer():
    cnn = build_manual_cnn(_toy_set())
    np.testing.assert_array_equal(cnn.linear_weights, [[-1, 0], [0, -1]])
    np.testing.assert_array_equal(cnn.linear_bias, [1, 1])
    for k in cnn.conv_filters:
        assert k.sum() == pytest.approx(0.0, abs=1e-15)


def test_build_channel_out_of_range(published):
    with pytest.raises(ChannelOutOfRange):
        build_manual_cnn(published, channel=3)


def test_forward_on_own_noise(published):
    cnn = build_manual_cnn(published, channel=1)
    for i, c in enumerate(published.channel(1)):
        delta = crop_init_band(ar_generate(c, 36, 36, 100 + i)).values
        logits, cls = forward(cnn, delta)
        assert logits[i] == pytest.approx(1.0, abs=1e-6)
        assert np.all(np.delete(logits, i) < 1.0)
        assert cls == i


def test_forward_zeros_ties_to_lowest_index(published):
    logits, cls = forward(build_manual_cnn(published), np.zeros((32, 32)))
    np.testing.assert_array_equal(logits, np.ones(10))
    assert cls == 0


def test_forward_order_of_operations():
    cnn = build_manual_cnn(_toy_set())
    delta = np.random.default_rng(0).standard_normal((7, 7))
    logits, _ = forward(cnn, delta)
    for i, kernel in enumerate(cnn.conv_filters):
        corr = np.array(
            [[(delta[r : r + 3, c : c + 3] * kernel).sum() for c in range(5)] for r in range(5)]
        )
        assert logits[i] == pytest.approx(1.0 - max(0.0, corr.max()), abs=1e-12)


def test_argmax_invariant_under_positive_scaling(published):
    cnn = build_manual_cnn(published, channel=2)
    rng = np.random.default_rng(5)
    for t in range(100):
        cls = int(rng.integers(10))
        delta = crop_init_band(ar_generate(published.processes[cls][2], 36, 36, rng)).values
        if t % 3 == 0:
            delta = rng.standard_normal((32, 32))
        scale = float(np.exp(rng.uniform(-8, 8)))
        assert forward(cnn, delta)[1] == forward(cnn, scale * delta)[1]


def test_argmax_equals_softmax_argmax(published):
    cnn = build_manual_cnn(published)
    deltas = np.random.default_rng(0).standard_normal((20, 32, 32))
    logits = logits_batch(cnn, deltas)
    soft = np.exp(logits - logits.max(axis=1, keepdims=True))
    soft /= soft.sum(axis=1, keepdims=True)
    np.testing.assert_array_equal(np.argmax(logits, axis=1), np.argmax(soft, axis=1))


def test_forward_too_small(published):
    with pytest.raises(DimensionTooSmall):
        forward(build_manual_cnn(published), np.zeros((2, 32)))


def test_smoke_one_per_class(published):
    for ch in range(3):
        res = verify_separability(published, per_class=1, channel=ch, seed=3)
        assert res.accuracy == 1.0
        assert res.confusion.sum() == 10


def test_audit_reports_gaps(published):
    res = verify_separability(published, per_class=50, channel=0, seed=1)
    assert res.accuracy == 1.0
    np.testing.assert_array_equal(res.confusion, 50 * np.eye(10, dtype=int))
    assert np.all(res.gap_min > 0)
    assert np.all(res.gap_mean >= res.gap_min)
    assert np.all(np.abs(res.matching_logit_min - 1.0) <= 1e-6)
    d = res.to_dict()
    assert d["accuracy"] == 1.0 and len(d["confusion"]) == 10


def test_duplicate_processes_collapse(published):
    procs = [row[0] for row in published.processes]
    procs[4] = procs[2]
    dup = ARProcessSet([[p] for p in procs], 3)
    res = verify_separability(dup, per_class=40, channel=0, seed=0)
    k = 10
    pair_correct = res.confusion[2, 2] + res.confusion[4, 4]
    pair_total = res.confusion[2].sum() + res.confusion[4].sum()
    assert pair_correct / pair_total <= 0.5 + 1 / (2 * k)
    # ties resolve to the lower index
    assert res.confusion[4, 2] == 40


def test_audit_is_deterministic(published):
    a = verify_separability(published, per_class=5, channel=1, seed=9)
    b = verify_separability(published, per_class=5, channel=1, seed=9)
    np.testing.assert_array_equal(a.gap_min, b.gap_min)
