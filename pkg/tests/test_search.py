import math

import numpy as np
import pytest

import oracles
from arpoison import io
from arpoison.ar import ARCoefficients, ar_generate, channel_rng
from arpoison.errors import SearchExhausted, ValidationError
from arpoison.search import (
    SearchConfig,
    certify,
    draw_candidate,
    find_coefficients,
    is_stable,
    probe_for,
)


def test_copy_left_is_stable():
    c = ARCoefficients((1.0,) + (0.0,) * 7)
    assert is_stable(c, trials=3, bound=1e4, seed=0)
    plane = ar_generate(c, 36, 36, 0).values
    # bounded by the init band: every row repeats its band value
    assert np.linalg.norm(plane) <= np.abs(plane[:, :2]).max() * 36 * 6


def test_divergent_processes_are_rejected():
    # unnormalized doubling of the left neighbour
    doubling = ARCoefficients((2.0,) + (0.0,) * 7)
    assert np.linalg.norm(ar_generate(doubling, 36, 36, 0).values) > 1e4
    assert not is_stable(doubling)
    # sums to one but has a characteristic root at 2: x_t = 3 x_{t-1} - 2 x_{t-2}
    growth = ARCoefficients((3.0, -2.0) + (0.0,) * 6)
    assert math.isclose(growth.total, 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        assert not np.linalg.norm(ar_generate(growth, 36, 36, 0).values) <= 1e4
    assert not is_stable(growth)


def test_nan_is_unstable():
    huge = ARCoefficients((1e200,) * 8)
    assert not is_stable(huge)


def test_all_published_processes_are_stable(published):
    for i, c in enumerate(published.flat()):
        assert is_stable(c, trials=3, bound=1e4, seed=i), i


def test_is_stable_trials_validation():
    with pytest.raises(ValidationError):
        is_stable(ARCoefficients((0.125,) * 8), trials=0)


def test_single_entry_search_takes_first_stable_candidate():
    cfg = SearchConfig(num_classes=1, channels=1, threshold=0.0, master_seed=5)
    pset = find_coefficients(cfg)
    a = 0
    while True:
        cand = draw_candidate(cfg, a)
        if cand is not None and probe_for(cand, cfg, a)[0]:
            break
        a += 1
    assert pset.processes[0][0] == cand
    assert pset.certificate.attempts == (a,)
    assert pset.certificate.total_attempts == a + 1


def test_search_is_deterministic_and_thread_invariant():
    cfg = SearchConfig(num_classes=4, channels=3, threshold=3.0, master_seed=11)
    a = find_coefficients(cfg)
    b = find_coefficients(cfg)
    c = find_coefficients(cfg, threads=4)
    assert io.dumps_coefficients(a) == io.dumps_coefficients(b) == io.dumps_coefficients(c)
    d = find_coefficients(SearchConfig(num_classes=4, channels=3, threshold=3.0, master_seed=12))
    assert io.dumps_coefficients(a) != io.dumps_coefficients(d)


def test_accepted_coefficients_sum_to_one():
    pset = find_coefficients(SearchConfig(num_classes=5, channels=2, threshold=3.0, master_seed=1))
    for c in pset.flat():
        assert abs(math.fsum(c.beta) - 1.0) <= 1e-9
    assert pset.num_classes == 5 and pset.channels == 2


def test_certificate_replays_exactly():
    cfg = SearchConfig(num_classes=5, channels=3, threshold=3.0, master_seed=2)
    pset = find_coefficients(cfg)
    check = certify(pset)
    assert check.holds(3.0)
    assert all(check.stable)
    # both directions are checked at acceptance, so the search saw every pair
    assert check.min_response == pset.certificate.min_response


def test_certificate_independent_oracle():
    pset = find_coefficients(SearchConfig(num_classes=3, channels=2, threshold=3.0, master_seed=9))
    doc = {"coefficients": pset.blocks().tolist(), "certificate": pset.certificate.to_dict()}
    stable, min_all, min_fwd = oracles.certificate_check(doc["coefficients"], doc["certificate"])
    assert stable
    assert min_all >= 3.0 and min_fwd >= 3.0
    assert min_all == pytest.approx(certify(pset).min_response, rel=1e-9)


def test_one_way_search_certifies_forward_pairs_only():
    cfg = SearchConfig(num_classes=3, channels=3, threshold=3.0, master_seed=4, bidirectional=False)
    pset = find_coefficients(cfg)
    assert certify(pset).holds(3.0, bidirectional=False)


def test_search_exhausted():
    cfg = SearchConfig(num_classes=3, channels=1, threshold=1e12, master_seed=0, max_attempts=40)
    with pytest.raises(SearchExhausted) as info:
        find_coefficients(cfg)
    assert info.value.accepted == 1
    assert info.value.attempts == 40


def test_probe_is_first_stability_plane_cropped():
    cfg = SearchConfig(num_classes=1, channels=1, master_seed=3)
    cand = ARCoefficients((0.125,) * 8)
    ok, probe = probe_for(cand, cfg, attempt=7)
    from arpoison.ar import STREAM_PROBE, derive_seed

    seed = derive_seed(3, STREAM_PROBE, 7)
    full = ar_generate(cand, 36, 36, channel_rng(seed, 0)).values
    assert ok
    np.testing.assert_array_equal(probe, full[4:, 4:])


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(num_classes=0),
        dict(num_classes=1, channels=0),
        dict(num_classes=1, threshold=-1.0),
        dict(num_classes=1, max_attempts=0),
        dict(num_classes=1, probe_height=6, probe_width=6),
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValidationError):
        SearchConfig(**kwargs)
