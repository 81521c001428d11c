import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvlab.errors import ParameterError
from kvlab.scheduling import (
    Batch,
    LatencyModel,
    Request,
    batch_latency,
    fcfs_schedule,
    optimal_batches_bruteforce,
    schedule,
    total_latency,
)

DEFAULT = LatencyModel()


def _reqs(hits, arrivals=None):
    arrivals = arrivals or list(range(len(hits)))
    return [Request(f"r{i}", float(a), hit_rate=h)
            for i, (h, a) in enumerate(zip(hits, arrivals))]


BIMODAL = _reqs([0.9, 0.1, 0.8, 0.2])


class TestLatencyModel:
    def test_reference_points(self):
        assert DEFAULT.latency(1.0) == 10.0
        assert DEFAULT.latency(0.75) == pytest.approx(60.0)
        assert DEFAULT.latency(0.0) == pytest.approx(110.0)

    def test_default_model_is_concave(self):
        assert DEFAULT.is_concave()
        assert LatencyModel(exponent=1.0).is_concave()
        assert LatencyModel(exponent=0.25).is_concave()

    def test_convex_exponent_detected(self):
        assert not LatencyModel(exponent=2.0).is_concave()

    def test_parameter_domain(self):
        with pytest.raises(ParameterError):
            LatencyModel(t_base_ms=-1.0)
        with pytest.raises(ParameterError):
            LatencyModel(exponent=0.0)


class TestBatchLatency:
    def test_empty_batch_rejected(self):
        with pytest.raises(ParameterError):
            batch_latency(Batch([]), DEFAULT)

    def test_mean_hit_rate_drives_latency(self):
        batch = Batch(_reqs([1.0, 0.5]))
        assert batch.mean_hit_rate == 0.75
        assert batch_latency(batch, DEFAULT) == pytest.approx(60.0)

    def test_per_token_term_uses_longest_request(self):
        model = LatencyModel(per_token_ms=2.0)
        reqs = _reqs([1.0, 1.0])
        reqs[0].tokens = [1] * 5
        reqs[1].tokens = [1] * 9
        assert batch_latency(Batch(reqs), model) == pytest.approx(10.0 + 18.0)


class TestSchedule:
    def test_bimodal_example(self):
        batches = schedule(BIMODAL, 2)
        assert [[r.id for r in b.requests] for b in batches] == [["r0", "r2"],
                                                                 ["r3", "r1"]]

    def test_equal_hit_rates_preserve_arrival_order(self):
        reqs = _reqs([0.5, 0.5, 0.5, 0.5])
        batches = schedule(reqs, 2)
        assert [r.id for b in batches for r in b.requests] == \
            ["r0", "r1", "r2", "r3"]

    def test_single_request(self):
        batches = schedule(_reqs([0.4]), 3)
        assert len(batches) == 1 and len(batches[0]) == 1

    def test_bad_batch_size(self):
        with pytest.raises(ParameterError):
            schedule(BIMODAL, 0)

    @settings(max_examples=60, deadline=None)
    @given(st.permutations(list(range(6))))
    def test_permutation_invariance(self, order):
        reqs = _reqs([0.9, 0.3, 0.3, 0.7, 0.1, 0.5], arrivals=[5, 1, 2, 3, 4, 0])
        shuffled = [reqs[i] for i in order]
        want = [[r.id for r in b.requests] for b in schedule(reqs, 2)]
        got = [[r.id for r in b.requests] for b in schedule(shuffled, 2)]
        assert got == want

    def test_aging_promotes_starved_request(self):
        reqs = _reqs([0.9, 0.0], arrivals=[1000.0, 0.0])
        plain = schedule(reqs, 1, now_ms=2000.0)
        aged = schedule(reqs, 1, aging_lambda=0.01, now_ms=2000.0)
        assert plain[0].requests[0].id == "r0"
        assert aged[0].requests[0].id == "r1"  # 0.0 + 0.01*2000 > 0.9 + 0.01*1000


class TestTotalLatency:
    def test_sorted_vs_mixed_reference_values(self):
        sorted_total = total_latency(schedule(BIMODAL, 2), DEFAULT)
        expected_sorted = (10 + 100 * math.sqrt(0.15)) + (10 + 100 * math.sqrt(0.85))
        assert sorted_total == pytest.approx(expected_sorted)
        mixed = [Batch([BIMODAL[0], BIMODAL[1]]), Batch([BIMODAL[2], BIMODAL[3]])]
        expected_mixed = 2 * (10 + 100 * math.sqrt(0.5))
        assert total_latency(mixed, DEFAULT) == pytest.approx(expected_mixed)
        assert sorted_total < total_latency(mixed, DEFAULT)

    def test_single_batch_equals_batch_latency(self):
        batch = Batch(BIMODAL)
        assert total_latency([batch], DEFAULT) == batch_latency(batch, DEFAULT)

    def test_all_hits_cost_base_only(self):
        batches = schedule(_reqs([1.0] * 4), 2)
        assert total_latency(batches, DEFAULT) == pytest.approx(2 * 10.0)


class TestFcfs:
    def test_arrival_order_preserved(self):
        batches = fcfs_schedule(BIMODAL, 2)
        assert [[r.id for r in b.requests] for b in batches] == [["r0", "r1"],
                                                                 ["r2", "r3"]]

    def test_equals_cache_aware_when_already_sorted(self):
        reqs = _reqs([0.9, 0.7, 0.4, 0.1])
        a = [[r.id for r in b.requests] for b in fcfs_schedule(reqs, 2)]
        b = [[r.id for r in b.requests] for b in schedule(reqs, 2)]
        assert a == b

    def test_bimodal_fcfs_never_beats_sorted(self):
        assert total_latency(fcfs_schedule(BIMODAL, 2), DEFAULT) >= \
            total_latency(schedule(BIMODAL, 2), DEFAULT)


class TestBruteforceOracle:
    def test_bimodal_minimum_is_sorted_partition(self):
        batches, best = optimal_batches_bruteforce(BIMODAL, 2, DEFAULT)
        assert best == pytest.approx(total_latency(schedule(BIMODAL, 2), DEFAULT))

    def test_single_request_trivial(self):
        batches, best = optimal_batches_bruteforce(_reqs([0.3]), 2, DEFAULT)
        assert len(batches) == 1
        assert best == pytest.approx(DEFAULT.latency(0.3))

    def test_size_guard(self):
        with pytest.raises(ParameterError):
            optimal_batches_bruteforce(_reqs([0.5] * 11), 2, DEFAULT)

    def test_sorted_optimal_on_aligned_instances(self, rng):
        # all batches full: the sorted slicing is globally optimal under any
        # model passing the concavity check
        for trial in range(40):
            n_batch = int(rng.integers(2, 4))
            count = n_batch * int(rng.integers(1, 8 // n_batch + 1))
            reqs = _reqs(rng.uniform(size=count).tolist())
            got = total_latency(schedule(reqs, n_batch), DEFAULT)
            _, best = optimal_batches_bruteforce(reqs, n_batch, DEFAULT)
            assert got == pytest.approx(best, abs=1e-9)

    def test_remainder_batches_can_beat_greedy_slicing(self):
        # with a partial trailing batch the greedy top-N slicing is not
        # always the optimum: a singleton high-hit batch can win.  This
        # pins the known boundary of the sorted-optimality argument.
        reqs = _reqs([0.9, 0.5, 0.1])
        greedy = total_latency(schedule(reqs, 2), DEFAULT)
        _, best = optimal_batches_bruteforce(reqs, 2, DEFAULT)
        assert best < greedy

    def test_exchange_inequality(self, rng):
        # swapping any cross-batch pair of a sorted schedule cannot help.
        # Holds when batches are equal-sized: a swap then shifts the two
        # batch means toward each other by the same amount, which concavity
        # penalizes.  (With a partial trailing batch the shifts are unequal
        # and the argument fails; see the remainder test above.)
        for trial in range(20):
            count = 2 * int(rng.integers(2, 5))
            reqs = _reqs(rng.uniform(size=count).tolist())
            batches = schedule(reqs, 2)
            base = total_latency(batches, DEFAULT)
            for bi, bj in itertools.combinations(range(len(batches)), 2):
                for i in range(len(batches[bi])):
                    for j in range(len(batches[bj])):
                        swapped = [list(b.requests) for b in batches]
                        swapped[bi][i], swapped[bj][j] = \
                            swapped[bj][j], swapped[bi][i]
                        assert total_latency([Batch(b) for b in swapped],
                                             DEFAULT) >= base - 1e-9


class TestRequestValidation:
    def test_hit_rate_domain(self):
        with pytest.raises(ParameterError):
            Request("x", 0.0, hit_rate=1.5)

    def test_negative_arrival(self):
        with pytest.raises(ParameterError):
            Request("x", -1.0)
