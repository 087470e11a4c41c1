import numpy as np
import pytest
from hypothesis import given, strategies as st

from ncopt.instances import TspInstance, canonical_tour, check_tour, tour_length
from ncopt.oracles import (EXACT, HEURISTIC, brute_force, held_karp, held_karp_many, insertion,
                           reference_tour, two_opt)

CORNERS = TspInstance(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))


def rand_inst(n, seed):
    return TspInstance(np.random.default_rng(seed).random((n, 2)))


@given(st.integers(4, 9), st.integers(0, 2 ** 31))
def test_held_karp_matches_brute_force(n, seed):
    inst = rand_inst(n, seed)
    assert abs(held_karp(inst).length - brute_force(inst).length) < 1e-9


def test_corners():
    hk = held_karp(CORNERS)
    assert hk.length == 4.0 and hk.quality == EXACT
    assert list(canonical_tour(hk.tour)) == [0, 1, 2, 3]
    assert brute_force(CORNERS).length == 4.0


def test_pentagon_perimeter():
    ang = 2 * np.pi * np.arange(5) / 5
    pts = 0.5 + 0.5 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    inst = TspInstance(np.clip(pts, 0, 1)[[0, 2, 4, 1, 3]])
    side = np.linalg.norm(pts[0] - pts[1])
    assert abs(held_karp(inst).length - 5 * side) < 1e-12


def test_seed7_n8_cross_oracle():
    inst = rand_inst(8, 7)
    assert abs(brute_force(inst).length - held_karp(inst).length) < 1e-9
    assert tour_length(CORNERS, insertion(CORNERS, "furthest")) == 4.0


def test_batched_matches_single():
    insts = [rand_inst(8, s) for s in range(6)]
    many = held_karp_many(insts, chunk=4)
    for inst, r in zip(insts, many):
        assert abs(r.length - held_karp(inst).length) < 1e-12


def test_size_limits():
    with pytest.raises(ValueError):
        brute_force(rand_inst(11, 0))
    with pytest.raises(ValueError):
        held_karp(rand_inst(21, 0))


@pytest.mark.parametrize("rule", ["furthest", "nearest", "random"])
def test_insertion_valid_and_not_better_than_optimal(rule):
    for seed in range(1000):
        n = 4 + seed % 40
        inst = rand_inst(n, seed)
        t = insertion(inst, rule, np.random.default_rng(seed))
        check_tour(t, n)
        if n <= 9 and seed % 10 == 0:
            assert tour_length(inst, t) >= brute_force(inst).length - 1e-12


def test_random_insertion_deterministic():
    inst = rand_inst(15, 3)
    a = insertion(inst, "random", np.random.default_rng(5))
    b = insertion(inst, "random", np.random.default_rng(5))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        insertion(inst, "cheapest")


def test_two_opt_uncrosses_square():
    trace = []
    t = two_opt(CORNERS, [0, 2, 1, 3], max_passes=1, trace=trace)
    assert tour_length(CORNERS, t) == 4.0
    assert trace[0] > trace[-1]


@given(st.integers(5, 30), st.integers(0, 2 ** 31))
def test_two_opt_monotone_and_idempotent(n, seed):
    inst = rand_inst(n, seed)
    start = np.random.default_rng(seed).permutation(n)
    trace = []
    t = two_opt(inst, start, trace=trace)
    check_tour(t, n)
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))
    assert np.array_equal(two_opt(inst, t), t)


def test_two_opt_trace_on_furthest_n50():
    inst = rand_inst(50, 11)
    trace = []
    two_opt(inst, insertion(inst, "furthest"), trace=trace)
    assert len(trace) >= 2
    assert np.all(np.diff(trace) <= 1e-12)


def test_optimal_tour_unchanged_by_two_opt():
    inst = rand_inst(8, 2)
    opt = brute_force(inst)
    assert abs(tour_length(inst, two_opt(inst, opt.tour)) - opt.length) < 1e-12


def test_reference_dispatch():
    assert reference_tour(rand_inst(10, 0)).quality == EXACT
    assert reference_tour(rand_inst(20, 0)).quality == EXACT
    assert reference_tour(rand_inst(50, 0)).quality == HEURISTIC
