import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from ncopt.instances import (DatasetFormatError, TspInstance, batch_tour_lengths, canonical_tour,
                             check_tour, format_line, make_batch, neighbor_count, parse_graph_mode,
                             parse_line, quantize, read_dataset, sample_instances, sparsify,
                             tour_length, write_dataset)

CORNERS = TspInstance(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))


@st.composite
def instance_and_tour(draw, n_min=4, n_max=20):
    n = draw(st.integers(n_min, n_max))
    seed = draw(st.integers(0, 2 ** 31))
    r = np.random.default_rng(seed)
    return TspInstance(r.random((n, 2))), r.permutation(n)


def test_corner_square():
    assert tour_length(CORNERS, [0, 1, 2, 3]) == 4.0
    assert_allclose(tour_length(CORNERS, [0, 2, 1, 3]), 2 + 2 * np.sqrt(2))


def test_instance_validation():
    with pytest.raises(ValueError):
        TspInstance(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        TspInstance(np.full((5, 2), 1.5))
    with pytest.raises(ValueError):
        TspInstance(np.zeros((5, 3)))
    with pytest.raises(ValueError):
        check_tour([0, 1, 1, 2], 4)


@given(instance_and_tour(), st.integers(0, 50))
def test_length_rotation_reversal_invariance(it, shift):
    inst, tour = it
    base = tour_length(inst, tour)
    assert abs(tour_length(inst, np.roll(tour, shift)) - base) < 1e-12
    assert abs(tour_length(inst, tour[::-1]) - base) < 1e-12
    assert abs(tour_length(inst, canonical_tour(tour)) - base) < 1e-12


@given(instance_and_tour())
def test_canonical_tour(it):
    _, tour = it
    c = canonical_tour(tour)
    assert c[0] == 0 and c[1] < c[-1]
    assert np.array_equal(canonical_tour(np.roll(tour[::-1], 3)), c)


@given(instance_and_tour())
def test_batch_lengths_match_scalar(it):
    inst, tour = it
    got = batch_tour_lengths(inst.coords[None], tour[None])[0]
    assert abs(got - tour_length(inst, tour)) < 1e-12


def test_graph_modes():
    assert parse_graph_mode("full") == ("full", 0.0)
    assert parse_graph_mode("knn:5") == ("knn", 5)
    assert neighbor_count(10, "fraction:0.2") == 2
    assert neighbor_count(50, "fraction:0.2") == 10
    assert neighbor_count(11, "fraction:0.2") == 3
    assert neighbor_count(5, "knn:10") == 4
    assert neighbor_count(5, "fraction:0.01") == 1
    for bad in ("knn:0", "fraction:0", "fraction:1.5", "ring"):
        with pytest.raises(ValueError):
            parse_graph_mode(bad)


@given(instance_and_tour(n_max=30), st.integers(1, 8))
def test_knn_graph_properties(it, k):
    inst, _ = it
    g = sparsify(inst, f"knn:{k}")
    k = min(k, inst.n - 1)
    assert g.neighbors.shape == (inst.n, k)
    d = inst.distances()
    for i in range(inst.n):
        row = g.neighbors[i]
        assert i not in row
        assert np.all(np.diff(row) > 0)
        others = np.setdiff1d(np.delete(np.arange(inst.n), i), row)
        if others.size:
            assert d[i, row].max() <= d[i, others].min() + 1e-15


def test_full_graph_is_complete():
    g = sparsify(CORNERS, "full")
    assert g.adjacency().sum() == 12
    assert g.has_edge(0, 3) and not g.has_edge(0, 0)


def test_graph_batch_layout():
    r = np.random.default_rng(0)
    coords = r.random((3, 6, 2))
    b = make_batch(coords, "knn:2")
    assert b.src.shape == (3 * 6 * 2,)
    assert np.all(b.src // 6 == b.dst // 6)
    flat = coords.reshape(-1, 2)
    assert_allclose(b.dist, np.linalg.norm(flat[b.src] - flat[b.dst], axis=1))


def test_format_line_example():
    line = format_line(CORNERS, [0, 1, 2, 3])
    assert line == "0 0 1 0 1 1 0 1 output 1 2 3 4 1"
    inst, tour = parse_line(line)
    assert np.array_equal(tour, [0, 1, 2, 3])
    assert "output" not in format_line(CORNERS)


@pytest.mark.parametrize("line", [
    "0 0 1 0 1",                              # odd coordinate count
    "0 0 1 0 1 1 x 1",                        # malformed value
    "0 0 1 0 1 1 0 1 output 1 2 3 4",         # unclosed
    "0 0 1 0 1 1 0 1 output 1 2 3 5 1",       # out of range
    "0 0 1 0 1 1 0 1 output 1 2 2 4 1",       # repeated node
    "0 0 1 0 1 1 0 2 output 1 2 3 4 1",       # coordinate outside square
])
def test_parse_errors(line):
    with pytest.raises(DatasetFormatError):
        parse_line(line)


def test_round_trip_bit_identical(tmp_path):
    r = np.random.default_rng(7)
    insts = sample_instances(12, 1000, r)
    tours = [r.permutation(12) for _ in insts]
    p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
    write_dataset(p1, insts, tours)
    pairs = read_dataset(p1)
    write_dataset(p2, [p[0] for p in pairs], [p[1] for p in pairs])
    assert p1.read_bytes() == p2.read_bytes()
    assert all(np.array_equal(t, p[1]) for t, p in zip(tours, pairs))
    # once quantized, coordinates survive exactly
    assert all(np.array_equal(quantize(i.coords), p[0].coords) for i, p in zip(insts, pairs))
