from __future__ import annotations

import io
import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynqte.errors import DataValidationError
from dynqte.panel import (
    PanelDataset,
    SpatioPanelDataset,
    adjacency_matrix,
    alternating_design,
    design_row,
    load_panel_csv,
    load_regions_csv,
    write_panel_csv,
    write_regions_csv,
)


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


MINIMAL = """day,time,action,outcome,state_1
1,2,0,3.5,1.0
1,1,1,2.0,0.5
2,1,0,1.0,0.25
2,2,1,4.0,2.0
"""


def test_minimal_file(tmp_path):
    data = load_panel_csv(write(tmp_path, "p.csv", MINIMAL))
    assert (data.n, data.m, data.d) == (2, 2, 1)
    # rows are keyed, not ordered
    assert data.outcomes.tolist() == [[2.0, 3.5], [1.0, 4.0]]
    assert data.actions.dtype == np.int8
    assert data.day_labels == ("1", "2") and data.time_labels == ("1", "2")


@pytest.mark.parametrize(
    "text, row, fragment",
    [
        (MINIMAL.replace("1,1,1,2.0,0.5", "1,1,2,2.0,0.5"), 3, "action"),
        (MINIMAL.replace("1,1,1,2.0,0.5", "1,1,1,,0.5"), 3, "missing"),
        (MINIMAL.replace("2,2,1,4.0,2.0", "2,1,1,4.0,2.0"), 5, "duplicate"),
        (MINIMAL.replace("2,1,0,1.0,0.25", "2,1,0,1.0"), 4, "columns"),
        (MINIMAL.replace("2,1,0,1.0,0.25", "2,1,0,abc,0.25"), 4, "outcome"),
    ],
)
def test_row_numbered_errors(tmp_path, text, row, fragment):
    with pytest.raises(DataValidationError) as err:
        load_panel_csv(write(tmp_path, "p.csv", text))
    assert err.value.row == row
    assert fragment in str(err.value)


def test_incomplete_panel(tmp_path):
    text = "\n".join(MINIMAL.splitlines()[:-1]) + "\n"
    with pytest.raises(DataValidationError, match="incomplete"):
        load_panel_csv(write(tmp_path, "p.csv", text))


def test_bad_header(tmp_path):
    with pytest.raises(DataValidationError, match="header"):
        load_panel_csv(write(tmp_path, "p.csv", MINIMAL.replace("outcome", "y")))


def test_round_trip_bit_exact(tmp_path, small_panel):
    path = tmp_path / "round.csv"
    write_panel_csv(small_panel, path)
    back = load_panel_csv(path)
    np.testing.assert_array_equal(back.outcomes, small_panel.outcomes)
    np.testing.assert_array_equal(back.states, small_panel.states)
    np.testing.assert_array_equal(back.actions, small_panel.actions)
    buf = io.StringIO()
    write_panel_csv(back, buf)
    assert buf.getvalue() == path.read_text()


def spatial_fixture():
    rng = np.random.default_rng(0)
    n, m, r, d = 3, 4, 3, 2
    A = rng.integers(0, 2, size=(n, m, r))
    nbrs = ((1, 2), (0,), (0,))
    coords = np.array([[0.0, 0.0], [1.0, 0.5], [-1.0, 2.0]])
    return SpatioPanelDataset(rng.normal(size=(n, m, r)), rng.normal(size=(n, m, r, d)), A, nbrs, coords)


def test_spatial_round_trip(tmp_path):
    data = spatial_fixture()
    write_panel_csv(data, tmp_path / "st.csv")
    write_regions_csv(data, tmp_path / "regions.csv")
    back = load_panel_csv(tmp_path / "st.csv", "spatiotemporal", tmp_path / "regions.csv")
    np.testing.assert_array_equal(back.outcomes, data.outcomes)
    np.testing.assert_array_equal(back.states, data.states)
    np.testing.assert_array_equal(back.coords, data.coords)
    assert back.neighbors == data.neighbors


def test_asymmetric_neighbors_rejected(tmp_path):
    text = "region,lon,lat,neighbors\na,0,0,b;c\nb,1,0,a\nc,2,0,b\n"
    with pytest.raises(DataValidationError, match="symmetric"):
        load_regions_csv(write(tmp_path, "r.csv", text))


@pytest.mark.parametrize(
    "nbrs, fragment",
    [(((1,), (0,), ()), "no neighbors"), (((0, 1), (0,)), "itself"), (((1, 1), (0,)), "twice")],
)
def test_adjacency_validation(nbrs, fragment):
    with pytest.raises(DataValidationError, match=fragment):
        adjacency_matrix(nbrs, len(nbrs))


@pytest.mark.parametrize(
    "m, TI, start, expected",
    [(4, 1, 1, [1, 0, 1, 0]), (6, 3, 0, [0, 0, 0, 1, 1, 1]), (5, 2, 1, [1, 1, 0, 0, 1])],
)
def test_alternating_examples(m, TI, start, expected):
    assert alternating_design(m, TI, start).tolist() == expected


def test_alternating_rejects_constant_design():
    with pytest.raises(ValueError):
        alternating_design(3, 4)


@settings(max_examples=100, deadline=None)
@given(m=st.integers(1, 60), data=st.data())
def test_alternating_runs(m, data):
    TI = data.draw(st.integers(1, m))
    start = data.draw(st.sampled_from([0, 1]))
    seq = alternating_design(m, TI, start).tolist()
    runs = [len(list(g)) for _, g in itertools.groupby(seq)]
    assert len(runs) == -(-m // TI)
    assert all(r == TI for r in runs[:-1]) and 1 <= runs[-1] <= TI
    assert seq[0] == start


def test_design_rows():
    data = PanelDataset(np.zeros((2, 2)), np.array([[[2.0], [0.0]], [[1.0], [1.0]]]), np.array([[1, 0], [0, 1]]))
    assert design_row(data, 0, 0).tolist() == [1.0, 2.0, 1.0]
    sp = SpatioPanelDataset(
        np.zeros((2, 2, 5)),
        np.zeros((2, 2, 5, 1)),
        np.tile([1, 0, 1, 1, 0], (2, 2, 1)),
        ((1, 2), (0, 2, 3, 4), (0, 1), (1,), (1,)),
        np.zeros((5, 2)) + np.arange(5)[:, None],
    )
    assert design_row(sp, 0, 0, 0)[-1] == 0.5
    # neighbors of region 1 hold actions {1, 1, 1, 0}
    assert design_row(sp, 0, 0, 1)[-1] == 0.75


def test_neighbor_mean_matches_rational_arithmetic():
    data = spatial_fixture()
    Abar = data.neighbor_mean()
    for i, t, k in itertools.product(range(data.n), range(data.m), range(data.r)):
        nb = data.neighbors[k]
        exact = sum(Fraction(int(data.actions[i, t, j])) for j in nb) / len(nb)
        assert 0.0 <= Abar[i, t, k] <= 1.0
        assert Fraction(Abar[i, t, k]) == exact
        assert Fraction(design_row(data, i, t, k)[-1]) == exact


def test_datasets_are_immutable(small_panel):
    with pytest.raises(ValueError):
        small_panel.outcomes[0, 0] = 1.0
    with pytest.raises(AttributeError):
        small_panel.outcomes = None


def test_take_days_and_time_window(small_panel):
    sub = small_panel.take_days([3, 1])
    np.testing.assert_array_equal(sub.outcomes, small_panel.outcomes[[3, 1]])
    win = small_panel.time_window(2, 6)
    assert win.m == 4
    np.testing.assert_array_equal(win.states, small_panel.states[:, 2:6])


def test_spatial_region_and_permutation():
    data = spatial_fixture()
    reg = data.region(1)
    np.testing.assert_array_equal(reg.outcomes, data.outcomes[:, :, 1])
    perm = [2, 0, 1]
    p = data.permute_regions(perm)
    np.testing.assert_array_equal(p.outcomes, data.outcomes[:, :, perm])
    np.testing.assert_array_equal(p.neighbor_mean(), data.neighbor_mean()[:, :, perm])


def test_panel_validation():
    with pytest.raises(DataValidationError):
        PanelDataset(np.zeros((2, 2)), np.zeros((2, 2, 1)), np.array([[0, 2], [1, 0]]))
    with pytest.raises(DataValidationError):
        PanelDataset(np.zeros((2, 1)), np.zeros((2, 1, 1)), np.zeros((2, 1), dtype=int))
    with pytest.raises(DataValidationError):
        PanelDataset(np.full((2, 2), np.inf), np.zeros((2, 2, 1)), np.zeros((2, 2), dtype=int))
