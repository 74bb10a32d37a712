import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskplan.mdp_core import (ACTIONS, Action, CellId, LocalMdp, SafetyState, build_grid, make_transitions,
                               next_cell)


@pytest.fixture(scope="module")
def highway():
    return build_grid(11, 39, 2.0, 3.5, [3, 3, 3])


def test_highway_window_dimensions(highway):
    g = highway
    assert g.n_cells == 429
    assert g.m * g.cell_width == pytest.approx(22.0)
    assert g.n * g.cell_length == pytest.approx(136.5)
    assert g.edge_rows == {0, 10}
    assert g.lane_rows == ((1, 4), (4, 7), (7, 10))


def test_minimal_grid():
    g = build_grid(3, 2, 1.0, 1.0, [1])
    assert g.n_cells == 6
    assert g.edge_rows == {0, 2}


def test_lane_ranges_equivalent_to_widths():
    a = build_grid(11, 5, 2.0, 3.5, [3, 3, 3])
    b = build_grid(11, 5, 2.0, 3.5, [(4, 7), (1, 4), (7, 10)])
    assert a == b


@pytest.mark.parametrize("args", [
    (2, 39, 2.0, 3.5, [1]),
    (11, 1, 2.0, 3.5, [3, 3, 3]),
    (11, 39, 0.0, 3.5, [3, 3, 3]),
    (11, 39, 2.0, -1.0, [3, 3, 3]),
    (11, 39, 2.0, 3.5, [(0, 4), (4, 7), (7, 10)]),   # touches an edge row
    (11, 39, 2.0, 3.5, [(1, 4), (4, 7), (7, 11)]),
    (11, 39, 2.0, 3.5, [3, 3]),                       # leaves rows uncovered
    (11, 39, 2.0, 3.5, [(1, 5), (4, 10)]),            # overlapping lanes
])
def test_build_grid_rejects(args):
    with pytest.raises(ValueError):
        build_grid(*args)


def test_world_point_to_cell(highway):
    assert highway.cell_of(1.75, 0.0) == CellId(5, 0)
    assert highway.cell_of(-0.1, 0.0) is None
    assert highway.cell_of(1.0, 11.0) is None


def test_cell_center_round_trip(highway):
    for cell in highway.cells():
        assert highway.cell_of(*highway.center(cell)) == cell


def test_shifted_window_keeps_lattice(highway):
    g = highway.shifted(70.0)
    assert g.cell_of(71.0, 0.0) == CellId(5, 0)
    assert g.x_end == pytest.approx(70.0 + 136.5)


@pytest.mark.parametrize("cell, action, expected", [
    ((5, 0), Action.SEC2, (5, 1)),
    ((0, 3), Action.SEC3, (0, 4)),
    ((10, 3), Action.SEC1, (10, 4)),
    ((5, 38), Action.SEC1, (5, 38)),
    ((5, 7), Action.SEC1, (6, 8)),
    ((5, 7), Action.SEC3, (4, 8)),
])
def test_next_cell(highway, cell, action, expected):
    assert next_cell(cell, action, highway) == expected


def test_action_geometry():
    assert [a.offset for a in ACTIONS] == [1, 0, -1]
    assert len(ACTIONS) == 3


def test_safety_state_tags():
    assert [s.tag for s in SafetyState] == ["sa", "lr", "hr", "un", "tg", "cp"]
    with pytest.raises(ValueError):
        SafetyState(6)


def test_deterministic_transitions(highway):
    P = make_transitions(1.0, highway).P
    assert np.all((P > 0).sum(axis=2) == 1)
    np.testing.assert_allclose(P.sum(axis=2), 1.0, atol=1e-12)


def test_interior_slip_split(highway):
    tm = make_transitions(0.9, highway)
    s = highway.index((5, 10))
    idx, prob = tm.successors(s, Action.SEC2)
    got = {highway.cell(i): p for i, p in zip(idx, prob)}
    assert got == pytest.approx({(6, 11): 0.05, (5, 11): 0.9, (4, 11): 0.05})


def test_edge_clamp_merges_mass(highway):
    tm = make_transitions(0.9, highway)
    s = highway.index((0, 10))
    idx, prob = tm.successors(s, Action.SEC3)
    got = {highway.cell(i): p for i, p in zip(idx, prob)}
    # SEC3 and SEC2 both land on (0, 11)
    assert got == pytest.approx({(0, 11): 0.95, (1, 11): 0.05})


def test_transition_invariants_exhaustive(highway):
    """Brute-force oracle over all 429 x 3 pairs: conservation and locality."""
    P = make_transitions(0.9, highway).P
    for cell in highway.cells():
        s = highway.index(cell)
        for a in ACTIONS:
            row = P[s, a]
            assert abs(row.sum() - 1.0) <= 1e-12
            expected = {}
            for b in ACTIONS:
                t = next_cell(cell, b, highway)
                expected[t] = expected.get(t, 0.0) + (0.9 if a == b else 0.05)
            for i in np.flatnonzero(row):
                succ = highway.cell(i)
                assert succ.col == min(cell[1] + 1, highway.n - 1)
                assert row[i] == pytest.approx(expected[succ], abs=1e-15)


def test_transitions_are_read_only(highway):
    P = make_transitions(0.9, highway).P
    with pytest.raises(ValueError):
        P[0, 0, 0] = 1.0


@pytest.mark.parametrize("p", [0.0, -0.1, 1.1])
def test_make_transitions_rejects(highway, p):
    with pytest.raises(ValueError):
        make_transitions(p, highway)


@settings(max_examples=40, deadline=None)
@given(m=st.integers(3, 8), n=st.integers(2, 8), p=st.floats(0.05, 1.0))
def test_mass_conservation_random_grids(m, n, p):
    g = build_grid(m, n, 1.0, 1.0, [m - 2])
    P = make_transitions(p, g).P
    np.testing.assert_allclose(P.sum(axis=2), 1.0, atol=1e-12)
    assert np.all(P >= 0)


def test_local_mdp_validation(highway):
    tm = make_transitions(0.9, highway)
    mdp = LocalMdp(highway, tm, 0.3, CellId(5, 0), frozenset({CellId(5, 38)}))
    assert mdp.n_states == 429
    assert mdp.P.shape == (429, 3, 429)
    with pytest.raises(ValueError):
        LocalMdp(highway, tm, 0.0, CellId(5, 0))
    with pytest.raises(ValueError):
        LocalMdp(highway, tm, 1.5, CellId(5, 0))
    with pytest.raises(ValueError):
        LocalMdp(highway, tm, 0.3, CellId(5, 0), frozenset({CellId(5, 0)}))
