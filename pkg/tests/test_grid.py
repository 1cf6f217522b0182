import numpy as np
import pytest

from gridcast.grid import (RATING_SCALE, GridParseError, GridValidationError, base_branch_table,
                           build_nrel118_like, grid_to_csv, is_connected, load_grid, node_degrees,
                           read_grid_dir, write_grid)

from conftest import make_grid


def _write(tmp_path, bus, branch, gen):
    paths = []
    for name, text in (("bus.csv", bus), ("branch.csv", branch), ("gen.csv", gen)):
        p = tmp_path / name
        p.write_text(text, encoding="utf-8")
        paths.append(p)
    return paths


BUS3 = "id,region,base_kv,kind\n0,0,138,slack\n1,0,138,pq\n2,1,138,pv\n"
BRANCH2 = "from,to,r_pu,x_pu,rating_mva\n0,1,0.01,0.1,100\n1,2,0.02,0.2,80\n"
GEN1 = "bus,p_min,p_max,q_min,q_max,tech,dispatchable\n0,0,200,-50,50,thermal,1\n2,0,40,0,0,wind,0\n"


def test_load_three_bus_fixture(tmp_path):
    g = load_grid(*_write(tmp_path, BUS3, BRANCH2, GEN1))
    assert g.n_bus == 3 and g.n_branch == 2
    assert len(g.directed_edges) == 4
    # branch i -> rows 2i, 2i+1
    assert g.directed_edges.tolist() == [[0, 1], [1, 0], [1, 2], [2, 1]]
    assert g.slack == 0 and g.pv.tolist() == [2] and g.pq.tolist() == [1]
    assert g.generators[1].technology == "wind" and not g.generators[1].dispatchable


def test_unknown_bus_id(tmp_path):
    branch = BRANCH2 + "1,999,0.01,0.1,50\n"
    with pytest.raises(GridValidationError, match="unknown bus id"):
        load_grid(*_write(tmp_path, BUS3, branch, GEN1))


def test_no_slack_bus(tmp_path):
    bus = BUS3.replace("slack", "pq")
    with pytest.raises(GridValidationError, match="no slack bus"):
        load_grid(*_write(tmp_path, bus, BRANCH2, GEN1))


def test_parse_error_reports_line(tmp_path):
    branch = "from,to,r_pu,x_pu,rating_mva\n0,1,0.01,0.1,100\n1,2,abc,0.2,80\n"
    with pytest.raises(GridParseError) as info:
        load_grid(*_write(tmp_path, BUS3, branch, GEN1))
    assert info.value.line == 3
    assert ":3:" in str(info.value)


def test_bad_header(tmp_path):
    with pytest.raises(GridParseError, match="expected header"):
        load_grid(*_write(tmp_path, "id,kind\n0,slack\n", BRANCH2, GEN1))


@pytest.mark.parametrize("branch,msg", [
    ("0,0,0.01,0.1,100", "from_bus equals to_bus"),
    ("0,1,0.01,0,100", "zero reactance"),
    ("0,1,0.01,0.1,0", "rating_mva"),
])
def test_branch_invariants(tmp_path, branch, msg):
    text = "from,to,r_pu,x_pu,rating_mva\n" + branch + "\n1,2,0.02,0.2,80\n"
    with pytest.raises(GridValidationError, match=msg):
        load_grid(*_write(tmp_path, BUS3, text, GEN1))


def test_disconnected_rejected():
    with pytest.raises(GridValidationError, match="not connected"):
        make_grid(3, [(0, 1, 0.01, 0.1, 100.0)])


def test_node_degrees_path_and_star():
    path = make_grid(3, [(0, 1, 0.0, 0.1, 1.0), (1, 2, 0.0, 0.1, 1.0)])
    assert node_degrees(path).tolist() == [1, 2, 1]
    star = make_grid(5, [(0, k, 0.0, 0.1, 1.0) for k in range(1, 5)])
    assert node_degrees(star).tolist() == [4, 1, 1, 1, 1]


def test_nrel_counts(nrel):
    # 118 nodes, 179 edges, 358 directed edges
    assert nrel.n_bus == 118
    assert nrel.n_branch == 179
    assert len(nrel.directed_edges) == 358
    deg = node_degrees(nrel)
    assert deg.sum() == 2 * nrel.n_branch
    assert sum(b.kind == "slack" for b in nrel.buses) == 1
    assert is_connected(nrel.n_bus, [(b.from_bus, b.to_bus) for b in nrel.branches], nrel.slack)


def test_nrel_structure(nrel):
    assert nrel.n_region == 3
    techs = {g.technology for g in nrel.generators}
    assert {"wind", "solar", "thermal"} <= techs
    for br in nrel.branches:
        assert br.x > 0 and br.rating_mva > 0
        assert 0.0 <= br.r <= 0.2
    # slack is the largest thermal unit; generator buses are pv
    thermal = [g for g in nrel.generators if g.technology == "thermal"]
    assert max(thermal, key=lambda g: g.p_max).bus == nrel.slack
    gen_buses = {g.bus for g in nrel.generators} - {nrel.slack}
    assert set(nrel.pv.tolist()) == gen_buses


def test_nrel_ratings_scaled_from_base_table(nrel):
    base = base_branch_table()
    assert len(base) == nrel.n_branch
    for row, br in zip(base, nrel.branches):
        assert br.from_bus == row["from"] and br.to_bus == row["to"]
        assert br.rating_mva == pytest.approx(RATING_SCALE * row["base_rating_mva"], rel=0, abs=1e-9)


def test_builder_deterministic():
    a = grid_to_csv(build_nrel118_like(0))
    b = grid_to_csv(build_nrel118_like(0))
    assert a == b
    assert grid_to_csv(build_nrel118_like(1))["gen.csv"] != a["gen.csv"]


def test_round_trip(tmp_path, nrel):
    write_grid(nrel, tmp_path)
    back = read_grid_dir(tmp_path)
    assert back == nrel
    np.testing.assert_array_equal(back.directed_edges, nrel.directed_edges)


def test_grid_is_immutable(nrel):
    with pytest.raises(Exception):
        nrel.buses = ()
    with pytest.raises(ValueError):
        nrel.directed_edges[0, 0] = 5
