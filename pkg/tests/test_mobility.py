import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from shapely import contains_xy
from shapely.geometry import Polygon

from meet_sim.deployment import hex_cell, hex_centers
from meet_sim.engine import RngStream
from meet_sim.mobility import (
    RoadPopulation,
    RoadSegment,
    Role,
    TraceFormatError,
    TrafficFlowParams,
    Vehicle,
    arrival_rate,
    expected_dwell,
    import_trace,
    neighbors_within,
    sample_ppp,
    spawn_arrivals,
)


def test_arrival_rate_reference_point():
    assert arrival_rate(TrafficFlowParams(0.2, 35.0, 15.0)) == pytest.approx(1.7142857142857142, abs=1e-15)


@pytest.mark.parametrize("v", [0.0, 35.0])
def test_arrival_rate_zero_at_boundaries(v):
    assert arrival_rate(TrafficFlowParams(0.2, 35.0, v)) == 0.0


def test_arrival_rate_concave_with_peak_at_half_vmax():
    vs = np.linspace(0, 35, 701)
    lam = np.array([arrival_rate(TrafficFlowParams(0.2, 35.0, v)) for v in vs])
    assert vs[np.argmax(lam)] == 17.5
    assert np.all(np.diff(lam, 2) <= 1e-12)


def test_invalid_flow_params():
    with pytest.raises(ValueError):
        TrafficFlowParams(0.2, 35.0, 40.0)
    with pytest.raises(ValueError):
        TrafficFlowParams(0.0, 35.0, 10.0)


@pytest.mark.parametrize("v,expected", [(15, 26.666666666666668), (35, 11.428571428571429)])
def test_expected_dwell(v, expected):
    assert expected_dwell(RoadSegment(400), v) == pytest.approx(expected)


def test_expected_dwell_rejects_nonpositive_speed():
    with pytest.raises(ValueError):
        expected_dwell(RoadSegment(400), 0)


def test_littles_law_fl_participants():
    # time-average number of present participants vs 0.05 * lambda * dwell
    p = TrafficFlowParams(0.2, 35.0, 15.0)
    seg = RoadSegment(400)
    horizon = 6e5
    vs = spawn_arrivals(p, {Role.OPV: 0.05, "other": 0.95}, horizon, RngStream(3, 1), seg, velocity_spread=0.0)
    busy = sum(min(v.departure_time, horizon) - v.arrival_time for v in vs if v.role == Role.OPV)
    expected = 0.05 * arrival_rate(p) * expected_dwell(seg, 15.0)
    assert expected == pytest.approx(2.2857142857, rel=1e-9)
    assert busy / horizon == pytest.approx(expected, rel=0.02)


def test_spawn_count_and_mix():
    p = TrafficFlowParams(0.2, 35.0, 15.0)
    vs = spawn_arrivals(p, {Role.OPV: 0.05, "other": 0.95}, 1e4, RngStream(0, 1))
    lam_t = arrival_rate(p) * 1e4
    assert abs(len(vs) - lam_t) < 3 * math.sqrt(lam_t)
    frac = np.mean([v.role == Role.OPV for v in vs])
    assert abs(frac - 0.05) < 3 * math.sqrt(0.05 * 0.95 / len(vs))


def test_spawn_empty_horizon():
    assert spawn_arrivals(TrafficFlowParams(), {Role.OPV: 1.0}, 0.0, RngStream(0, 1)) == []


def test_spawn_rejects_bad_mix():
    with pytest.raises(ValueError):
        spawn_arrivals(TrafficFlowParams(), {Role.OPV: 0.5, Role.UE: 0.3}, 10.0, RngStream(0, 1))


def test_interarrival_ks_exponential():
    p = TrafficFlowParams(0.2, 35.0, 15.0)
    lam = arrival_rate(p)
    vs = spawn_arrivals(p, {Role.OPV: 1.0}, 1e5 / lam * 1.02, RngStream(9, 1))
    t = np.array([v.arrival_time for v in vs])
    gaps = np.diff(np.concatenate(([0.0], t)))[: 10**5]
    assert len(gaps) == 10**5
    assert stats.kstest(gaps, "expon", args=(0, 1 / lam)).pvalue > 0.01


def test_velocity_spread_bounds():
    p = TrafficFlowParams(0.2, 35.0, 30.0)
    vs = spawn_arrivals(p, {Role.OPV: 1.0}, 2000, RngStream(1, 1), velocity_spread=0.2)
    speeds = np.array([v.velocity for v in vs])
    assert speeds.min() >= 24.0 and speeds.max() <= 35.0


def test_prefill_places_vehicles_on_segment():
    vs = spawn_arrivals(TrafficFlowParams(), {Role.OPV: 1.0}, 10.0, RngStream(2, 1), RoadSegment(1000), prefill=True)
    pre = [v for v in vs if v.arrival_time == 0.0 and v.entry_position > 0]
    assert len(pre) > 50
    assert all(0 <= v.entry_position <= 1000 for v in pre)


def test_vehicle_kinematics_and_clipping():
    v = Vehicle(1, Role.OPV, 10.0, 20.0, 400.0)
    assert v.departure_time == pytest.approx(30.0)
    assert v.position(15.0) == pytest.approx(100.0)
    assert v.position(100.0) == 400.0 and v.position(0.0) == 0.0
    assert v.present(10.0) and not v.present(30.0)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(0, 100), st.floats(0.5, 40), st.floats(0, 399), st.floats(0, 200)
)
def test_position_stays_on_segment_while_present(arr, vel, entry, dt):
    v = Vehicle(0, Role.OPV, arr, vel, 400.0, entry_position=entry)
    t = arr + dt
    if v.present(t):
        assert 0.0 <= v.position(t) <= 400.0


def test_neighbors_same_position_and_range_boundary():
    a = Vehicle(1, Role.OPV, 0.0, 0.0, 1000, entry_position=100)
    b = Vehicle(2, Role.OPV, 0.0, 0.0, 1000, entry_position=100)
    c = Vehicle(3, Role.OPV, 0.0, 0.0, 1000, entry_position=251)
    d = Vehicle(4, Role.OPV, 0.0, 0.0, 1000, entry_position=250)
    vs = [a, b, c, d]
    assert neighbors_within(a, 1.0, 150, vs) == [b, d]
    assert neighbors_within(b, 1.0, 150, vs) == [a, d]
    assert c not in neighbors_within(a, 1.0, 150, vs)
    assert neighbors_within(c, 1.0, 150, [a, c]) == []


def test_platoon_neighbor_set_constant():
    platoon = [Vehicle(i, Role.OPV, 0.0, 15.0, 10000, entry_position=40.0 * i) for i in range(6)]
    head = platoon[0]
    sets = [[u.id for u in neighbors_within(head, t, 150, platoon)] for t in np.linspace(0, 300, 31)]
    assert all(s == sets[0] for s in sets)
    assert sets[0] == [1, 2, 3]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 50), st.floats(1, 30), st.floats(0, 900)), min_size=2, max_size=15), st.floats(0, 60))
def test_neighbors_symmetric(specs, t):
    vs = [Vehicle(i, Role.OPV, a, v, 1000.0, entry_position=x) for i, (a, v, x) in enumerate(specs)]
    present = [u for u in vs if u.present(t)]
    for a in present:
        for b in present:
            if a is not b:
                assert (b in neighbors_within(a, t, 150, vs)) == (a in neighbors_within(b, t, 150, vs))


def test_road_population_matches_scan():
    vs = spawn_arrivals(TrafficFlowParams(), {Role.OPV: 0.8, Role.UE: 0.2}, 200, RngStream(4, 1), RoadSegment(1000))
    pop = RoadPopulation()
    t = 120.0
    for v in vs:
        if v.present(t):
            pop.add(v)
    ue = next(v for v in pop if v.role == Role.UE)
    fast = pop.within(ue.position(t), t, 150, Role.OPV, exclude=ue)
    slow = neighbors_within(ue, t, 150, vs)
    assert [u.id for u in fast] == [u.id for u in slow]
    n = len(pop)
    pop.remove(fast[0])
    assert len(pop) == n - 1 and fast[0] not in pop


def test_ppp_zero_intensity():
    square = [(0, 0), (1000, 0), (1000, 1000), (0, 1000)]
    assert len(sample_ppp(0.0, square, RngStream(0, 0))) == 0


def test_ppp_negative_intensity_rejected():
    with pytest.raises(ValueError):
        sample_ppp(-1.0, [(0, 0), (1, 0), (1, 1)], RngStream(0, 0))


def test_ppp_homogeneous_mean_count():
    square = [(0, 0), (1000, 0), (1000, 1000), (0, 1000)]
    counts = [len(sample_ppp(1e-4, square, RngStream(s, 0))) for s in range(400)]
    # mean 100, sd of the mean 0.5
    assert abs(np.mean(counts) - 100) < 3 * 10 / math.sqrt(400) + 1e-9


def test_ppp_points_inside_cells_and_ratio():
    cells = [hex_cell(c, 200.0) for c in hex_centers(1, 2, 200.0)]
    area = 1.5 * math.sqrt(3) * 200.0**2
    tot = np.zeros(2)
    for s in range(200):
        pp = sample_ppp(np.array([1.0, 3.0]) * 20 / area, cells, RngStream(s, 0))
        tot += pp.counts()
        for i, cell in enumerate(cells):
            pts = pp.points[pp.cell_index == i]
            assert np.all(contains_xy(Polygon(cell), pts[:, 0], pts[:, 1]))
    assert tot[1] / tot[0] == pytest.approx(3.0, rel=0.08)


def _write(tmp_path, text):
    p = tmp_path / "trace.csv"
    p.write_text(text, encoding="utf-8")
    return p


def test_trace_single_row_is_constant(tmp_path):
    (v,) = import_trace(_write(tmp_path, "t,id,x,y,v\n5,a,12.5,3,0\n"))
    assert v.position(0) == v.position(100) == 12.5
    assert v.departure_time == math.inf


def test_trace_linear_interpolation(tmp_path):
    (v,) = import_trace(_write(tmp_path, "t,id,x,y,v\n0,a,0,0,20\n10,a,200,0,20\n"))
    assert v.position(5) == 100.0
    assert v.xy(2.5) == (50.0, 0.0)


def test_trace_out_of_order_names_line(tmp_path):
    with pytest.raises(TraceFormatError, match="line 4"):
        import_trace(_write(tmp_path, "t,id,x,y,v\n0,a,0,0,1\n5,a,5,0,1\n3,a,3,0,1\n"))


@pytest.mark.parametrize("body", ["t,id,x,y\n0,a,0,0\n", "t,id,x,y,v\n0,a,zero,0,1\n", "t,id,x,y,v\n0,a,0,0\n"])
def test_trace_malformed(tmp_path, body):
    with pytest.raises(TraceFormatError):
        import_trace(_write(tmp_path, body))


def test_longer_horizon_only_appends_vehicles():
    p = TrafficFlowParams(0.2, 35.0, 15.0)
    mix = {Role.OPV: 0.05, "other": 0.95}
    short = spawn_arrivals(p, mix, 300.0, RngStream(6, 1), RoadSegment(400), prefill=True)
    long = spawn_arrivals(p, mix, 900.0, RngStream(6, 1), RoadSegment(400), prefill=True)
    key = lambda v: (v.id, v.role, v.arrival_time, v.velocity, v.entry_position)
    assert [key(v) for v in short] == [key(v) for v in long[: len(short)]]
    assert len(long) > len(short)
