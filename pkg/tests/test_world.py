import itertools
import math
import random
import threading

import numpy as np
import pytest

from socsim.urban import kernels
from socsim.urban.dynamics import IdmParams, VEHICLE_LENGTH
from socsim.urban.network import RoadNetwork, generate_grid_city
from socsim.urban.world import GAP_EPSILON, UnknownAgent, UrbanSpace


@pytest.fixture()
def city():
    net = generate_grid_city(nx=3, ny=3, block=300.0, seed=3)
    return UrbanSpace(network=net)


# -- positions and plans --------------------------------------------------------


def test_get_before_any_plan_returns_home(city):
    city.register_agent("a1")
    home_lane, home_off = city.home_of("a1")
    p = city.get_agent_position("a1")
    assert (p.lane, p.offset) == (home_lane, home_off)
    assert not p.moving


def test_unknown_agent_rejected(city):
    with pytest.raises(UnknownAgent):
        city.get_agent_position("ghost")
    with pytest.raises(UnknownAgent):
        city.set_agent_plan("ghost", (0, 0.0), "walk")


def test_set_plan_then_tick_moves_agent(city):
    city.register_agent("a1")
    poi = max(city.net.pois.values(),
              key=lambda p: city.net.network_distance(
                  *city.home_of("a1"), p.lane_id, p.offset))
    city.set_agent_plan("a1", poi.id, "drive")
    city.tick(1.0)
    p = city.get_agent_position("a1")
    assert p.moving
    origin_road = city.net.lanes[city.home_of("a1")[0]].road_id
    assert city.net.lanes[p.lane].road_id == origin_road


def test_tick_with_no_vehicles_is_noop(city):
    before = city.time
    city.tick(1.0)
    assert city.time == before + 1.0
    assert city.traveling_now() == 0


def test_tick_requires_positive_dt(city):
    with pytest.raises(ValueError):
        city.tick(0.0)


def test_walk_trip_completes_and_logs(city):
    city.register_agent("a1")
    cands = city.destination_candidates("a1", "restaurant", 5000)
    poi = cands[0][0]
    city.set_agent_plan("a1", poi.id, "walk")
    for _ in range(3000):
        city.tick(1.0)
        if "a1" not in city._plans:
            break
    assert "a1" not in city._plans
    assert len(city.trips) == 1
    trip = city.trips[0]
    assert trip.ended is not None and trip.mode == "walk"
    assert city.travelers_in_window(0, city.time) == {"a1"}


def test_weather_shrinks_candidate_radius(city):
    city.register_agent("a1")
    clear = len(city.destination_candidates("a1", "store", 2000))
    city.weather = "hurricane"
    shrunk = len(city.destination_candidates("a1", "store", 2000))
    assert shrunk <= clear


# -- free flow and platoons ------------------------------------------------------


def long_lane_world(length=100_000.0):
    net = RoadNetwork()
    from socsim.urban.network import Junction, Lane, Road

    net.add_junction(Junction(id=0, x=0, y=0, phase_seconds=0))
    net.add_junction(Junction(id=1, x=length, y=0, phase_seconds=0))
    lane = Lane(id=0, road_id=0, index=0, length=length, speed_limit=30.0,
                start_junction=0, end_junction=1)
    side = Lane(id=1, road_id=0, index=1, length=length, speed_limit=1.4,
                start_junction=0, end_junction=1, sidewalk=True)
    net.add_road(Road(id=0, start_junction=0, end_junction=1,
                      lane_ids=[0], sidewalk_id=1), [lane, side])
    from socsim.urban.network import Aoi, Poi

    net.aois[0] = Aoi(id=0, name="strip", x=0, y=0)
    net.add_poi(Poi(id=0, lane_id=1, offset=10.0, category="home",
                    attractiveness=1.0, aoi_id=0))
    net.add_poi(Poi(id=1, lane_id=1, offset=length - 10.0, category="office",
                    attractiveness=1.0, aoi_id=0))
    net.validate()
    return UrbanSpace(network=net)


def test_single_vehicle_free_flow_advances_v0(city):
    world = long_lane_world()
    world.register_agent("a1", home_poi_id=0)
    world.set_agent_plan("a1", 1, "drive")
    for _ in range(600):
        world.tick(1.0)
    p = world.idm
    row = world._pool.rows["a1"]
    # The approach to the desired speed is asymptotic; 600 s gets within mm/s.
    assert world._pool.speed[row] == pytest.approx(p.v0, abs=1e-3)
    before = world._pool.pos[row]
    world.tick(1.0)
    assert world._pool.pos[row] - before == pytest.approx(p.v0, abs=1e-3)


def platoon_oracle(v_lead, gap0, v0_follower, sim_seconds, dt, p: IdmParams):
    """Reference integration of the same car-following ODEs."""
    from socsim.urban.dynamics import idm_acceleration

    gap, v = gap0, v0_follower
    steps = int(round(sim_seconds / dt))
    for _ in range(steps):
        a = idm_acceleration(v, v_lead, gap, p)
        v_next = max(0.0, v + a * dt)
        if v + a * dt < 0 and a < 0:
            adv = -(v * v) / (2 * a)
        else:
            adv = v * dt + 0.5 * a * dt * dt
        gap += v_lead * dt - max(adv, 0.0)
        v = v_next
    return gap, v


def test_platoon_converges_to_equilibrium_gap():
    p = IdmParams()
    v_lead = 5.0
    target = p.s0 + v_lead * p.T  # 9.5 m

    # Oracle at dt = 0.01 must itself land on the equilibrium gap.
    gap_ref, v_ref = platoon_oracle(v_lead, 50.0, 0.0, 10_000.0, 0.01, p)
    assert gap_ref == pytest.approx(target, abs=0.1)
    assert v_ref == pytest.approx(v_lead, abs=1e-3)

    # The production kernels at dt = 1.0 over 10,000 ticks agree.
    pos = np.array([0.0, 50.0 + VEHICLE_LENGTH])
    vel = np.array([0.0, v_lead])
    for _ in range(10_000):
        gap = np.array([pos[1] - pos[0] - VEHICLE_LENGTH, math.inf])
        accel = kernels.idm_accel_batch(vel, np.array([v_lead, 0.0]), gap,
                                        p.v0, p.T, p.a_max, p.b, p.s0,
                                        p.delta, p.b_emergency)
        accel[1] = 0.0  # the leader is pinned at constant speed
        pos, vel = kernels.integrate_batch(pos, vel, accel, 1.0)
    final_gap = pos[1] - pos[0] - VEHICLE_LENGTH
    assert final_gap == pytest.approx(target, abs=0.1)
    assert final_gap == pytest.approx(gap_ref, abs=0.1)


def test_no_collisions_under_randomized_load():
    rng = random.Random(11)
    net = generate_grid_city(nx=3, ny=3, block=250.0, seed=5)
    world = UrbanSpace(network=net)
    pois = list(net.pois.values())
    for k in range(100):
        world.register_agent(f"v{k}")
        world.set_agent_plan(f"v{k}", rng.choice(pois).id, "drive")
    for t in range(2000):
        if t % 50 == 0:
            for k in range(100):
                if f"v{k}" not in world._plans:
                    world.set_agent_plan(f"v{k}", rng.choice(pois).id, "drive")
        world.tick(1.0)
        assert world.min_same_lane_gap() > 0.0


def test_tick_determinism():
    def trajectory():
        net = generate_grid_city(nx=3, ny=3, block=250.0, seed=5)
        world = UrbanSpace(network=net)
        rng = random.Random(1)
        pois = list(net.pois.values())
        for k in range(30):
            world.register_agent(f"v{k}")
            world.set_agent_plan(f"v{k}", rng.choice(pois).id, "drive")
        out = []
        for _ in range(300):
            world.tick(1.0)
            out.append((world._pool.pos[world._pool.active].round(9).tolist(),
                        world._pool.lane[world._pool.active].tolist()))
        return out

    assert trajectory() == trajectory()


# -- routing ------------------------------------------------------------------------


def test_route_same_origin_destination(city):
    route = city.plan_route((0, 10.0), (0, 10.0), "walk")
    assert route.empty
    assert route.cost_cents == 0
    assert route.time_s == 0


def test_route_two_lane_linear():
    world = long_lane_world()
    route = world.plan_route((0, 10.0), (0, 500.0), "drive")
    assert route.roads == []
    assert route.distance_m == pytest.approx(490.0)


def exhaustive_best_time(net, start_j, end_j, mode="drive"):
    """Brute-force enumeration of simple junction paths (small graphs only)."""
    out_roads: dict[int, list] = {}
    for road in net.roads.values():
        out_roads.setdefault(road.start_junction, []).append(road)

    def road_time(road):
        lane = net.lanes[road.lane_ids[0] if mode == "drive" else road.sidewalk_id]
        return lane.length / lane.speed_limit

    best = math.inf
    stack = [(start_j, 0.0, {start_j})]
    while stack:
        j, t, seen = stack.pop()
        if j == end_j:
            best = min(best, t)
            continue
        for road in out_roads.get(j, ()):
            nxt = road.end_junction
            if nxt in seen:
                continue
            stack.append((nxt, t + road_time(road), seen | {nxt}))
    return best


def test_route_avoids_slow_edge_iff_detour_is_faster():
    net = generate_grid_city(nx=3, ny=2, block=300.0, seed=2)
    # Slow down one straight-through road and check against enumeration.
    slow_road = next(r for r in net.roads.values()
                     if r.start_junction == 0 and r.end_junction == 1)
    for lane_id in slow_road.lane_ids:
        net.lanes[lane_id].speed_limit = 2.0
    net._route_cache.clear()
    secs = net.junction_distance_seconds(0, 2, "drive")
    assert secs == pytest.approx(exhaustive_best_time(net, 0, 2), rel=1e-9)
    path = net.junction_path(0, 2, "drive")
    assert 1 not in path  # detour beats crawling through the slow link


def test_unreachable_destination_returns_none():
    world = long_lane_world()
    # Nothing leads back from the end to the start on a single one-way lane.
    route = world.plan_route((0, 500.0), (0, 10.0), "drive")
    assert route is None


# -- taxis -----------------------------------------------------------------------------


def test_taxi_dispatch_prefers_nearest_and_breaks_ties_low_id():
    net = generate_grid_city(nx=3, ny=3, block=300.0, seed=3)
    world = UrbanSpace(network=net, taxi_count=0)
    lane = next(l for l in net.lanes.values() if not l.sidewalk)
    world._taxis = {
        7: {"state": "idle", "lane": lane.id, "offset": 50.0, "rider": None},
        3: {"state": "idle", "lane": lane.id, "offset": 50.0, "rider": None},
        5: {"state": "idle", "lane": lane.id, "offset": 200.0, "rider": None},
    }
    # Nearest wins.
    assert world.dispatch_taxi((lane.id, 210.0)) == 5
    # Equidistant 7 and 3: the lower id wins.
    assert world.dispatch_taxi((lane.id, 60.0)) == 3
    world._taxis = {}
    assert world.dispatch_taxi((lane.id, 60.0), rider="a1") is None
    assert world._taxi_queue == [("a1", lane.id, 60.0)]


def test_taxi_ride_end_to_end():
    net = generate_grid_city(nx=3, ny=3, block=300.0, seed=3)
    world = UrbanSpace(network=net, taxi_count=2)
    world.register_agent("a1")
    dest = max(net.pois.values(), key=lambda p: net.network_distance(
        *world.home_of("a1"), p.lane_id, p.offset))
    world.set_agent_plan("a1", dest.id, "taxi")
    for _ in range(3000):
        world.tick(1.0)
        if "a1" not in world._plans:
            break
    assert "a1" not in world._plans
    p = world.get_agent_position("a1")
    dx, dy = net.lane_xy(dest.lane_id, dest.offset)
    assert math.hypot(p.x - dx, p.y - dy) < 60.0
    assert all(t["state"] == "idle" for t in world._taxis.values())


# -- buses ------------------------------------------------------------------------------


def test_bus_line_carries_a_rider():
    from socsim.urban.world import BusLine

    net = generate_grid_city(nx=4, ny=1, block=300.0, seed=4, signal_phase=0)
    eastbound = [r for r in net.roads.values()
                 if r.axis == "ew" and r.start_junction < r.end_junction]
    eastbound.sort(key=lambda r: r.start_junction)
    stops = [(i, r.id, 150.0) for i, r in enumerate(eastbound)]
    line = BusLine(id=0, roads=[r.id for r in eastbound], stops=stops,
                   headway_s=120.0, dwell_s=5.0)
    world = UrbanSpace(network=net, bus_lines=[line])
    world.register_agent("a1", home_poi_id=min(
        p.id for p in net.pois.values()
        if net.lanes[p.lane_id].road_id == eastbound[0].id))
    dest = next(p for p in net.pois.values()
                if net.lanes[p.lane_id].road_id == eastbound[-1].id)
    world.set_agent_plan("a1", dest.id, "bus")
    assert "a1" in world._pending[0]
    for _ in range(4000):
        world.tick(1.0)
        if "a1" not in world._plans:
            break
    assert "a1" not in world._plans
    trip = world.trips[0]
    assert trip.mode == "bus" and trip.ended is not None


# -- snapshots under concurrency -----------------------------------------------------------


def test_concurrent_reads_see_consistent_versions():
    net = generate_grid_city(nx=3, ny=3, block=300.0, seed=3)
    world = UrbanSpace(network=net)
    rng = random.Random(0)
    pois = list(net.pois.values())
    for k in range(50):
        world.register_agent(f"v{k}")
        world.set_agent_plan(f"v{k}", rng.choice(pois).id, "drive")

    history = {}
    observed = []
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            p = world.get_agent_position("v0")
            observed.append((p.version, p.lane, round(p.offset, 9)))

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    p0 = world.get_agent_position("v0")
    history[p0.version] = (p0.lane, round(p0.offset, 9))
    for _ in range(200):
        world.tick(1.0)
        p = world.get_agent_position("v0")
        history[p.version] = (p.lane, round(p.offset, 9))
    stop.set()
    for t in threads:
        t.join()
    assert len(observed) > 1000
    for version, lane, off in observed:
        assert history[version] == (lane, off)


# -- import/export ---------------------------------------------------------------------------


def test_network_save_load_round_trip(tmp_path):
    net = generate_grid_city(nx=3, ny=2, block=250.0, seed=9)
    path = tmp_path / "map.jsonl"
    net.save(path)
    loaded = RoadNetwork.load(path)
    assert set(loaded.lanes) == set(net.lanes)
    assert set(loaded.pois) == set(net.pois)
    for lid, lane in net.lanes.items():
        other = loaded.lanes[lid]
        assert (other.length, other.speed_limit, sorted(other.successors)) == \
            (lane.length, lane.speed_limit, sorted(lane.successors))
    for pid, poi in net.pois.items():
        assert loaded.pois[pid].attractiveness == poi.attractiveness


def test_invalid_lane_rejected():
    from socsim.urban.network import Lane

    with pytest.raises(ValueError):
        Lane(id=0, road_id=0, index=0, length=0.0, speed_limit=10.0,
             start_junction=0, end_junction=1)
