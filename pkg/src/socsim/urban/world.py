"""Discrete-time urban space: multi-modal movement over the road network.

One writer (the ticker) advances every vehicle and walker; readers get
wait-free versioned snapshots. Plan mutations are queued and applied at the
next tick boundary, so concurrent callers never race the integrator.
"""

from __future__ import annotations

import math
import threading
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field

import numpy as np

from ..util import stable_hash64
from . import kernels
from .dynamics import IdmParams, LaneNeighbors, MobilParams, VEHICLE_LENGTH, mobil_lane_change
from .gravity import GravityParams, gravity_select
from .network import (BUS_FLAT_FARE, DRIVE_COST_PER_KM, RoadNetwork, TAXI_BASE_FARE,
                      TAXI_COST_PER_KM, WALK_SPEED, generate_grid_city)

GAP_EPSILON = 0.1       # enforced minimum bumper-to-bumper gap, m
ARRIVE_TOLERANCE = 4.0  # how close to the target offset counts as arrived, m
ARRIVE_SPEED = 0.5      # drivers must have nearly stopped to count as arrived
BUS_DWELL_SECONDS = 20.0

MODES = ("drive", "walk", "bus", "taxi")

# Weather regimes scale the destination-search radius (scenario-configurable).
DEFAULT_WEATHER_RADIUS = {"clear": 1.0, "rain": 0.6, "storm": 0.25, "hurricane": 0.1}


class UnknownAgent(KeyError):
    pass


@dataclass(frozen=True)
class Position:
    lane: int
    offset: float
    x: float
    y: float
    moving: bool
    mode: str
    version: int


@dataclass(frozen=True)
class VehicleState:
    agent_id: str
    lane: int
    position: float
    speed: float
    acceleration: float
    mode: str


@dataclass
class Route:
    mode: str
    roads: list[int]
    lanes: list[int]
    distance_m: float
    time_s: float
    cost_cents: int

    @property
    def empty(self) -> bool:
        return not self.roads


@dataclass
class TripRecord:
    agent_id: str
    mode: str
    origin: tuple[int, float]
    dest: tuple[int, float]
    started: float
    ended: float | None = None
    poi_id: int | None = None


@dataclass
class _Leg:
    kind: str                   # walk | drive | bus_wait | bus_ride | taxi_wait | taxi_ride
    roads: list[int] = field(default_factory=list)
    dest_lane: int = -1
    dest_offset: float = 0.0
    line_id: int = -1
    stop_index: int = -1


@dataclass
class _Plan:
    agent_id: str
    legs: list[_Leg]
    leg_index: int = 0
    trip: TripRecord | None = None
    dest_poi: int | None = None


@dataclass
class BusLine:
    id: int
    roads: list[int]            # cyclic sequence of road ids
    stops: list[tuple[int, int, float]]  # (stop_index, road_id, offset)
    headway_s: float = 600.0
    dwell_s: float = BUS_DWELL_SECONDS


class _MovingPool:
    """Struct-of-arrays store for everything currently in motion."""

    _ARRAYS = ("lane", "pos", "speed", "accel", "walker", "active",
               "dest_road", "dest_off")

    def __init__(self, capacity: int = 256):
        self.n = 0
        self.aid: list[str | None] = [None] * capacity
        self.lane = np.full(capacity, -1, dtype=np.int64)
        self.pos = np.zeros(capacity, dtype=np.float64)
        self.speed = np.zeros(capacity, dtype=np.float64)
        self.accel = np.zeros(capacity, dtype=np.float64)
        self.walker = np.zeros(capacity, dtype=bool)
        self.active = np.zeros(capacity, dtype=bool)
        self.dest_road = np.full(capacity, -1, dtype=np.int64)
        self.dest_off = np.zeros(capacity, dtype=np.float64)
        self.rows: dict[str, int] = {}
        self._free: list[int] = list(range(capacity - 1, -1, -1))

    def add(self, aid: str, lane: int, pos: float, speed: float, walker: bool) -> int:
        if not self._free:
            old = len(self.active)
            grow = old
            self.aid.extend([None] * grow)
            for name in self._ARRAYS:
                arr = getattr(self, name)
                setattr(self, name, np.concatenate([arr, np.zeros(grow, dtype=arr.dtype)]))
            self.lane[old:] = -1
            self.dest_road[old:] = -1
            self._free = list(range(old + grow - 1, old - 1, -1))
        row = self._free.pop()
        self.aid[row] = aid
        self.lane[row] = lane
        self.pos[row] = pos
        self.speed[row] = speed
        self.walker[row] = walker
        self.active[row] = True
        self.rows[aid] = row
        self.n += 1
        return row

    def remove(self, aid: str) -> None:
        row = self.rows.pop(aid)
        self.active[row] = False
        self.lane[row] = -1
        self.dest_road[row] = -1
        self.aid[row] = None
        self._free.append(row)
        self.n -= 1


class UrbanSpace:
    def __init__(self, network: RoadNetwork | None = None,
                 idm: IdmParams | None = None, mobil: MobilParams | None = None,
                 gravity: GravityParams | None = None,
                 weather_radius: dict[str, float] | None = None,
                 taxi_count: int = 0, bus_lines: list[BusLine] | None = None,
                 record_trajectories: bool = False):
        self.net = network or generate_grid_city()
        self.idm = idm or IdmParams()
        self.mobil = mobil or MobilParams()
        self.gravity = gravity or GravityParams()
        self.weather = "clear"
        self.weather_radius = dict(DEFAULT_WEATHER_RADIUS)
        if weather_radius:
            self.weather_radius.update(weather_radius)
        self.time = 0.0
        self.version = 0

        self._pool = _MovingPool()
        self._parked: dict[str, tuple] = {}      # aid -> ("lane", lane, off) | ("riding", carrier)
        self._plans: dict[str, _Plan] = {}
        self._pending: list[tuple[str, object, str]] = []
        self._pending_lock = threading.Lock()
        self._home: dict[str, tuple[int, float]] = {}

        self.trips: list[TripRecord] = []
        self._trip_starts: list[float] = []
        self.trajectory_rows: list[tuple] = [] if record_trajectories else None

        self._pois_by_cat: dict[str, list] = {}
        for poi in self.net.pois.values():
            self._pois_by_cat.setdefault(poi.category, []).append(poi)

        self.bus_lines = {line.id: line for line in (bus_lines or [])}
        self._bus_state: dict[str, dict] = {}
        self._bus_spawn_clock: dict[int, float] = {lid: 0.0 for lid in self.bus_lines}
        self._bus_counter = 0
        self._waiting_riders: dict[tuple[int, int], list[str]] = {}

        self._taxis: dict[int, dict] = {}
        self._taxi_queue: list[tuple[str, int, float]] = []
        self._lane_head: dict[int, float] = {}
        for k in range(taxi_count):
            lane = self._some_drive_lane(k)
            self._taxis[k] = {"state": "idle", "lane": lane.id,
                              "offset": lane.length / 2, "rider": None}

        self._build_lane_tables()
        self._snapshot_parked = self._parked
        self._snapshot_rows = dict(self._pool.rows)
        self._publish_snapshot()

    def _build_lane_tables(self) -> None:
        """Dense lookup arrays so the tick never walks Python objects per vehicle."""
        net = self.net
        n_lanes = max(net.lanes) + 1 if net.lanes else 1
        n_juncs = max(net.junctions) + 1 if net.junctions else 1
        self._lane_len_arr = np.ones(n_lanes)
        self._lane_road_arr = np.full(n_lanes, -1, dtype=np.int64)
        self._lane_endj_arr = np.zeros(n_lanes, dtype=np.int64)
        self._lane_axis_arr = np.zeros(n_lanes, dtype=np.int8)
        self._j_phase_arr = np.zeros(n_juncs)
        for j in net.junctions.values():
            self._j_phase_arr[j.id] = j.phase_seconds
        for lane in net.lanes.values():
            self._lane_len_arr[lane.id] = lane.length
            self._lane_road_arr[lane.id] = lane.road_id
            self._lane_endj_arr[lane.id] = lane.end_junction
            self._lane_axis_arr[lane.id] = 1 if net.roads[lane.road_id].axis == "ns" else 0

    def _red_lanes(self) -> np.ndarray:
        """Boolean "approach is red" per lane id, for the current sim time."""
        phase = self._j_phase_arr
        with np.errstate(divide="ignore", invalid="ignore"):
            green_ns = (np.floor_divide(self.time, np.where(phase > 0, phase, 1.0))
                        .astype(np.int64) % 2) == 0
        governed = phase[self._lane_endj_arr] > 0
        lane_green_ns = green_ns[self._lane_endj_arr]
        is_ns = self._lane_axis_arr == 1
        return governed & (lane_green_ns != is_ns)

    # -- registration and queries -------------------------------------------

    def _some_drive_lane(self, k: int):
        drive = [l for l in self.net.lanes.values() if not l.sidewalk]
        return drive[k % len(drive)]

    def register_agent(self, agent_id: str, home_poi_id: int | None = None) -> None:
        if home_poi_id is None:
            homes = self._pois_by_cat.get("home") or list(self.net.pois.values())
            poi = homes[stable_hash64("home", agent_id) % len(homes)]
        else:
            poi = self.net.pois[home_poi_id]
        self._home[agent_id] = (poi.lane_id, poi.offset)
        self._parked = {**self._parked, agent_id: ("lane", poi.lane_id, poi.offset)}
        self._publish_snapshot()

    def home_of(self, agent_id: str) -> tuple[int, float]:
        return self._home[agent_id]

    def snapshot(self):
        return self._snap

    def _publish_snapshot(self) -> None:
        pool = self._pool
        self._snap = (self.version, self._parked, dict(pool.rows),
                      pool.lane.copy(), pool.pos.copy(), pool.walker.copy(), self.time)

    def get_agent_position(self, agent_id: str) -> Position:
        version, parked, rows, lane, pos, walker, _ = self._snap
        seen = set()
        aid = agent_id
        while True:
            if aid in rows:
                l, p = int(lane[rows[aid]]), float(pos[rows[aid]])
                mode = "walk" if walker[rows[aid]] else "drive"
                x, y = self.net.lane_xy(l, p)
                return Position(l, p, x, y, True, mode if aid == agent_id else "riding",
                                version)
            entry = parked.get(aid)
            if entry is None:
                raise UnknownAgent(agent_id)
            if entry[0] == "riding" and entry[1] not in seen:
                seen.add(entry[1])
                aid = entry[1]
                continue
            _, l, p = entry
            x, y = self.net.lane_xy(l, p)
            return Position(l, p, x, y, False, "parked", version)

    def agent_known(self, agent_id: str) -> bool:
        return agent_id in self._home or agent_id in self._parked

    # -- destination choice ---------------------------------------------------

    def destination_candidates(self, agent_id: str, category: str,
                               radius_m: float) -> list[tuple]:
        """POIs of a category within the weather-scaled radius, with distances."""
        position = self.get_agent_position(agent_id)
        radius = radius_m * self.weather_radius.get(self.weather, 1.0)
        out = []
        for poi in self._pois_by_cat.get(category, ()):
            d = self.net.network_distance(position.lane, position.offset,
                                          poi.lane_id, poi.offset, mode="walk")
            if 0.0 < d <= radius:
                out.append((poi, d))
        return out

    def choose_destination(self, agent_id: str, category: str, radius_m: float, rng):
        cands = self.destination_candidates(agent_id, category, radius_m)
        if not cands:
            return None
        poi, _ = gravity_select(cands, self.gravity, rng)
        return poi

    # -- route planning -------------------------------------------------------

    def plan_route(self, origin: tuple[int, float], dest: tuple[int, float],
                   mode: str) -> Route | None:
        """Minimal expected-time route; None when the destination is unreachable."""
        if mode not in MODES:
            raise ValueError(f"unsupported mode {mode!r}")
        graph_mode = "walk" if mode == "walk" else "drive"
        o_lane, o_off = origin
        d_lane, d_off = dest
        lo, ld = self.net.lanes[o_lane], self.net.lanes[d_lane]
        if o_lane == d_lane and d_off >= o_off:
            dist = d_off - o_off
            return self._route_result(mode, [], dist)
        jpath = self.net.junction_path(lo.end_junction, ld.start_junction, graph_mode)
        if jpath is None:
            return None
        roads = self.net.roads_along(jpath, graph_mode)
        dist = (lo.length - o_off) + sum(
            self.net.lanes[r.lane_ids[0] if graph_mode == "drive" else r.sidewalk_id].length
            for r in roads) + d_off
        road_ids = [lo.road_id] + [r.id for r in roads] + [ld.road_id]
        # Collapse the duplicate when origin or destination road is on the path.
        deduped = [road_ids[0]]
        for rid in road_ids[1:]:
            if rid != deduped[-1]:
                deduped.append(rid)
        return self._route_result(mode, deduped, dist)

    def _route_result(self, mode: str, roads: list[int], dist: float) -> Route:
        speed = WALK_SPEED if mode == "walk" else self.idm.v0
        time_s = dist / speed
        if mode == "walk":
            cost = 0
        elif mode == "drive":
            cost = int(round(dist / 1000.0 * DRIVE_COST_PER_KM))
        elif mode == "taxi":
            cost = TAXI_BASE_FARE + int(round(dist / 1000.0 * TAXI_COST_PER_KM))
        else:
            cost = BUS_FLAT_FARE
        lanes = []
        for rid in roads:
            road = self.net.roads[rid]
            lanes.append(road.sidewalk_id if mode == "walk" else road.lane_ids[0])
        return Route(mode=mode, roads=roads, lanes=lanes, distance_m=dist,
                     time_s=time_s, cost_cents=cost)

    # -- plan mutations (queued, applied at the next tick boundary) ------------

    def set_agent_plan(self, agent_id: str, dest, mode: str = "walk") -> None:
        """Queue a travel plan. dest is a poi id or a (lane, offset) pair."""
        if not self.agent_known(agent_id):
            raise UnknownAgent(agent_id)
        if mode not in MODES:
            raise ValueError(f"unsupported mode {mode!r}")
        with self._pending_lock:
            self._pending.append((agent_id, dest, mode))

    def apply_pending_plans(self) -> None:
        with self._pending_lock:
            pending, self._pending = self._pending, []
        for agent_id, dest, mode in pending:
            self._start_plan(agent_id, dest, mode)

    def _dest_position(self, dest, mode: str) -> tuple[int, float, int | None]:
        if isinstance(dest, int):
            poi = self.net.pois[dest]
            lane_id, off, poi_id = poi.lane_id, poi.offset, poi.id
        else:
            lane_id, off = dest
            poi_id = None
        lane = self.net.lanes[lane_id]
        if mode != "walk" and lane.sidewalk:
            road = self.net.roads[lane.road_id]
            if road.lane_ids:
                lane_id = road.lane_ids[0]
        elif mode == "walk" and not lane.sidewalk:
            road = self.net.roads[lane.road_id]
            if road.sidewalk_id is not None:
                lane_id = road.sidewalk_id
        off = min(off, self.net.lanes[lane_id].length)
        return lane_id, off, poi_id

    def _current_position_for(self, agent_id: str, mode: str) -> tuple[int, float]:
        pos = self.get_agent_position(agent_id)
        lane = self.net.lanes[pos.lane]
        lane_id, off = pos.lane, pos.offset
        if mode != "walk" and lane.sidewalk:
            road = self.net.roads[lane.road_id]
            if road.lane_ids:
                lane_id = road.lane_ids[0]
        elif mode == "walk" and not lane.sidewalk:
            road = self.net.roads[lane.road_id]
            if road.sidewalk_id is not None:
                lane_id = road.sidewalk_id
        return lane_id, min(off, self.net.lanes[lane_id].length)

    def _start_plan(self, agent_id: str, dest, mode: str) -> None:
        if agent_id in self._plans:
            return  # one trip at a time; the new plan is dropped
        d_lane, d_off, poi_id = self._dest_position(dest, mode)
        if mode == "taxi":
            self._start_taxi_plan(agent_id, d_lane, d_off, poi_id)
            return
        if mode == "bus":
            if not self._start_bus_plan(agent_id, d_lane, d_off, poi_id):
                mode = "walk"
                d_lane, d_off, poi_id = self._dest_position(dest, mode)
            else:
                return
        o_lane, o_off = self._current_position_for(agent_id, mode)
        route = self.plan_route((o_lane, o_off), (d_lane, d_off), mode)
        if route is None:
            return
        trip = TripRecord(agent_id=agent_id, mode=mode, origin=(o_lane, o_off),
                          dest=(d_lane, d_off), started=self.time, poi_id=poi_id)
        if route.empty and abs(d_off - o_off) <= ARRIVE_TOLERANCE:
            trip.ended = self.time
            self._record_trip(trip)
            return
        leg = _Leg(kind=mode, roads=route.roads, dest_lane=d_lane, dest_offset=d_off)
        plan = _Plan(agent_id=agent_id, legs=[leg], trip=trip, dest_poi=poi_id)
        self._plans[agent_id] = plan
        self._record_trip(trip)
        self._enter_leg(agent_id, plan, o_lane, o_off)

    def _record_trip(self, trip: TripRecord) -> None:
        self.trips.append(trip)
        self._trip_starts.append(trip.started)

    def _enter_leg(self, agent_id: str, plan: _Plan, lane: int, off: float) -> None:
        leg = plan.legs[plan.leg_index]
        walker = leg.kind == "walk"
        parked = dict(self._parked)
        parked.pop(agent_id, None)
        self._parked = parked
        if leg.roads and self.net.lanes[lane].road_id != leg.roads[0]:
            leg.roads = [self.net.lanes[lane].road_id] + leg.roads
        speed = 0.0 if not walker else WALK_SPEED
        if not walker:
            road = self.net.roads[self.net.lanes[lane].road_id]
            if road.lane_ids:
                idx = stable_hash64(agent_id, "lane") % len(road.lane_ids)
                lane = road.lane_ids[idx]
        row = self._pool.add(agent_id, lane, off, speed, walker)
        self._pool.dest_road[row] = self.net.lanes[leg.dest_lane].road_id
        self._pool.dest_off[row] = leg.dest_offset

    def _park(self, agent_id: str, lane: int, off: float) -> None:
        if agent_id in self._pool.rows:
            self._pool.remove(agent_id)
        self._parked = {**self._parked, agent_id: ("lane", lane, off)}

    # -- taxis -----------------------------------------------------------------

    def dispatch_taxi(self, origin: tuple[int, float], now: float | None = None,
                      rider: str | None = None) -> int | None:
        """Assign the nearest idle taxi (network distance, ties to lowest id).

        Returns the taxi id, or None when every taxi is busy (the request is
        queued and served as taxis free up).
        """
        idle = [(tid, t) for tid, t in sorted(self._taxis.items())
                if t["state"] == "idle"]
        if not idle:
            if rider is not None:
                self._taxi_queue.append((rider, *origin))
            return None
        best_tid, best_d = None, math.inf
        for tid, taxi in idle:
            d = self.net.network_distance(taxi["lane"], taxi["offset"],
                                          origin[0], origin[1], mode="drive")
            if d < best_d - 1e-9:
                best_tid, best_d = tid, d
        return best_tid

    def _start_taxi_plan(self, agent_id: str, d_lane: int, d_off: float,
                         poi_id: int | None) -> None:
        o_lane, o_off = self._current_position_for(agent_id, "taxi")
        trip = TripRecord(agent_id=agent_id, mode="taxi", origin=(o_lane, o_off),
                          dest=(d_lane, d_off), started=self.time, poi_id=poi_id)
        self._record_trip(trip)
        plan = _Plan(agent_id=agent_id,
                     legs=[_Leg(kind="taxi_wait", dest_lane=o_lane, dest_offset=o_off),
                           _Leg(kind="taxi_ride", dest_lane=d_lane, dest_offset=d_off)],
                     trip=trip, dest_poi=poi_id)
        self._plans[agent_id] = plan
        tid = self.dispatch_taxi((o_lane, o_off), rider=agent_id)
        if tid is not None:
            self._assign_taxi(tid, agent_id, o_lane, o_off)

    def _assign_taxi(self, tid: int, rider: str, p_lane: int, p_off: float) -> None:
        taxi = self._taxis[tid]
        taxi["state"] = "to_pickup"
        taxi["rider"] = rider
        taxi["pickup"] = (p_lane, p_off)
        aid = f"taxi-{tid}"
        route = self.plan_route((taxi["lane"], taxi["offset"]), (p_lane, p_off), "drive")
        leg = _Leg(kind="drive", roads=route.roads if route else [],
                   dest_lane=p_lane, dest_offset=p_off)
        self._plans[aid] = _Plan(agent_id=aid, legs=[leg])
        self._parked = {**self._parked, aid: ("lane", taxi["lane"], taxi["offset"])}
        self._home.setdefault(aid, (taxi["lane"], taxi["offset"]))
        self._enter_leg(aid, self._plans[aid], taxi["lane"], taxi["offset"])

    def _taxi_by_vehicle(self, aid: str):
        return self._taxis[int(aid.split("-", 1)[1])]

    # -- buses -------------------------------------------------------------------

    def _start_bus_plan(self, agent_id: str, d_lane: int, d_off: float,
                        poi_id: int | None) -> bool:
        if not self.bus_lines:
            return False
        o_lane, o_off = self._current_position_for(agent_id, "walk")
        o_road = self.net.lanes[o_lane].road_id
        d_road = self.net.lanes[d_lane].road_id
        for line in self.bus_lines.values():
            on = [s for s in line.stops if s[1] == o_road]
            off_stops = [s for s in line.stops if s[1] == d_road]
            if not on or not off_stops:
                continue
            board, alight = on[0], off_stops[0]
            if board[0] == alight[0]:
                continue
            trip = TripRecord(agent_id=agent_id, mode="bus", origin=(o_lane, o_off),
                              dest=(d_lane, d_off), started=self.time, poi_id=poi_id)
            self._record_trip(trip)
            board_lane = self.net.roads[board[1]].sidewalk_id
            legs = [
                _Leg(kind="walk", roads=[], dest_lane=board_lane, dest_offset=board[2]),
                _Leg(kind="bus_wait", line_id=line.id, stop_index=board[0],
                     dest_lane=board_lane, dest_offset=board[2]),
                _Leg(kind="bus_ride", line_id=line.id, stop_index=alight[0],
                     dest_lane=self.net.roads[alight[1]].sidewalk_id,
                     dest_offset=alight[2]),
                _Leg(kind="walk", roads=[], dest_lane=d_lane, dest_offset=d_off),
            ]
            route = self.plan_route((o_lane, o_off), (board_lane, board[2]), "walk")
            if route is None:
                continue
            legs[0].roads = route.roads
            plan = _Plan(agent_id=agent_id, legs=legs, trip=trip, dest_poi=poi_id)
            self._plans[agent_id] = plan
            self._enter_leg(agent_id, plan, o_lane, o_off)
            return True
        return False

    def _spawn_buses(self, dt: float) -> None:
        for lid, line in self.bus_lines.items():
            self._bus_spawn_clock[lid] -= dt
            if self._bus_spawn_clock[lid] > 0:
                continue
            self._bus_spawn_clock[lid] = line.headway_s
            aid = f"bus-{lid}-{self._bus_counter}"
            self._bus_counter += 1
            first = self.net.roads[line.roads[0]]
            lane = self.net.lanes[first.lane_ids[0]]
            stops = sorted(line.stops)
            self._bus_state[aid] = {"line": lid, "stop_cursor": 0, "dwell": 0.0,
                                    "stops": stops, "riders": []}
            last_stop = stops[-1]
            leg = _Leg(kind="drive", roads=list(line.roads),
                       dest_lane=self.net.roads[last_stop[1]].lane_ids[0],
                       dest_offset=last_stop[2])
            self._plans[aid] = _Plan(agent_id=aid, legs=[leg])
            self._parked = {**self._parked, aid: ("lane", lane.id, 0.0)}
            self._home.setdefault(aid, (lane.id, 0.0))
            self._enter_leg(aid, self._plans[aid], lane.id, 0.0)

    # -- the tick -----------------------------------------------------------------

    def tick(self, dt: float = 1.0) -> None:
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.apply_pending_plans()
        self._spawn_buses(dt)
        pool = self._pool
        act = np.flatnonzero(pool.active)
        if act.size:
            self._advance(act, dt)
        self._serve_taxi_queue()
        self.time += dt
        self.version += 1
        self._publish_snapshot()
        if self.trajectory_rows is not None:
            version, _, rows, lane, pos, _, _ = self._snap
            for aid, row in rows.items():
                self.trajectory_rows.append((self.time, aid, int(lane[row]), float(pos[row])))

    def _advance(self, act: np.ndarray, dt: float) -> None:
        pool = self._pool
        lanes = pool.lane[act]
        pos = pool.pos[act]
        speed = pool.speed[act]
        walker = pool.walker[act]

        lane_len = self._lane_len_arr[lanes]
        roads = self._lane_road_arr[lanes]
        on_final = roads == pool.dest_road[act]
        # Stop targets: the destination offset on the final road, or a red
        # signal at the lane end, encoded as a virtual standing leader.
        stop_at = np.where(on_final, pool.dest_off[act], np.inf)
        red = self._red_lanes()[lanes] & ~on_final
        stop_at = np.where(red, lane_len - 0.5, stop_at)

        drive_idx = np.flatnonzero(~walker)
        accel = np.zeros(act.size)
        self._lane_head: dict[int, float] = {}
        if drive_idx.size:
            order = np.lexsort((pos[drive_idx], lanes[drive_idx]))
            d_sorted = drive_idx[order]
            l_s = lanes[d_sorted]
            p_s = pos[d_sorted]
            v_s = speed[d_sorted]
            same = np.zeros(d_sorted.size, dtype=bool)
            if d_sorted.size > 1:
                same[:-1] = l_s[:-1] == l_s[1:]
            lead_gap = np.full(d_sorted.size, np.inf)
            lead_v = np.zeros(d_sorted.size)
            if d_sorted.size > 1:
                gaps = p_s[1:] - p_s[:-1] - VEHICLE_LENGTH
                lead_gap[:-1] = np.where(same[:-1], gaps, np.inf)
                lead_v[:-1] = np.where(same[:-1], v_s[1:], 0.0)
            # Tail vehicle per lane, for safe entry checks at crossings.
            heads = np.flatnonzero(~np.concatenate(([False], same[:-1])))
            for h in heads:
                self._lane_head[int(l_s[h])] = float(p_s[h])
            stop_gap = stop_at[d_sorted] - p_s
            use_stop = stop_gap < lead_gap
            eff_gap = np.where(use_stop, np.maximum(stop_gap, 1e-6), lead_gap)
            eff_v = np.where(use_stop, 0.0, lead_v)
            p = self.idm
            a = kernels.idm_accel_batch(v_s, eff_v, eff_gap, p.v0, p.T, p.a_max,
                                        p.b, p.s0, p.delta, p.b_emergency)
            accel[d_sorted] = a
            self._lane_changes(act, d_sorted, lanes, pos, speed, lead_gap, lead_v)

        new_pos, new_speed = kernels.integrate_batch(pos, np.where(walker, WALK_SPEED, speed),
                                                     accel, dt)
        if walker.any():
            # Walkers hold at a red signal (or their target) instead of overshooting.
            w = np.flatnonzero(walker)
            cap = np.where(np.isfinite(stop_at[w]), stop_at[w], np.inf)
            new_pos[w] = np.minimum(new_pos[w], cap)
            new_speed[w] = WALK_SPEED

        drive2 = np.flatnonzero(~walker)
        if drive2.size > 1:
            # Check for spacing violations first; fix the rare chains in Python.
            order = np.lexsort((new_pos[drive2], lanes[drive2]))
            d_sorted = drive2[order]
            l_s = lanes[d_sorted]
            p_s = new_pos[d_sorted]
            same = l_s[:-1] == l_s[1:]
            bad = same & (p_s[1:] - p_s[:-1] < VEHICLE_LENGTH + GAP_EPSILON)
            if bad.any():
                for i in range(d_sorted.size - 2, -1, -1):
                    if l_s[i] == l_s[i + 1]:
                        limit = p_s[i + 1] - VEHICLE_LENGTH - GAP_EPSILON
                        if p_s[i] > limit:
                            p_s[i] = max(limit, 0.0)
                            new_speed[d_sorted[i]] = min(new_speed[d_sorted[i]],
                                                         new_speed[d_sorted[i + 1]])
                new_pos[d_sorted] = p_s

        pool.pos[act] = new_pos
        pool.speed[act] = new_speed
        pool.accel[act] = accel

        # Lane-end crossings, arrivals, and leg transitions (few per tick).
        crossed = new_pos >= lane_len - 1e-9
        arrived = (on_final & (new_pos >= pool.dest_off[act] - ARRIVE_TOLERANCE)
                   & (walker | (new_speed <= ARRIVE_SPEED)))
        flagged = [(int(act[i]), pool.aid[act[i]], float(lane_len[i]))
                   for i in np.flatnonzero(crossed | arrived)]
        for row, aid, length in flagged:
            # Rows can be freed and reused by transitions earlier in this loop.
            if aid is None or not pool.active[row] or pool.aid[row] != aid:
                continue
            plan = self._plans.get(aid)
            if plan is None:
                continue
            self._progress(aid, row, plan, length)

        self._bus_stops(dt)

    MAX_LANE_CHANGE_EVALS = 256

    def _lane_changes(self, act, d_sorted, lanes, pos, speed, lead_gap, lead_v) -> None:
        """MOBIL pass over constrained drivers; mutates pool.lane in place.

        Candidates are drivers with a pressing leader; at most
        MAX_LANE_CHANGE_EVALS are evaluated per tick on a rotating
        deterministic slice, so dense traffic cannot stall the tick.
        """
        pool = self._pool
        net = self.net
        p = self.idm
        want = np.flatnonzero((lead_gap < 1.5 * (p.s0 + speed[d_sorted] * p.T))
                              & (speed[d_sorted] < 0.9 * p.v0))
        if want.size == 0:
            return
        if want.size > self.MAX_LANE_CHANGE_EVALS:
            offset = self.version % want.size
            picks = (offset + np.arange(self.MAX_LANE_CHANGE_EVALS)) % want.size
            want = want[np.sort(picks)]
        lane_sorted = lanes[d_sorted]  # ascending within the (lane, pos) sort
        pos_sorted = pos[d_sorted]
        for k in want:
            i = d_sorted[k]
            lane_obj = net.lanes[int(lanes[i])]
            road = net.roads[lane_obj.road_id]
            for delta in (-1, 1):
                tgt_index = lane_obj.index + delta
                if not 0 <= tgt_index < len(road.lane_ids):
                    continue
                tgt = road.lane_ids[tgt_index]
                lo = np.searchsorted(lane_sorted, tgt, "left")
                hi = np.searchsorted(lane_sorted, tgt, "right")
                t_pos = pos_sorted[lo:hi]
                j = int(np.searchsorted(t_pos, pos[i]))
                leader_gap, leader_speed = math.inf, 0.0
                follower_gap, follower_speed = math.inf, 0.0
                if j < t_pos.size:
                    leader_gap = float(t_pos[j] - pos[i] - VEHICLE_LENGTH)
                    leader_speed = float(speed[d_sorted[lo + j]])
                if j > 0:
                    follower_gap = float(pos[i] - t_pos[j - 1] - VEHICLE_LENGTH)
                    follower_speed = float(speed[d_sorted[lo + j - 1]])
                if follower_gap <= 0 or leader_gap <= 0:
                    continue
                target = LaneNeighbors(leader_gap=leader_gap, leader_speed=leader_speed,
                                       follower_gap=follower_gap,
                                       follower_speed=follower_speed)
                current = LaneNeighbors(leader_gap=float(lead_gap[k]),
                                        leader_speed=float(lead_v[k]))
                if mobil_lane_change(float(speed[i]), current, target,
                                     self.idm, self.mobil):
                    pool.lane[i] = tgt
                    break

    def _progress(self, aid: str, row: int, plan: _Plan, lane_len: float) -> None:
        pool = self._pool
        net = self.net
        leg = plan.legs[plan.leg_index]
        lane_id = int(pool.lane[row])
        lane = net.lanes[lane_id]
        pos = float(pool.pos[row])

        dest_road = net.lanes[leg.dest_lane].road_id
        if lane.road_id == dest_road:
            if pos > lane_len:
                pool.pos[row] = lane_len
            done = pos >= leg.dest_offset - ARRIVE_TOLERANCE
            if done and (pool.walker[row] or pool.speed[row] <= ARRIVE_SPEED):
                self._leg_done(aid, plan, leg)
            return

        if pos < lane_len - 1e-9:
            return
        junction = net.junctions[lane.end_junction]
        if junction.green_axis(self.time) not in ("both", net.roads[lane.road_id].axis):
            # Discretization overshoot onto a red: hold at the stop line.
            pool.pos[row] = lane_len - 0.5
            pool.speed[row] = 0.0
            return
        # Crossed the junction: advance to the next road in the leg.
        try:
            at = leg.roads.index(lane.road_id)
        except ValueError:
            at = -1
        nxt_road_id = leg.roads[at + 1] if 0 <= at + 1 < len(leg.roads) else dest_road
        road = net.roads[nxt_road_id]
        if pool.walker[row]:
            nxt = road.sidewalk_id
        else:
            idx = min(lane.index, len(road.lane_ids) - 1)
            nxt = road.lane_ids[idx]
        if nxt is None or road.start_junction != lane.end_junction:
            pool.pos[row] = lane_len
            return
        entry_pos = min(pos - lane_len, net.lanes[nxt].length)
        if not pool.walker[row]:
            head = self._lane_head.get(nxt)
            if head is not None and head - entry_pos < VEHICLE_LENGTH + GAP_EPSILON:
                # The next lane's tail is too close: wait at the junction.
                pool.pos[row] = lane_len
                pool.speed[row] = 0.0
                return
            self._lane_head[nxt] = min(entry_pos, head) if head is not None else entry_pos
        pool.lane[row] = nxt
        pool.pos[row] = entry_pos

    def _leg_done(self, aid: str, plan: _Plan, leg: _Leg) -> None:
        self._park(aid, leg.dest_lane, leg.dest_offset)
        plan.leg_index += 1
        if plan.leg_index >= len(plan.legs):
            self._finish_plan(aid, plan)
            return
        nxt = plan.legs[plan.leg_index]
        if nxt.kind == "walk":
            o_lane, o_off = self._current_position_for(aid, "walk")
            route = self.plan_route((o_lane, o_off), (nxt.dest_lane, nxt.dest_offset), "walk")
            if route is None or (route.empty and
                                 abs(nxt.dest_offset - o_off) <= ARRIVE_TOLERANCE):
                plan.leg_index += 1
                if plan.leg_index >= len(plan.legs):
                    self._finish_plan(aid, plan)
                return
            nxt.roads = route.roads
            self._enter_leg(aid, plan, o_lane, o_off)
        elif nxt.kind == "bus_wait":
            self._waiting_riders.setdefault((nxt.line_id, nxt.stop_index), []).append(aid)
        elif nxt.kind == "taxi_ride":
            pass  # picked up by the taxi when it arrives
        elif nxt.kind in ("drive", "taxi_wait", "bus_ride"):
            o_lane, o_off = self._current_position_for(aid, "drive")
            self._enter_leg(aid, plan, o_lane, o_off)

    def _finish_plan(self, aid: str, plan: _Plan) -> None:
        self._plans.pop(aid, None)
        if plan.trip is not None:
            plan.trip.ended = self.time
        if aid.startswith("taxi-"):
            taxi = self._taxi_by_vehicle(aid)
            taxi["lane"], taxi["offset"] = plan.legs[-1].dest_lane, plan.legs[-1].dest_offset
            if taxi["state"] == "to_pickup":
                self._taxi_pickup(aid, taxi)
            else:
                self._taxi_dropoff(aid, taxi)
        elif aid.startswith("bus-"):
            state = self._bus_state.pop(aid, None)
            if state:
                # Terminal stop: everyone still aboard alights here.
                for rider in state["riders"]:
                    rplan = self._plans.get(rider)
                    if rplan is None:
                        continue
                    leg = rplan.legs[rplan.leg_index]
                    self._park(rider, leg.dest_lane, leg.dest_offset)
                    rplan.leg_index += 1
                    if rplan.leg_index >= len(rplan.legs):
                        self._finish_plan(rider, rplan)
                    else:
                        self._leg_done_entry(rider, rplan)
            parked = dict(self._parked)
            parked.pop(aid, None)
            self._parked = parked

    def _taxi_pickup(self, aid: str, taxi: dict) -> None:
        rider = taxi["rider"]
        plan = self._plans.get(rider)
        if plan is None:
            taxi["state"] = "idle"
            taxi["rider"] = None
            return
        ride = plan.legs[-1]
        plan.leg_index = len(plan.legs) - 1
        self._parked = {**self._parked, rider: ("riding", aid)}
        taxi["state"] = "to_dest"
        route = self.plan_route((taxi["lane"], taxi["offset"]),
                                (ride.dest_lane, ride.dest_offset), "drive")
        leg = _Leg(kind="drive", roads=route.roads if route else [],
                   dest_lane=ride.dest_lane, dest_offset=ride.dest_offset)
        self._plans[aid] = _Plan(agent_id=aid, legs=[leg])
        self._enter_leg(aid, self._plans[aid], taxi["lane"], taxi["offset"])

    def _taxi_dropoff(self, aid: str, taxi: dict) -> None:
        rider = taxi["rider"]
        taxi["state"] = "idle"
        taxi["rider"] = None
        plan = self._plans.pop(rider, None)
        if plan is not None:
            ride = plan.legs[-1]
            self._park(rider, ride.dest_lane, ride.dest_offset)
            if plan.trip is not None:
                plan.trip.ended = self.time

    def _serve_taxi_queue(self) -> None:
        while self._taxi_queue:
            rider, lane, off = self._taxi_queue[0]
            tid = self.dispatch_taxi((lane, off))
            if tid is None:
                return
            self._taxi_queue.pop(0)
            self._assign_taxi(tid, rider, lane, off)

    def _bus_stops(self, dt: float) -> None:
        for aid, state in list(self._bus_state.items()):
            if state["dwell"] > 0:
                state["dwell"] -= dt
                continue
            if aid not in self._pool.rows:
                continue
            row = self._pool.rows[aid]
            lane = self.net.lanes[int(self._pool.lane[row])]
            pos = float(self._pool.pos[row])
            stops = state["stops"]
            if state["stop_cursor"] >= len(stops):
                continue
            s_idx, s_road, s_off = stops[state["stop_cursor"]]
            if lane.road_id == s_road and pos >= s_off - ARRIVE_TOLERANCE:
                state["dwell"] = self.bus_lines[state["line"]].dwell_s
                state["stop_cursor"] += 1
                self._bus_exchange(aid, state, s_idx, s_road, s_off)

    def _bus_exchange(self, aid: str, state: dict, s_idx: int, s_road: int,
                      s_off: float) -> None:
        line_id = state["line"]
        # Alight.
        for rider in list(state["riders"]):
            plan = self._plans.get(rider)
            if plan is None:
                state["riders"].remove(rider)
                continue
            leg = plan.legs[plan.leg_index]
            if leg.kind == "bus_ride" and leg.stop_index == s_idx:
                state["riders"].remove(rider)
                self._park(rider, leg.dest_lane, leg.dest_offset)
                plan.leg_index += 1
                if plan.leg_index >= len(plan.legs):
                    self._finish_plan(rider, plan)
                else:
                    self._leg_done_entry(rider, plan)
        # Board.
        key = (line_id, s_idx)
        for rider in self._waiting_riders.pop(key, []):
            plan = self._plans.get(rider)
            if plan is None:
                continue
            plan.leg_index += 1  # bus_wait -> bus_ride
            state["riders"].append(rider)
            self._parked = {**self._parked, rider: ("riding", aid)}

    def _leg_done_entry(self, rider: str, plan: _Plan) -> None:
        nxt = plan.legs[plan.leg_index]
        o_lane, o_off = self._current_position_for(rider, "walk")
        route = self.plan_route((o_lane, o_off), (nxt.dest_lane, nxt.dest_offset), "walk")
        if route is None or (route.empty and abs(nxt.dest_offset - o_off) <= ARRIVE_TOLERANCE):
            plan.leg_index += 1
            if plan.leg_index >= len(plan.legs):
                self._finish_plan(rider, plan)
            return
        nxt.roads = route.roads
        self._enter_leg(rider, plan, o_lane, o_off)

    # -- analytics ----------------------------------------------------------------

    def travelers_in_window(self, t0: float, t1: float) -> set[str]:
        lo = bisect_left(self._trip_starts, t0)
        hi = bisect_right(self._trip_starts, t1)
        return {self.trips[i].agent_id for i in range(lo, hi)
                if not self.trips[i].agent_id.startswith(("bus-", "taxi-"))}

    def traveling_now(self) -> int:
        return sum(1 for aid in self._pool.rows
                   if not str(aid).startswith(("bus-", "taxi-")))

    def vehicle_states(self) -> list[VehicleState]:
        pool = self._pool
        out = []
        for aid, row in pool.rows.items():
            out.append(VehicleState(
                agent_id=aid, lane=int(pool.lane[row]), position=float(pool.pos[row]),
                speed=float(pool.speed[row]), acceleration=float(pool.accel[row]),
                mode="walk" if pool.walker[row] else "drive"))
        return out

    def min_same_lane_gap(self) -> float:
        """Smallest bumper-to-bumper gap between drive vehicles sharing a lane."""
        pool = self._pool
        act = np.flatnonzero(pool.active & ~pool.walker)
        if act.size < 2:
            return math.inf
        order = np.lexsort((pool.pos[act], pool.lane[act]))
        s = act[order]
        same = pool.lane[s][:-1] == pool.lane[s][1:]
        if not same.any():
            return math.inf
        gaps = pool.pos[s][1:] - pool.pos[s][:-1] - VEHICLE_LENGTH
        return float(gaps[same].min())
