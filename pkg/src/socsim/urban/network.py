"""Static urban infrastructure: junctions, roads, lanes, AOIs and POIs.

Real map data is consumed through a line-delimited JSON record format
(one object per line, a "kind" field naming the record type); a synthetic
grid-city generator produces the same structures for self-contained runs.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

POI_CATEGORIES = (
    "home", "office", "restaurant", "cafe", "park", "store",
    "gym", "school", "hospital", "cinema", "library", "bank",
)

WALK_SPEED = 1.4          # m/s on sidewalks
DEFAULT_SPEED_LIMIT = 30.0  # m/s (shared with the IDM desired-speed default)
SIGNAL_PHASE_SECONDS = 30.0

# Marginal monetary costs per mode, integer cents.
DRIVE_COST_PER_KM = 12
TAXI_BASE_FARE = 300
TAXI_COST_PER_KM = 150
BUS_FLAT_FARE = 150


@dataclass
class Junction:
    id: int
    x: float
    y: float
    # Two-phase fixed signal: phase 0 lets the north-south axis through,
    # phase 1 the east-west axis. Zero duration disables the signal.
    phase_seconds: float = SIGNAL_PHASE_SECONDS

    def green_axis(self, sim_time: float) -> str:
        if self.phase_seconds <= 0:
            return "both"
        return "ns" if int(sim_time // self.phase_seconds) % 2 == 0 else "ew"


@dataclass
class Lane:
    id: int
    road_id: int
    index: int                 # position among the road's parallel lanes
    length: float
    speed_limit: float
    start_junction: int
    end_junction: int
    sidewalk: bool = False
    predecessors: list[int] = field(default_factory=list)
    successors: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError(f"lane {self.id} has non-positive length")


@dataclass
class Road:
    id: int
    start_junction: int
    end_junction: int
    lane_ids: list[int]        # drive lanes, same direction
    sidewalk_id: int | None = None
    axis: str = "ew"           # which signal axis governs this approach


@dataclass
class Poi:
    id: int
    lane_id: int               # sidewalk lane carrying the entrance
    offset: float
    category: str
    attractiveness: float
    aoi_id: int

    def __post_init__(self):
        if self.attractiveness <= 0:
            raise ValueError(f"poi {self.id} needs positive attractiveness")


@dataclass
class Aoi:
    id: int
    name: str
    x: float
    y: float
    poi_ids: list[int] = field(default_factory=list)


class RoadNetwork:
    def __init__(self):
        self.junctions: dict[int, Junction] = {}
        self.roads: dict[int, Road] = {}
        self.lanes: dict[int, Lane] = {}
        self.pois: dict[int, Poi] = {}
        self.aois: dict[int, Aoi] = {}
        self._route_cache: dict[str, tuple] = {}

    # -- construction ------------------------------------------------------

    def add_junction(self, j: Junction) -> Junction:
        self.junctions[j.id] = j
        return j

    def add_road(self, road: Road, lanes: list[Lane]) -> Road:
        self.roads[road.id] = road
        for lane in lanes:
            self.lanes[lane.id] = lane
        self._route_cache.clear()
        return road

    def add_poi(self, poi: Poi) -> Poi:
        self.pois[poi.id] = poi
        self.aois[poi.aoi_id].poi_ids.append(poi.id)
        return poi

    def validate(self) -> None:
        for lane in self.lanes.values():
            for succ in lane.successors:
                if succ not in self.lanes:
                    raise ValueError(f"lane {lane.id} references missing successor {succ}")
        for poi in self.pois.values():
            lane = self.lanes[poi.lane_id]
            if not 0 <= poi.offset <= lane.length:
                raise ValueError(f"poi {poi.id} offset outside its lane")

    # -- geometry ----------------------------------------------------------

    def lane_xy(self, lane_id: int, offset: float) -> tuple[float, float]:
        lane = self.lanes[lane_id]
        a = self.junctions[lane.start_junction]
        b = self.junctions[lane.end_junction]
        t = 0.0 if lane.length == 0 else min(max(offset / lane.length, 0.0), 1.0)
        return a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t

    # -- routing -----------------------------------------------------------

    def _mode_graph(self, mode: str):
        """Junction graph for a travel mode: (dist_matrix, predecessors, road lookup)."""
        key = "walk" if mode == "walk" else "drive"
        if key in self._route_cache:
            return self._route_cache[key]
        ids = sorted(self.junctions)
        index = {j: i for i, j in enumerate(ids)}
        best: dict[tuple[int, int], float] = {}
        road_at: dict[tuple[int, int], Road] = {}
        for road in self.roads.values():
            if key == "walk":
                if road.sidewalk_id is None:
                    continue
                lane = self.lanes[road.sidewalk_id]
                w = lane.length / WALK_SPEED
            else:
                if not road.lane_ids:
                    continue
                lane = self.lanes[road.lane_ids[0]]
                w = lane.length / lane.speed_limit
            pair = (road.start_junction, road.end_junction)
            if pair not in best or w < best[pair]:
                best[pair] = w
                road_at[pair] = road
        n = len(ids)
        rows = [index[a] for a, _ in best]
        cols = [index[b] for _, b in best]
        weights = list(best.values())
        graph = csr_matrix((weights, (rows, cols)), shape=(n, n))
        dist, pred = dijkstra(graph, directed=True, return_predecessors=True)
        entry = (ids, index, dist, pred, road_at)
        self._route_cache[key] = entry
        return entry

    def junction_path(self, start: int, end: int, mode: str) -> list[int] | None:
        ids, index, dist, pred, _ = self._mode_graph(mode)
        i, j = index[start], index[end]
        if not np.isfinite(dist[i, j]):
            return None
        path = [j]
        while path[-1] != i:
            p = pred[i, path[-1]]
            if p < 0:
                return None
            path.append(p)
        return [ids[k] for k in reversed(path)]

    def junction_distance_seconds(self, start: int, end: int, mode: str) -> float:
        ids, index, dist, _, _ = self._mode_graph(mode)
        return float(dist[index[start], index[end]])

    def roads_along(self, junction_path: list[int], mode: str) -> list[Road]:
        _, _, _, _, road_at = self._mode_graph("walk" if mode == "walk" else "drive")
        return [road_at[(a, b)] for a, b in zip(junction_path, junction_path[1:])]

    def network_distance(self, from_lane: int, from_offset: float,
                         to_lane: int, to_offset: float, mode: str = "walk") -> float:
        """Shortest network distance in meters between two lane positions."""
        la, lb = self.lanes[from_lane], self.lanes[to_lane]
        if from_lane == to_lane:
            return abs(to_offset - from_offset)
        speed = WALK_SPEED if mode == "walk" else self.lanes[from_lane].speed_limit
        secs = self.junction_distance_seconds(la.end_junction, lb.start_junction, mode)
        if not math.isfinite(secs):
            return math.inf
        return (la.length - from_offset) + secs * speed + to_offset

    # -- line-delimited import/export ---------------------------------------

    def dump_records(self) -> list[dict]:
        recs: list[dict] = []
        for j in self.junctions.values():
            recs.append({"kind": "junction", "id": j.id, "x": j.x, "y": j.y,
                         "phase_seconds": j.phase_seconds})
        for a in self.aois.values():
            recs.append({"kind": "aoi", "id": a.id, "name": a.name, "x": a.x, "y": a.y})
        for r in self.roads.values():
            recs.append({"kind": "road", "id": r.id, "start": r.start_junction,
                         "end": r.end_junction, "lanes": r.lane_ids,
                         "sidewalk": r.sidewalk_id, "axis": r.axis})
        for l in self.lanes.values():
            recs.append({"kind": "lane", "id": l.id, "road": l.road_id, "index": l.index,
                         "length": l.length, "speed_limit": l.speed_limit,
                         "start": l.start_junction, "end": l.end_junction,
                         "sidewalk": l.sidewalk, "successors": l.successors,
                         "predecessors": l.predecessors})
        for p in self.pois.values():
            recs.append({"kind": "poi", "id": p.id, "lane": p.lane_id, "offset": p.offset,
                         "category": p.category, "attractiveness": p.attractiveness,
                         "aoi": p.aoi_id})
        return recs

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.dump_records():
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "RoadNetwork":
        net = cls()
        lanes_by_road: dict[int, list[Lane]] = {}
        roads: list[Road] = []
        pois: list[Poi] = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                kind = rec.pop("kind")
                if kind == "junction":
                    net.add_junction(Junction(**rec))
                elif kind == "aoi":
                    net.aois[rec["id"]] = Aoi(id=rec["id"], name=rec["name"],
                                              x=rec["x"], y=rec["y"])
                elif kind == "road":
                    roads.append(Road(id=rec["id"], start_junction=rec["start"],
                                      end_junction=rec["end"], lane_ids=rec["lanes"],
                                      sidewalk_id=rec.get("sidewalk"),
                                      axis=rec.get("axis", "ew")))
                elif kind == "lane":
                    lane = Lane(id=rec["id"], road_id=rec["road"], index=rec["index"],
                                length=rec["length"], speed_limit=rec["speed_limit"],
                                start_junction=rec["start"], end_junction=rec["end"],
                                sidewalk=rec["sidewalk"],
                                predecessors=rec.get("predecessors", []),
                                successors=rec.get("successors", []))
                    lanes_by_road.setdefault(lane.road_id, []).append(lane)
                elif kind == "poi":
                    pois.append(Poi(id=rec["id"], lane_id=rec["lane"], offset=rec["offset"],
                                    category=rec["category"],
                                    attractiveness=rec["attractiveness"], aoi_id=rec["aoi"]))
                else:
                    raise ValueError(f"unknown record kind {kind!r}")
        for road in roads:
            net.add_road(road, lanes_by_road.get(road.id, []))
        for poi in pois:
            net.add_poi(poi)
        net.validate()
        return net


def generate_grid_city(nx: int = 4, ny: int = 4, block: float = 400.0,
                       lanes_per_road: int = 2, pois_per_road: int = 3,
                       seed: int = 0, signal_phase: float = SIGNAL_PHASE_SECONDS,
                       speed_limit: float = DEFAULT_SPEED_LIMIT) -> RoadNetwork:
    """Synthetic grid city: nx*ny junctions, two one-way roads per street,
    sidewalks everywhere, log-normally attractive POIs, one AOI per block row.
    """
    rng = random.Random(seed)
    net = RoadNetwork()
    jid = {}
    for iy in range(ny):
        for ix in range(nx):
            j = Junction(id=iy * nx + ix, x=ix * block, y=iy * block,
                         phase_seconds=signal_phase)
            net.add_junction(j)
            jid[(ix, iy)] = j.id

    for iy in range(ny):
        aoi = Aoi(id=iy, name=f"district-{iy}", x=(nx - 1) * block / 2, y=iy * block)
        net.aois[aoi.id] = aoi

    next_road, next_lane, next_poi = 0, 0, 0
    categories = list(POI_CATEGORIES)

    def add_street(a: int, b: int, axis: str):
        nonlocal next_road, next_lane, next_poi
        ja, jb = net.junctions[a], net.junctions[b]
        length = math.hypot(jb.x - ja.x, jb.y - ja.y)
        lane_ids = []
        for k in range(lanes_per_road):
            lane_ids.append(next_lane)
            next_lane += 1
        sidewalk_id = next_lane
        next_lane += 1
        road = Road(id=next_road, start_junction=a, end_junction=b,
                    lane_ids=lane_ids, sidewalk_id=sidewalk_id, axis=axis)
        next_road += 1
        lanes = [Lane(id=lid, road_id=road.id, index=k, length=length,
                      speed_limit=speed_limit, start_junction=a, end_junction=b)
                 for k, lid in enumerate(lane_ids)]
        lanes.append(Lane(id=sidewalk_id, road_id=road.id, index=len(lane_ids),
                          length=length, speed_limit=WALK_SPEED,
                          start_junction=a, end_junction=b, sidewalk=True))
        net.add_road(road, lanes)
        aoi_id = min(ja.y, jb.y) // block if axis == "ns" else ja.y // block
        aoi_id = int(min(aoi_id, ny - 1))
        for _ in range(pois_per_road):
            cat = categories[next_poi % len(categories)]
            poi = Poi(id=next_poi, lane_id=sidewalk_id,
                      offset=rng.uniform(0.1, 0.9) * length, category=cat,
                      attractiveness=rng.lognormvariate(0.0, 0.5), aoi_id=aoi_id)
            net.add_poi(poi)
            next_poi += 1

    for iy in range(ny):
        for ix in range(nx):
            if ix + 1 < nx:
                add_street(jid[(ix, iy)], jid[(ix + 1, iy)], "ew")
                add_street(jid[(ix + 1, iy)], jid[(ix, iy)], "ew")
            if iy + 1 < ny:
                add_street(jid[(ix, iy)], jid[(ix, iy + 1)], "ns")
                add_street(jid[(ix, iy + 1)], jid[(ix, iy)], "ns")

    # Successor wiring: a lane continues into every drive lane leaving its
    # end junction (walkers use sidewalks the same way).
    leaving: dict[int, list[Lane]] = {}
    for lane in net.lanes.values():
        leaving.setdefault((lane.start_junction, lane.sidewalk), []).append(lane)
    for lane in net.lanes.values():
        for nxt in leaving.get((lane.end_junction, lane.sidewalk), []):
            if nxt.road_id == lane.road_id:
                continue
            lane.successors.append(nxt.id)
            nxt.predecessors.append(lane.id)

    net.validate()
    return net
