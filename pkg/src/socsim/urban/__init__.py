from .gravity import GravityParams, gravity_probabilities, gravity_select
from .dynamics import IdmParams, LaneNeighbors, MobilParams, idm_acceleration, mobil_lane_change
from .network import Junction, Lane, Poi, Aoi, RoadNetwork, generate_grid_city
from .world import BusLine, Position, Route, TripRecord, UnknownAgent, UrbanSpace, VehicleState

__all__ = [
    "GravityParams", "gravity_probabilities", "gravity_select",
    "IdmParams", "LaneNeighbors", "MobilParams", "idm_acceleration", "mobil_lane_change",
    "Junction", "Lane", "Poi", "Aoi", "RoadNetwork", "generate_grid_city",
    "BusLine", "Position", "Route", "TripRecord", "UnknownAgent", "UrbanSpace",
    "VehicleState",
]
