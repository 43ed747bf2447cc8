"""Rule-based traffic: IDM car following with lane keeping."""

from __future__ import annotations

import math
from dataclasses import dataclass

VEHICLE_LENGTH = 4.5
VEHICLE_WIDTH = 1.8


@dataclass(frozen=True)
class IDMParams:
    s0: float = 2.0  # minimum gap [m]
    headway: float = 1.5  # time headway [s]
    a_max: float = 1.5  # maximum acceleration [m/s^2]
    b: float = 2.0  # comfortable deceleration [m/s^2]
    delta: float = 4.0


def idm_accel(v: float, v_des: float, gap: float | None, dv: float, p: IDMParams) -> float:
    """IDM acceleration. ``gap`` is bumper-to-bumper (None: free road); ``dv = v - v_leader``."""
    free = 1.0 - (v / max(v_des, 0.1)) ** p.delta
    if gap is None:
        return p.a_max * free
    s_star = p.s0 + max(0.0, v * p.headway + v * dv / (2.0 * math.sqrt(p.a_max * p.b)))
    return p.a_max * (free - (s_star / max(gap, 0.1)) ** 2)


@dataclass
class TrafficVehicle:
    vid: int
    lane: int
    s: float
    v: float
    v_des: float

    def copy(self) -> "TrafficVehicle":
        return TrafficVehicle(self.vid, self.lane, self.s, self.v, self.v_des)


class TrafficModel:
    """Advances lane-bound vehicles along the road's arc length.

    With ``ring_length`` set, lanes are periodic (used for standalone traffic
    tests); otherwise vehicles leaving ``exit_s`` are removed.
    """

    def __init__(self, vehicles: list[TrafficVehicle], idm: IDMParams = IDMParams(),
                 ring_length: float | None = None, exit_s: float = math.inf):
        self.vehicles = vehicles
        self.idm = idm
        self.ring_length = ring_length
        self.exit_s = exit_s

    def _leader_gap(self, veh: TrafficVehicle, lane_members: list[TrafficVehicle]):
        best_gap, best_v = None, 0.0
        for other in lane_members:
            if other is veh:
                continue
            ds = other.s - veh.s
            if self.ring_length is not None:
                ds %= self.ring_length
            if ds <= 0.0:
                continue
            gap = ds - VEHICLE_LENGTH
            if best_gap is None or gap < best_gap:
                best_gap, best_v = gap, other.v
        return best_gap, best_v

    def step(self, dt: float, obstacles: list[tuple[int, float, float]] = ()) -> None:
        """Advance all vehicles by ``dt``.

        ``obstacles`` are extra leaders ``(lane, s, v)`` (the ego vehicle) that
        traffic reacts to but does not move.
        """
        by_lane: dict[int, list[TrafficVehicle]] = {}
        for veh in self.vehicles:
            by_lane.setdefault(veh.lane, []).append(veh)
        accels = []
        for veh in self.vehicles:
            gap, v_lead = self._leader_gap(veh, by_lane[veh.lane])
            for lane, s, v in obstacles:
                if lane != veh.lane or s <= veh.s:
                    continue
                g = s - veh.s - VEHICLE_LENGTH
                if gap is None or g < gap:
                    gap, v_lead = g, v
            dv = veh.v - v_lead if gap is not None else 0.0
            accels.append(idm_accel(veh.v, veh.v_des, gap, dv, self.idm))
        for veh, acc in zip(self.vehicles, accels):
            v_new = max(0.0, veh.v + acc * dt)
            veh.s += 0.5 * (veh.v + v_new) * dt
            veh.v = v_new
            if self.ring_length is not None:
                veh.s %= self.ring_length
        if self.ring_length is None:
            self.vehicles = [v for v in self.vehicles if v.s <= self.exit_s]

    def min_gap(self) -> float:
        """Smallest bumper-to-bumper gap between same-lane vehicles."""
        best = math.inf
        by_lane: dict[int, list[TrafficVehicle]] = {}
        for veh in self.vehicles:
            by_lane.setdefault(veh.lane, []).append(veh)
        for members in by_lane.values():
            for veh in members:
                gap, _ = self._leader_gap(veh, members)
                if gap is not None:
                    best = min(best, gap)
        return best
