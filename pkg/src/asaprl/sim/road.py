"""Lane-graph road geometry built from straight and circular-arc segments.

The reference line is the right curb; lane ``i`` is centered at lateral
offset ``(i + 0.5) * lane_width`` (offsets grow to the left).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _wrap(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Segment:
    s0: float
    length: float
    curvature: float
    x0: float
    y0: float
    h0: float

    def pose(self, u: float, d: float = 0.0) -> tuple[float, float, float]:
        k = self.curvature
        if k == 0.0:
            c, s = math.cos(self.h0), math.sin(self.h0)
            return self.x0 + u * c - d * s, self.y0 + u * s + d * c, self.h0
        h = self.h0 + k * u
        rho = 1.0 / k
        cx = self.x0 - math.sin(self.h0) * rho
        cy = self.y0 + math.cos(self.h0) * rho
        r = rho - d
        return cx + r * math.sin(h), cy - r * math.cos(h), _wrap(h)

    def project(self, x: float, y: float) -> tuple[float, float]:
        """Local (u, d) of a world point; u may fall outside [0, length]."""
        k = self.curvature
        if k == 0.0:
            c, s = math.cos(self.h0), math.sin(self.h0)
            dx, dy = x - self.x0, y - self.y0
            return dx * c + dy * s, -dx * s + dy * c
        rho = 1.0 / k
        cx = self.x0 - math.sin(self.h0) * rho
        cy = self.y0 + math.cos(self.h0) * rho
        qx, qy = x - cx, y - cy
        q = math.hypot(qx, qy)
        if k > 0:
            h, d = math.atan2(qx, -qy), rho - q
        else:
            h, d = math.atan2(-qx, qy), rho + q
        # angle swept along the turning direction, in [0, 2*pi)
        swept = ((h - self.h0) * math.copysign(1.0, k)) % (2.0 * math.pi)
        if swept > 2.0 * math.pi - 1e-9:
            swept = 0.0
        return swept / abs(k), d


class Road:
    """Sequence of connected segments with ``lanes`` parallel lanes."""

    def __init__(self, pieces: list[tuple[float, float]], lanes: int, lane_width: float = 3.5):
        if lanes < 1:
            raise ValueError("lane count must be >= 1")
        self.lanes = lanes
        self.lane_width = lane_width
        self.segments: list[Segment] = []
        x, y, h, s = 0.0, 0.0, 0.0, 0.0
        for length, curvature in pieces:
            if curvature != 0.0 and 1.0 / abs(curvature) <= lanes * lane_width:
                raise ValueError("arc radius too small for the road width")
            seg = Segment(s, length, curvature, x, y, h)
            self.segments.append(seg)
            x, y, h = seg.pose(length)
            s += length
        self.length = s

    @property
    def width(self) -> float:
        return self.lanes * self.lane_width

    def lane_center(self, lane: int) -> float:
        return (lane + 0.5) * self.lane_width

    def nearest_lane(self, d: float) -> int:
        return int(min(max(math.floor(d / self.lane_width), 0), self.lanes - 1))

    def _segment_at(self, s: float) -> Segment:
        for seg in reversed(self.segments):
            if s >= seg.s0:
                return seg
        return self.segments[0]

    def pose(self, s: float, d: float = 0.0) -> tuple[float, float, float]:
        """World pose at arc length ``s`` and lateral offset ``d``.

        Beyond either end the road is extended along its end tangent.
        """
        seg = self._segment_at(s)
        u = s - seg.s0
        if u > seg.length and seg is self.segments[-1]:
            ex, ey, eh = seg.pose(seg.length, d)
            extra = u - seg.length
            return ex + extra * math.cos(eh), ey + extra * math.sin(eh), eh
        return seg.pose(u, d)

    def heading(self, s: float) -> float:
        return self.pose(s)[2]

    def to_frenet(self, x: float, y: float) -> tuple[float, float]:
        best = None
        last = len(self.segments) - 1
        for i, seg in enumerate(self.segments):
            u, d = seg.project(x, y)
            lo = -math.inf if i == 0 else -1e-9
            hi = math.inf if i == last else seg.length + 1e-9
            if seg.curvature != 0.0 and (u < -1e-9 or u > seg.length + 1e-9):
                continue
            if lo <= u <= hi and (best is None or abs(d) < abs(best[1])):
                best = (seg.s0 + u, d)
        if best is None:
            # between arc ends and outside both neighbours: fall back to the nearest endpoint
            dists = [math.hypot(x - seg.x0, y - seg.y0) for seg in self.segments]
            seg = self.segments[int(np.argmin(dists))]
            u, d = seg.project(x, y)
            best = (seg.s0 + u, d)
        return best

    def polyline(self, d: float = 0.0, step: float = 1.0) -> np.ndarray:
        s = np.arange(0.0, self.length + step, step)
        return np.array([self.pose(si, d)[:2] for si in s])
