"""Rule-based parking expert: geometric arc plans, path tracking, pedestrian yield.

Plans are built in the goal slot's frame (x along the parked heading, y to its
left) from full-lock arcs and straights, then tracked with a curvature
feedback law on lateral and heading error. All emitted commands are snapped to
the token bin centres so they are exactly representable by the policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tokens
from .tokens import ControlCommand
from .world import (
    A_MAX, DT, FORWARD, PED_SIZE, REAR_TO_CENTER, REVERSE, STEER_MAX, WHEELBASE,
    VehiclePose, WorldState, check_collision, pose_errors, wrap_angle,
)

V_CRUISE = 1.0
DECEL_PROFILE = 1.0
SPEED_GAIN = 0.5
TRACK_LENGTH = 0.8
PARALLEL_BACKOFF = 1.0
CLEARANCE = 0.15
YIELD_MARGIN = 0.3
YIELD_LOOKAHEAD = 3.0
YIELD_STEPS = 10
END_TOL = 0.01


def arc_radius():
    """Rear-axle turning radius at full steering lock."""
    return WHEELBASE / math.tan(STEER_MAX)


def _parallel_alpha(lateral):
    return math.acos(1.0 - lateral / (2.0 * arc_radius()))


def parallel_entry_x(lateral=3.0):
    """Slot-frame x of the rear axle where the reverse S-curve begins."""
    end_x = -REAR_TO_CENTER - PARALLEL_BACKOFF
    return end_x + 2.0 * arc_radius() * math.sin(_parallel_alpha(lateral))


@dataclass(frozen=True)
class Segment:
    """Constant-steer piece of a rear-axle path, travelled ``length`` metres in ``direction``."""

    x0: float
    y0: float
    psi0: float
    direction: int
    steer: float
    length: float

    @property
    def curvature(self):
        # heading change per metre travelled
        return self.direction * math.tan(self.steer) / WHEELBASE

    def pose_at(self, s):
        c, d = self.curvature, self.direction
        if c == 0.0:
            return (self.x0 + d * s * math.cos(self.psi0), self.y0 + d * s * math.sin(self.psi0), self.psi0)
        psi = self.psi0 + c * s
        return (self.x0 + d * (math.sin(psi) - math.sin(self.psi0)) / c,
                self.y0 + d * (math.cos(self.psi0) - math.cos(psi)) / c, psi)

    def end(self):
        return self.pose_at(self.length)

    def project(self, x, y):
        """Unclamped travel coordinate of the point closest to (x, y)."""
        c, d = self.curvature, self.direction
        if c == 0.0:
            return d * ((x - self.x0) * math.cos(self.psi0) + (y - self.y0) * math.sin(self.psi0))
        k = d / c
        cx = self.x0 - k * math.sin(self.psi0)
        cy = self.y0 + k * math.cos(self.psi0)
        sgn = 1.0 if k > 0 else -1.0
        psi = math.atan2(sgn * (x - cx), -sgn * (y - cy))
        return wrap_angle(psi - self.psi0) / c

    def transformed(self, origin: VehiclePose):
        x, y = origin.to_world([self.x0, self.y0])[0]
        return Segment(float(x), float(y), wrap_angle(self.psi0 + origin.psi), self.direction, self.steer, self.length)


def _chain(start, pieces):
    segs, pose = [], start
    for direction, steer, length in pieces:
        if length <= 1e-9:
            continue
        seg = Segment(*pose, direction, steer, length)
        segs.append(seg)
        pose = seg.end()
    return segs


def plan_maneuver(world: WorldState):
    """Rear-axle path from the current ego pose into the goal slot, or None.

    An empty tuple means the ego is already parked.
    """
    goal = world.goal
    frame = goal.pose()
    pe, oe = pose_errors(world.ego.pose, goal)
    if pe < 0.05 and oe < 0.25:
        return ()
    rx, ry = world.ego.pose.rear_axle()
    lx, ly = frame.to_local([rx, ry])[0]
    lpsi = wrap_angle(world.ego.pose.psi - frame.psi)
    r = arc_radius()
    if goal.kind == "vertical":
        side = 1.0 if lpsi > 0 else -1.0
        if abs(wrap_angle(lpsi - side * math.pi / 2)) > 1e-3:
            return None
        approach = r - side * ly
        back = lx - r + REAR_TO_CENTER
        if approach < 0 or back < 0:
            return None
        local = _chain((lx, ly, lpsi), [
            (FORWARD, 0.0, approach),
            (REVERSE, side * STEER_MAX, r * math.pi / 2),
            (REVERSE, 0.0, back),
        ])
    else:
        if abs(lpsi) > 1e-3 or not 0 < ly < 2 * r:
            return None
        alpha = _parallel_alpha(ly)
        approach = parallel_entry_x(ly) - lx
        if approach < 0:
            return None
        local = _chain((lx, ly, lpsi), [
            (FORWARD, 0.0, approach),
            (REVERSE, -STEER_MAX, r * alpha),
            (REVERSE, STEER_MAX, r * alpha),
            (FORWARD, 0.0, PARALLEL_BACKOFF),
        ])
    return tuple(s.transformed(frame) for s in local)


def _centre_pose(rear_pose):
    return VehiclePose.from_rear_axle(*rear_pose)


def sample_path(path, step=0.1):
    """Footprint-centre poses along a path at roughly ``step`` spacing."""
    poses = []
    for seg in path:
        n = max(1, int(math.ceil(seg.length / step)))
        poses.extend(_centre_pose(seg.pose_at(seg.length * i / n)) for i in range(n + 1))
    return poses


def path_is_clear(path, statics, margin=CLEARANCE):
    if not path:
        return True
    boxes = list(statics)
    if not boxes:
        return True
    centres = np.array([[b.cx, b.cy] for b in boxes])
    for pose in sample_path(path):
        near = np.hypot(centres[:, 0] - pose.x, centres[:, 1] - pose.y) < 6.0
        if not near.any():
            continue
        fp = pose.footprint().inflate(margin)
        if any(check_collision(fp, boxes[i]) for i in np.flatnonzero(near)):
            return False
    return True


def _groups(path):
    """Index ranges of consecutive same-direction segments."""
    groups, start = [], 0
    for i in range(1, len(path) + 1):
        if i == len(path) or path[i].direction != path[start].direction:
            groups.append((start, i))
            start = i
    return groups


def corridor_blocked(world: WorldState, poses, margin=YIELD_MARGIN, steps=YIELD_STEPS):
    """True if any present pedestrian's constant-velocity extrapolation enters the corridor.

    Pedestrians are treated as points, so their half-size is added to the margin.
    """
    pos, vel, _, mask = world.pedestrian_arrays()
    if not mask.any():
        return False
    ks = np.arange(steps + 1) * DT
    pts = (pos[mask, None, :] + vel[mask, None, :] * ks[None, :, None]).reshape(-1, 2)
    for pose in poses:
        if pose.footprint().inflate(margin + PED_SIZE / 2).contains(pts).any():
            return True
    return False


def quantized(accel, steer, gear):
    accel = min(max(accel, -A_MAX), A_MAX)
    steer = min(max(steer, -STEER_MAX), STEER_MAX)
    return tokens.quantize(ControlCommand(accel, steer, gear))


class ExpertDriver:
    """Stateful tracker for one planned maneuver.

    The plan is made on the first call. ``yield_to_pedestrians=False`` disables the
    braking rule (used to show the rule matters).
    """

    def __init__(self, path=None, yield_to_pedestrians=True):
        self.path = path
        self.yield_to_pedestrians = yield_to_pedestrians
        self.seg = 0
        self.done = False
        self.last_yield = False

    def _ensure_plan(self, world):
        if self.path is None:
            path = plan_maneuver(world)
            if path is None:
                raise RuntimeError("no feasible maneuver from the current state")
            self.path = path
            self.groups = _groups(path)
        elif not hasattr(self, "groups"):
            self.groups = _groups(self.path)
        if not self.path:
            self.done = True

    def _group_of(self, i):
        for g in self.groups:
            if g[0] <= i < g[1]:
                return g
        raise IndexError(i)

    def lookahead_poses(self, world, s_now):
        poses = [world.ego.pose]
        budget = YIELD_LOOKAHEAD
        s = s_now
        for seg in self.path[self.seg:]:
            s = min(max(s, 0.0), seg.length)
            take = min(seg.length - s, budget)
            n = max(1, int(math.ceil(take / 0.5)))
            poses.extend(_centre_pose(seg.pose_at(s + take * i / n)) for i in range(1, n + 1))
            budget -= take
            if budget <= 0:
                break
            s = 0.0
        return poses

    def __call__(self, world: WorldState) -> ControlCommand:
        self._ensure_plan(world)
        ego = world.ego
        self.last_yield = False
        if self.done:
            return quantized(-A_MAX, 0.0, ego.gear)
        rx, ry = ego.pose.rear_axle()
        while True:
            seg = self.path[self.seg]
            s = seg.project(rx, ry)
            g0, g1 = self._group_of(self.seg)
            at_end = s >= seg.length - END_TOL
            if at_end and self.seg + 1 < g1:
                self.seg += 1  # same direction: roll straight into the next piece
                continue
            if at_end and ego.speed == 0.0:
                if g1 == len(self.path):
                    self.done = True
                    return quantized(-A_MAX, 0.0, ego.gear)
                self.seg = g1
                continue
            break
        gear = seg.direction
        rem = seg.length - s + sum(p.length for p in self.path[self.seg + 1:g1])
        if at_end:
            accel = -A_MAX
        else:
            # aim at the braking profile one tick ahead so stops land on the segment end
            ahead = max(rem - ego.speed * DT, 0.0)
            v_ref = min(V_CRUISE, math.sqrt(2.0 * DECEL_PROFILE * ahead))
            accel = SPEED_GAIN * (v_ref - ego.speed) / DT if gear == ego.gear else -A_MAX
        if self.yield_to_pedestrians and corridor_blocked(world, self.lookahead_poses(world, s)):
            accel = -A_MAX
            self.last_yield = True
        # the last piece only squares the heading; lateral offset costs little there
        final = self.seg == len(self.path) - 1 and len(self.path) > 1 and seg.length < 2.0
        return quantized(accel, self._steer(seg, s, rx, ry, ego.pose.psi, not final), gear)

    @staticmethod
    def _steer(seg, s, rx, ry, psi, lateral=True):
        if s > seg.length:
            # past the end: track the straight tangent extension
            ex, ey, epsi = seg.end()
            seg = Segment(ex, ey, epsi, seg.direction, 0.0, math.inf)
            s = seg.project(rx, ry)
        px, py, ppsi = seg.pose_at(max(s, 0.0))
        e = (rx - px) * -math.sin(ppsi) + (ry - py) * math.cos(ppsi)
        e_th = wrap_angle(psi - ppsi)
        d = seg.direction
        k1 = 1.0 / TRACK_LENGTH ** 2 if lateral else 0.0
        k2 = 2.0 / TRACK_LENGTH
        kappa = seg.curvature - k2 * math.sin(e_th) - d * k1 * e
        return math.atan(d * kappa * WHEELBASE)


def expert_policy(world: WorldState, driver: ExpertDriver | None = None) -> ControlCommand:
    """One expert command; pass a persistent ``driver`` to follow a plan across ticks."""
    return (driver or ExpertDriver())(world)
