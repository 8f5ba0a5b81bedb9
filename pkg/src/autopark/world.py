"""Deterministic parking-lot simulator.

Poses are expressed at the centre of the vehicle footprint; the kinematics are
the rear-axle bicycle model, so the rear axle sits ``REAR_TO_CENTER`` metres
behind the pose point along the heading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

WHEELBASE = 2.9
CAR_LENGTH = 4.6
CAR_WIDTH = 1.9
REAR_OVERHANG = 0.85
REAR_TO_CENTER = CAR_LENGTH / 2 - REAR_OVERHANG
V_MAX = 4.0
A_MAX = 3.0
STEER_MAX = 0.61
DT = 0.1

PED_CAPACITY = 8
PED_SIZE = 0.5
PED_SPEED_MAX = 2.5
PED_SPEED_CAP = 1.8
PED_ACC_MAX = 0.6
PED_DESPAWN_RADIUS = 22.0

ATTEMPT_RADIUS = 7.0
FORWARD, REVERSE = 1, -1
KINDS = ("vertical", "parallel")


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    return math.pi if w == -math.pi else w


# -- geometry ------------------------------------------------------------------
@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    psi: float
    length: float
    width: float

    def axes(self):
        c, s = math.cos(self.psi), math.sin(self.psi)
        return np.array([c, s]), np.array([-s, c])

    def corners(self):
        u, n = self.axes()
        hl, hw = self.length / 2, self.width / 2
        ctr = np.array([self.cx, self.cy])
        return np.array([ctr + hl * u + hw * n, ctr - hl * u + hw * n,
                         ctr - hl * u - hw * n, ctr + hl * u - hw * n])

    def inflate(self, margin):
        return replace(self, length=self.length + 2 * margin, width=self.width + 2 * margin)

    def contains(self, pts):
        """Boolean mask of points (N, 2) inside or on the rectangle."""
        pts = np.atleast_2d(pts)
        u, n = self.axes()
        d = pts - np.array([self.cx, self.cy])
        return (np.abs(d @ u) <= self.length / 2) & (np.abs(d @ n) <= self.width / 2)


def check_collision(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis overlap test; touching rectangles count as overlapping."""
    for box in (a, b):
        if not (box.length > 0 and box.width > 0):
            raise ValueError(f"degenerate box {box}")
    ca, cb = a.corners(), b.corners()
    for axis in (*a.axes(), *b.axes()):
        pa, pb = ca @ axis, cb @ axis
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


# -- state types ---------------------------------------------------------------
@dataclass(frozen=True)
class VehiclePose:
    x: float
    y: float
    psi: float

    def __post_init__(self):
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    def rear_axle(self):
        return (self.x - REAR_TO_CENTER * math.cos(self.psi),
                self.y - REAR_TO_CENTER * math.sin(self.psi))

    @classmethod
    def from_rear_axle(cls, rx, ry, psi):
        return cls(rx + REAR_TO_CENTER * math.cos(psi), ry + REAR_TO_CENTER * math.sin(psi), psi)

    def footprint(self):
        return OrientedBox(self.x, self.y, self.psi, CAR_LENGTH, CAR_WIDTH)

    def to_local(self, pts):
        """World points (N, 2) into this pose's frame (x forward, y left)."""
        c, s = math.cos(self.psi), math.sin(self.psi)
        d = np.atleast_2d(pts) - np.array([self.x, self.y])
        return np.stack([d[:, 0] * c + d[:, 1] * s, -d[:, 0] * s + d[:, 1] * c], axis=1)

    def to_world(self, pts):
        c, s = math.cos(self.psi), math.sin(self.psi)
        p = np.atleast_2d(pts)
        return np.stack([self.x + p[:, 0] * c - p[:, 1] * s, self.y + p[:, 0] * s + p[:, 1] * c], axis=1)


@dataclass(frozen=True)
class EgoState:
    pose: VehiclePose
    v: float = 0.0  # signed by gear
    a: float = 0.0
    gear: int = FORWARD

    @property
    def speed(self):
        return abs(self.v)


@dataclass(frozen=True)
class Pedestrian:
    pos: tuple = (0.0, 0.0)
    vel: tuple = (0.0, 0.0)
    acc: tuple = (0.0, 0.0)
    present: bool = False

    def box(self):
        return OrientedBox(self.pos[0], self.pos[1], 0.0, PED_SIZE, PED_SIZE)


ABSENT = Pedestrian()


@dataclass(frozen=True)
class GoalSlot:
    x_g: float
    y_g: float
    psi_g: float
    kind: str
    index: int = 0

    def pose(self):
        return VehiclePose(self.x_g, self.y_g, self.psi_g)


@dataclass(frozen=True)
class Slot:
    cx: float
    cy: float
    psi: float  # heading of a correctly parked vehicle
    length: float
    width: float

    def box(self):
        return OrientedBox(self.cx, self.cy, self.psi, self.length, self.width)


@dataclass(frozen=True)
class Layout:
    kind: str
    slots: tuple
    lane_offset: float  # signed distance slot centre -> lane centre along the slot's lane axis
    markings: tuple
    bounds: tuple  # (xmin, ymin, xmax, ymax)

    def lane_axis(self, slot: Slot):
        """Unit vector from a slot toward its access lane."""
        if self.kind == "vertical":
            return np.array([math.cos(slot.psi), math.sin(slot.psi)])
        return np.array([-math.sin(slot.psi), math.cos(slot.psi)])


MARK_WIDTH = 0.12


def _slot_markings(slot: Slot):
    """Painted lines around a perpendicular slot, leaving the lane side open."""
    c, s = math.cos(slot.psi), math.sin(slot.psi)
    u, n = np.array([c, s]), np.array([-s, c])
    ctr = np.array([slot.cx, slot.cy])
    hl, hw = slot.length / 2, slot.width / 2
    lines = []
    for side in (1, -1):  # long edges
        p = ctr + side * hw * n
        lines.append(OrientedBox(p[0], p[1], slot.psi, slot.length, MARK_WIDTH))
    p = ctr - hl * u  # back edge
    lines.append(OrientedBox(p[0], p[1], slot.psi + math.pi / 2, slot.width, MARK_WIDTH))
    return lines


@lru_cache(maxsize=None)
def make_layout(kind: str) -> Layout:
    if kind == "vertical":
        width, depth, per_row = 2.6, 5.5, 16
        rows = ((0.0, math.pi / 2), (12.5, -math.pi / 2), (18.0, math.pi / 2), (30.5, -math.pi / 2))
        slots, marks = [], []
        for cy, psi in rows:
            for k in range(per_row):
                slot = Slot(-19.5 + width * k, cy, psi, depth, width)
                slots.append(slot)
                marks.extend(_slot_markings(slot))
        return Layout("vertical", tuple(slots), 6.25, tuple(marks), (-26.0, -6.0, 26.0, 37.0))
    if kind == "parallel":
        length, depth = 7.0, 2.5
        slots, marks = [], []
        for k in range(6):
            slot = Slot(-17.5 + length * k, 0.0, 0.0, length, depth)
            slots.append(slot)
            c = np.array([slot.cx, slot.cy])
            marks.append(OrientedBox(c[0], -depth / 2, 0.0, length, MARK_WIDTH))
            marks.append(OrientedBox(c[0] - length / 2, 0.0, math.pi / 2, depth, MARK_WIDTH))
            if k == 5:
                marks.append(OrientedBox(c[0] + length / 2, 0.0, math.pi / 2, depth, MARK_WIDTH))
        marks.append(OrientedBox(0.0, depth / 2, 0.0, 6 * length, MARK_WIDTH))
        return Layout("parallel", tuple(slots), 3.0, tuple(marks), (-28.0, -6.0, 28.0, 10.0))
    raise ValueError(f"unknown layout kind {kind!r}; expected one of {KINDS}")


@dataclass(frozen=True)
class WorldState:
    ego: EgoState
    pedestrians: tuple
    static_vehicles: tuple
    layout: Layout
    goal: GoalSlot
    time: float = 0.0
    tick: int = 0
    rng_seed: int = 0
    ped_random_walk: bool = True  # False: scripted pedestrians keep their velocity
    ped_avoid_ego: bool = True

    def __post_init__(self):
        if len(self.pedestrians) != PED_CAPACITY:
            raise ValueError(f"pedestrian list must have capacity {PED_CAPACITY}")

    def pedestrian_arrays(self):
        """(pos, vel, acc, mask) arrays of shapes (8,2),(8,2),(8,2),(8,)."""
        pos = np.array([p.pos for p in self.pedestrians], dtype=np.float64)
        vel = np.array([p.vel for p in self.pedestrians], dtype=np.float64)
        acc = np.array([p.acc for p in self.pedestrians], dtype=np.float64)
        mask = np.array([p.present for p in self.pedestrians], dtype=bool)
        return pos, vel, acc, mask


# -- dynamics ------------------------------------------------------------------
def step_bicycle(ego: EgoState, accel_cmd: float, steer_cmd: float, gear: int, dt: float = DT) -> EgoState:
    """Advance the rear-axle kinematic bicycle by ``dt``.

    Speed is a non-negative magnitude signed by the gear. Requesting the other
    gear while moving brakes at full deceleration; the gear flips once stopped.
    Within a step the steering is held and the speed varies linearly, so the rear
    axle follows an exact circular arc of length ``0.5 * (s0 + s1) * dt``.
    """
    if not all(math.isfinite(c) for c in (accel_cmd, steer_cmd, dt)):
        raise ValueError("non-finite control command")
    if not 0.0 < dt <= 0.2:
        raise ValueError(f"dt must lie in (0, 0.2], got {dt}")
    if gear not in (FORWARD, REVERSE):
        raise ValueError(f"gear must be +1 or -1, got {gear}")
    if abs(steer_cmd) > STEER_MAX + 1e-12:
        raise ValueError(f"steer {steer_cmd} exceeds {STEER_MAX} rad")
    accel_cmd = min(max(accel_cmd, -A_MAX), A_MAX)
    s0 = ego.speed
    cur_gear = ego.gear
    if gear != cur_gear:
        if s0 > 0.0:
            accel_cmd = -A_MAX
        else:
            cur_gear = gear
    s1 = min(max(s0 + accel_cmd * dt, 0.0), V_MAX)
    dist = cur_gear * 0.5 * (s0 + s1) * dt
    rx, ry = ego.pose.rear_axle()
    psi = ego.pose.psi
    dpsi = dist * math.tan(steer_cmd) / WHEELBASE
    chord = dist * np.sinc(dpsi / (2 * math.pi))
    mid = psi + 0.5 * dpsi
    rx += chord * math.cos(mid)
    ry += chord * math.sin(mid)
    pose = VehiclePose.from_rear_axle(rx, ry, psi + dpsi)
    return EgoState(pose, cur_gear * s1, (s1 - s0) / dt, cur_gear)


def _ped_rng(state: WorldState):
    return np.random.default_rng([state.rng_seed, 7919, state.tick])


def step_pedestrians(state: WorldState, dt: float = DT, rng=None) -> WorldState:
    """Integrate each present pedestrian and resample its acceleration.

    The default generator is derived from ``(rng_seed, tick)`` so the transition is
    a pure function of the state.
    """
    if not 0.0 < dt <= 0.2:
        raise ValueError(f"dt must lie in (0, 0.2], got {dt}")
    rng = _ped_rng(state) if rng is None else rng
    noise = rng.normal(0.0, 0.25, size=(PED_CAPACITY, 2))
    ego_zone = state.ego.pose.footprint().inflate(0.4)
    goal = np.array([state.goal.x_g, state.goal.y_g])
    out = []
    for i, p in enumerate(state.pedestrians):
        if not p.present:
            out.append(p)
            continue
        pos, vel, acc = np.array(p.pos), np.array(p.vel), np.array(p.acc)
        pos = pos + vel * dt + 0.5 * acc * dt * dt
        vel = vel + acc * dt
        speed = float(np.hypot(*vel))
        if speed > PED_SPEED_CAP:
            vel *= PED_SPEED_CAP / speed
        if state.ped_random_walk:
            acc = 0.85 * acc + noise[i]
            an = float(np.hypot(*acc))
            if an > PED_ACC_MAX:
                acc *= PED_ACC_MAX / an
        if state.ped_avoid_ego:
            ahead = pos + np.outer(np.linspace(0.1, 1.0, 10), vel)
            if ego_zone.contains(ahead).any():
                vel, acc = -vel, np.zeros(2)
        if np.hypot(*(pos - goal)) > PED_DESPAWN_RADIUS:
            out.append(ABSENT)
            continue
        out.append(Pedestrian(tuple(pos), tuple(vel), tuple(acc), True))
    return replace(state, pedestrians=tuple(out))


def step_world(state: WorldState, accel: float, steer: float, gear: int, dt: float = DT) -> WorldState:
    ego = step_bicycle(state.ego, accel, steer, gear, dt)
    nxt = replace(state, ego=ego)
    nxt = step_pedestrians(nxt, dt)
    return replace(nxt, time=(state.tick + 1) * dt, tick=state.tick + 1)


def ego_collides(state: WorldState) -> bool:
    fp = state.ego.pose.footprint()
    for box in state.static_vehicles:
        if check_collision(fp, box):
            return True
    for p in state.pedestrians:
        if p.present and check_collision(fp, p.box()):
            return True
    return False


def attempt_triggered(ego: VehiclePose, goal: GoalSlot) -> bool:
    return math.hypot(ego.x - goal.x_g, ego.y - goal.y_g) <= ATTEMPT_RADIUS


def pose_errors(pose: VehiclePose, goal: GoalSlot):
    """(position error m, orientation error deg) of a pose against a goal slot."""
    pe = math.hypot(pose.x - goal.x_g, pose.y - goal.y_g)
    oe = abs(math.degrees(wrap_angle(pose.psi - goal.psi_g)))
    return pe, oe


# -- episodes ------------------------------------------------------------------
@dataclass
class Scenario:
    """Scenario descriptor; ``pedestrians = -1`` draws the count from the seed."""

    seed: int = 0
    kind: str = "vertical"
    pedestrians: int = -1
    occupancy: float = 0.6

    def dump(self):
        return "".join(f"{k} = {v}\n" for k, v in vars(self).items())

    @classmethod
    def parse(cls, text):
        from .kvfile import parse_into
        return parse_into(cls, text)


def _lane_frame(layout: Layout, slot: Slot):
    """(origin, out-axis, along-axis) of a slot's local frame used for spawning."""
    out = layout.lane_axis(slot)
    along = np.array([-out[1], out[0]])
    return np.array([slot.cx, slot.cy]), out, along


def spawn_episode(seed: int, kind: str, pedestrians: int = -1, occupancy: float = 0.6,
                  max_attempts: int = 200) -> WorldState:
    """Seeded initial state: vacant goal, occupied neighbours, lane-aligned ego.

    Each candidate is checked by sweeping the expert's planned path against the
    static vehicles; infeasible draws are resampled.
    """
    from .expert import plan_maneuver, path_is_clear

    layout = make_layout(kind)
    rng = np.random.default_rng([seed, 101])
    for _ in range(max_attempts):
        gi = int(rng.integers(len(layout.slots)))
        slot = layout.slots[gi]
        goal = GoalSlot(slot.cx, slot.cy, slot.psi, kind, gi)
        occupied = rng.random(len(layout.slots)) < occupancy
        statics = []
        for k, s in enumerate(layout.slots):
            if k == gi or not occupied[k]:
                continue
            flip = math.pi if rng.random() < 0.5 else 0.0
            statics.append(OrientedBox(s.cx, s.cy, wrap_angle(s.psi + flip), CAR_LENGTH, CAR_WIDTH))
        ego_pose = _spawn_ego_pose(rng, layout, slot)
        if ego_pose is None:
            continue
        ego = EgoState(ego_pose)
        world = WorldState(ego, (ABSENT,) * PED_CAPACITY, tuple(statics), layout, goal,
                           rng_seed=int(seed))
        path = plan_maneuver(world)
        if path is None or not path_is_clear(path, statics):
            continue
        n_ped = int(rng.integers(0, 5)) if pedestrians < 0 else int(pedestrians)
        peds = _spawn_pedestrians(rng, layout, slot, ego_pose, n_ped)
        return replace(world, pedestrians=peds)
    raise RuntimeError(f"no feasible spawn for seed {seed} ({kind}) after {max_attempts} attempts")


def _spawn_ego_pose(rng, layout: Layout, slot: Slot):
    from .expert import arc_radius

    origin, out, along = _lane_frame(layout, slot)
    lane = layout.lane_offset
    radius = arc_radius()
    if layout.kind == "vertical":
        sign = 1.0 if rng.random() < 0.5 else -1.0
        # rear axle must start short of the arc entry point (sign * along == radius)
        hi = radius + REAR_TO_CENTER - 1.0
        lo = -math.sqrt(10.0 ** 2 - lane ** 2)
        t = rng.uniform(lo, hi)
        if math.hypot(lane, t) < 4.0:
            return None
        p = origin + lane * out + sign * t * along
        heading = math.atan2(sign * along[1], sign * along[0])
        return VehiclePose(p[0], p[1], heading)
    from .expert import parallel_entry_x
    hi = parallel_entry_x() + REAR_TO_CENTER - 1.0
    lo = -math.sqrt(10.0 ** 2 - lane ** 2)
    t = rng.uniform(lo, hi)
    if math.hypot(lane, t) < 4.0:
        return None
    heading = np.array([math.cos(slot.psi), math.sin(slot.psi)])
    p = origin + lane * out + t * heading
    return VehiclePose(p[0], p[1], slot.psi)


def _spawn_pedestrians(rng, layout: Layout, slot: Slot, ego_pose: VehiclePose, count: int):
    origin, out, along = _lane_frame(layout, slot)
    lane = layout.lane_offset
    half_lane = 3.0 if layout.kind == "vertical" else 1.4
    keep_out = ego_pose.footprint().inflate(2.0)
    peds = []
    tries = 0
    while len(peds) < count and tries < 100:
        tries += 1
        p = origin + rng.uniform(lane - half_lane, lane + half_lane) * out + rng.uniform(-9.0, 9.0) * along
        if keep_out.contains(p).any():
            continue
        if rng.random() < 0.75:
            base = out if rng.random() < 0.5 else -out
        else:
            base = along if rng.random() < 0.5 else -along
        ang = math.atan2(base[1], base[0]) + rng.uniform(-0.4, 0.4)
        speed = rng.uniform(0.5, 1.3)
        vel = (speed * math.cos(ang), speed * math.sin(ang))
        peds.append(Pedestrian((float(p[0]), float(p[1])), vel, (0.0, 0.0), True))
    peds.extend([ABSENT] * (PED_CAPACITY - len(peds)))
    return tuple(peds)


def spawn_from_scenario(sc: Scenario) -> WorldState:
    return spawn_episode(sc.seed, sc.kind, sc.pedestrians, sc.occupancy)


def with_pedestrians(state: WorldState, peds, scripted=False) -> WorldState:
    """Replace the pedestrian set (padded to capacity)."""
    peds = tuple(peds) + (ABSENT,) * (PED_CAPACITY - len(peds))
    if scripted:
        return replace(state, pedestrians=peds, ped_random_walk=False, ped_avoid_ego=False)
    return replace(state, pedestrians=peds)

