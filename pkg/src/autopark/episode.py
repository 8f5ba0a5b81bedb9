"""Closed-loop episode runner shared by data generation and evaluation."""

from __future__ import annotations

from dataclasses import dataclass

from .world import DT, WorldState, attempt_triggered, ego_collides, pose_errors, step_world

MAX_TIME = 60.0
SETTLE_TICKS = 5
SETTLE_RADIUS = 1.0
SETTLE_YAW_DEG = 10.0
SUCCESS_PE = 0.5
SUCCESS_OE = 0.5


@dataclass(frozen=True)
class Outcome:
    pe: float
    oe: float
    collided: bool
    reason: str  # parked | collision | timeout
    ticks: int

    @property
    def success(self):
        return is_success(self.pe, self.oe, self.collided) and self.reason == "parked"


def is_success(pe, oe, collided):
    return pe < SUCCESS_PE and oe < SUCCESS_OE and not collided


def advance_to_attempt(world: WorldState, driver, max_time=MAX_TIME):
    """Drive with ``driver`` until the parking attempt triggers; returns the new state.

    This is the hand-over point: episodes are recorded and evaluated from here.
    """
    while not attempt_triggered(world.ego.pose, world.goal):
        if world.time >= max_time:
            raise RuntimeError("attempt never triggered")
        cmd = driver(world)
        world = step_world(world, cmd.accel, cmd.steer, cmd.gear)
    return world


def run_episode(world: WorldState, controller, max_time=MAX_TIME, on_tick=None):
    """Step ``controller(world) -> ControlCommand`` until parked, collision, or timeout.

    ``on_tick(world, cmd)`` sees every pre-step state with the command applied to it.
    Returns ``(final_world, Outcome)``.
    """
    start_tick = world.tick
    settled = 0
    limit = start_tick + int(round(max_time / DT))
    reason = "timeout"
    collided = ego_collides(world)
    if collided:
        reason = "collision"
    while not collided and world.tick < limit:
        cmd = controller(world)
        if on_tick is not None:
            on_tick(world, cmd)
        world = step_world(world, cmd.accel, cmd.steer, cmd.gear)
        if ego_collides(world):
            collided, reason = True, "collision"
            break
        pe, oe = pose_errors(world.ego.pose, world.goal)
        if world.ego.speed == 0.0 and pe <= SETTLE_RADIUS and oe <= SETTLE_YAW_DEG:
            settled += 1
            if settled >= SETTLE_TICKS:
                reason = "parked"
                break
        else:
            settled = 0
    pe, oe = pose_errors(world.ego.pose, world.goal)
    return world, Outcome(pe, oe, collided, reason, world.tick - start_tick)
