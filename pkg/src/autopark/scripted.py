"""Scripted pedestrian scenes for checking the expert's yield rule.

Each scene starts at the attempt trigger of a pedestrian-free spawn. One
pedestrian walks at constant velocity, perpendicular to the ego's path, timed
so that an ego that never yields sweeps over it: the walker reaches the path
line just as the leading bumper has passed that point by ``OVERLAP`` metres.
Scripted walkers neither wander nor step aside.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .episode import run_episode
from .world import CAR_LENGTH, DT, Pedestrian, VehiclePose, check_collision, step_world, with_pedestrians
from .dataset import handover_state

OVERLAP = 0.5


@dataclass(frozen=True)
class CrossingScene:
    seed: int
    kind: str
    fraction: float  # where along the reverse motion the crossing happens
    speed: float  # walker speed m/s
    side: int  # +1 walker comes from the ego's left, -1 from its right
    away: bool = False  # walk away from the path instead of across it


def _unimpeded(world, driver, max_ticks=600):
    """Per-tick (centre xy, heading, gear, speed) of the expert with nobody around."""
    drv = copy.deepcopy(driver)
    log = []
    for _ in range(max_ticks):
        if drv.done:
            break
        cmd = drv(world)
        e = world.ego
        log.append((e.pose.x, e.pose.y, e.pose.psi, e.gear, e.speed))
        world = step_world(world, cmd.accel, cmd.steer, cmd.gear)
    return np.array(log)


def _clear_start(log, crossing, direction):
    """First point 3 m or more from ``crossing`` whose walker box misses every swept footprint."""
    swept = [VehiclePose(x, y, psi).footprint().inflate(0.5) for x, y, psi, _, _ in log]
    for dist in np.arange(3.0, 15.0, 0.5):
        for sign in (1.0, -1.0):
            start = crossing + sign * dist * direction
            box = Pedestrian((float(start[0]), float(start[1])), (0.0, 0.0), (0.0, 0.0), True).box()
            if not any(check_collision(box, f) for f in swept):
                return start
    raise ValueError("no clear start for the walker")


def build_scene(scene: CrossingScene, yield_to_pedestrians=True):
    """(world, driver) ready for ``run_episode``."""
    world, driver = handover_state(scene.seed, scene.kind, pedestrians=0)
    log = _unimpeded(world, driver)
    reverse = np.flatnonzero((log[:, 3] < 0) & (log[:, 4] > 0.5))
    if reverse.size == 0:
        raise ValueError(f"no reverse motion in {scene}")
    k = int(reverse[int(round(scene.fraction * (reverse.size - 1)))])
    x, y, psi, gear, _ = log[k]
    heading = np.array([math.cos(psi), math.sin(psi)])
    crossing = np.array([x, y]) + gear * (CAR_LENGTH / 2) * heading
    # tick at which the leading bumper is OVERLAP past the crossing point
    ahead = (log[k:, :2] - crossing) @ (gear * heading) + CAR_LENGTH / 2
    later = np.flatnonzero(ahead >= OVERLAP)
    arrive = k + int(later[0]) if later.size else k
    left = np.array([-heading[1], heading[0]])
    walk = -scene.side * left
    t_arrive = arrive * DT
    if scene.away:
        start = _clear_start(log, crossing, scene.side * left)
        vel = (start - crossing) / np.linalg.norm(start - crossing) * scene.speed
    else:
        start = crossing - walk * scene.speed * t_arrive
        vel = walk * scene.speed
    ped = Pedestrian((float(start[0]), float(start[1])), (float(vel[0]), float(vel[1])), (0.0, 0.0), True)
    world = with_pedestrians(world, [ped], scripted=True)
    driver.yield_to_pedestrians = yield_to_pedestrians
    return world, driver


def default_suite():
    """Crossings of the reverse corridor for both layouts, from both sides, two speeds."""
    scenes = []
    for kind, seeds in (("vertical", (1, 2, 3, 4)), ("parallel", (1, 2, 3, 4))):
        for i, seed in enumerate(seeds):
            for fraction in (0.3, 0.7):
                scenes.append(CrossingScene(seed, kind, fraction, (0.6, 0.9)[i % 2], 1 if i < 2 else -1))
    return scenes


def run_scene(scene: CrossingScene, yield_to_pedestrians=True, on_tick=None):
    world, driver = build_scene(scene, yield_to_pedestrians)
    braked = []

    def watch(w, cmd):
        braked.append(driver.last_yield)
        if on_tick is not None:
            on_tick(w, cmd)

    final, outcome = run_episode(world, driver, on_tick=watch)
    return final, outcome, braked


def run_suite(scenes=None, yield_to_pedestrians=True):
    """Outcome per scene."""
    return [run_scene(s, yield_to_pedestrians)[1] for s in (scenes or default_suite())]
