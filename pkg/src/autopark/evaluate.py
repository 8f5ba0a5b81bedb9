"""Closed-loop evaluation and the SR / PE / OE / CR metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import bev, motion
from .dataset import handover_state, observe
from .episode import SUCCESS_OE, SUCCESS_PE, run_episode
from .policy import Observation, Policy
from .world import WorldState, wrap_angle


@dataclass(frozen=True)
class EpisodeResult:
    seed: int
    kind: str
    final_x: float
    final_y: float
    final_psi: float
    goal_x: float
    goal_y: float
    goal_psi: float
    collided: bool
    reason: str  # parked | collision | timeout
    ticks: int = 0

    @property
    def pe(self):
        return math.hypot(self.final_x - self.goal_x, self.final_y - self.goal_y)

    @property
    def oe(self):
        """Absolute yaw difference in degrees, wrapped to [0, 180]."""
        return abs(math.degrees(wrap_angle(self.final_psi - self.goal_psi)))

    @property
    def success(self):
        return self.reason == "parked" and not self.collided and self.pe < SUCCESS_PE and self.oe < SUCCESS_OE

    @classmethod
    def from_world(cls, seed, kind, world: WorldState, outcome):
        p, g = world.ego.pose, world.goal
        return cls(int(seed), kind, p.x, p.y, p.psi, g.x_g, g.y_g, g.psi_g, outcome.collided, outcome.reason,
                   outcome.ticks)


REPORT_HEADER = ["seed", "kind", "success", "pe_m", "oe_deg", "collided", "reason", "ticks"]


@dataclass
class EvalReport:
    sr: float  # percent
    pe: float  # metres, mean over successes (nan if none)
    oe: float  # degrees, mean over successes
    cr: float  # percent
    rows: list = field(default_factory=list)

    def summary_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["episodes", "sr_pct", "pe_m", "oe_deg", "cr_pct"])
        wr.writerow([len(self.rows), f"{self.sr:.4f}", f"{self.pe:.6f}", f"{self.oe:.6f}", f"{self.cr:.4f}"])
        return buf.getvalue()

    def rows_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(REPORT_HEADER)
        for r in self.rows:
            wr.writerow([r.seed, r.kind, int(r.success), f"{r.pe:.6f}", f"{r.oe:.6f}", int(r.collided), r.reason,
                         r.ticks])
        return buf.getvalue()


def compute_metrics(episodes) -> EvalReport:
    """SR and CR over all episodes; PE and OE averaged over successful ones."""
    rows = list(episodes)
    if not rows:
        raise ValueError("compute_metrics needs at least one episode")
    n = len(rows)
    wins = [r for r in rows if r.success]
    sr = 100.0 * len(wins) / n
    cr = 100.0 * sum(r.collided for r in rows) / n
    pe = math.fsum(r.pe for r in wins) / len(wins) if wins else float("nan")
    oe = math.fsum(r.oe for r in wins) / len(wins) if wins else float("nan")
    return EvalReport(sr, pe, oe, cr, rows)


class LearnedController:
    """Render -> perceive -> greedy rollout -> first command, once per tick."""

    def __init__(self, policy: Policy, disable_pedestrians=False, drop_goal_context=False):
        self.policy = policy
        self.disable_pedestrians = disable_pedestrians
        self.drop_goal_context = drop_goal_context
        self.ped_track = []
        self.last = None

    def observation(self, world: WorldState):
        self.ped_track.append(world.pedestrian_arrays())
        t = len(self.ped_track) - 1
        images, _ = observe(world, self.policy.rig)
        hist, mask = motion.pedestrian_history(self.ped_track, t, world.ego.pose)
        return Observation(
            images=images[None].astype(np.float64) / 255.0,
            goal=bev.goal_features(world.goal, world.ego.pose)[None],
            history=hist[None], ped_mask=mask[None],
            ego_va=np.array([[world.ego.v, world.ego.a]]),
        )

    def __call__(self, world: WorldState):
        obs = self.observation(world)
        cmd, seq, enc = self.policy.act(obs, self.disable_pedestrians, self.drop_goal_context)
        self.last = (obs, seq, enc)
        return cmd


def run_seed(seed, kind, policy: Policy | None = None, disable_pedestrians=False, drop_goal_context=False,
             on_tick=None):
    """(world, outcome) for one seed, or None when the spawn is infeasible."""
    try:
        world, driver = handover_state(seed, kind)
    except RuntimeError:
        return None
    controller = driver if policy is None else LearnedController(policy, disable_pedestrians, drop_goal_context)
    return run_episode(world, controller, on_tick=on_tick)


def closed_loop_eval(policy: Policy | None, seeds, kind, disable_pedestrians=False, drop_goal_context=False,
                     log=None) -> EvalReport:
    """Evaluate the learned policy (or the expert when ``policy`` is None) on each seed.

    Infeasible spawns are skipped and do not count.
    """
    rows = []
    for seed in seeds:
        res = run_seed(seed, kind, policy, disable_pedestrians, drop_goal_context)
        if res is None:
            if log is not None:
                log(f"seed {seed}: infeasible spawn, skipped")
            continue
        world, outcome = res
        row = EpisodeResult.from_world(seed, kind, world, outcome)
        rows.append(row)
        if log is not None:
            log(f"seed {seed}: {row.reason} pe={row.pe:.3f} oe={row.oe:.3f} success={row.success}")
    return compute_metrics(rows)


def parse_seed_range(text):
    """``A..B`` (inclusive) or a single integer."""
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise ValueError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(text)]


def result_dict(row: EpisodeResult):
    return {**asdict(row), "pe": row.pe, "oe": row.oe, "success": row.success}
