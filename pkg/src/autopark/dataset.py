"""Expert episode recording, the acceptance filter, and the on-disk dataset.

Layout of one episode directory::

    meta.json      seed, layout kind, spawn parameters, frame count
    frames.bin     header + fixed-size little-endian frame records
    outcome.json   final PE/OE, collision flag, termination reason

A frame record is ``SCALARS`` float64 values, the uint8 RGB rasters of every
camera, the uint16 millimetre depth rasters, and a CRC32 over all of it.
"""

from __future__ import annotations

import csv
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bev, motion, tokens
from .camera import default_rig, render, to_uint8
from .episode import Outcome, advance_to_attempt, is_success, run_episode
from .expert import ExpertDriver
from .policy import Observation
from .tokens import ControlCommand
from .world import DT, PED_CAPACITY, VehiclePose, WorldState, pose_errors, spawn_episode, step_world

MAGIC = b"APFRAMES"
VERSION = 1
HEADER = struct.Struct("<8sIIIIII")  # magic, version, record size, count, cameras, height, width
MIN_FRAMES = 10

# float64 scalar block, in order
SCALAR_FIELDS = (
    ["time", "x", "y", "psi", "v", "a", "gear"]
    + [f"ped_{q}{i}_{c}" for q in ("pos", "vel", "acc") for i in range(PED_CAPACITY) for c in "xy"]
    + [f"ped_mask{i}" for i in range(PED_CAPACITY)]
    + ["goal_x", "goal_y", "goal_psi", "cmd_accel", "cmd_steer", "cmd_gear"]
)
SCALARS = len(SCALAR_FIELDS)
_COL = {name: i for i, name in enumerate(SCALAR_FIELDS)}
_PED = _COL["ped_pos0_x"]


@dataclass
class FrameRecord:
    time: float
    images: np.ndarray  # (ncam, H, W, 3) uint8
    depth: np.ndarray  # (ncam, H, W) uint16 millimetres, 0 = no hit
    ego_pose: VehiclePose
    v: float
    a: float
    gear: int
    ped_pos: np.ndarray  # (8, 2)
    ped_vel: np.ndarray
    ped_acc: np.ndarray
    ped_mask: np.ndarray  # (8,) bool
    goal: tuple  # (x_g, y_g, psi_g, kind)
    command: ControlCommand


@dataclass
class EpisodeRecord:
    """Column-oriented episode: ``scalars`` (N, SCALARS), ``images``, ``depth``."""

    meta: dict
    scalars: np.ndarray
    images: np.ndarray  # (N, ncam, H, W, 3) uint8
    depth: np.ndarray  # (N, ncam, H, W) uint16
    outcome: Outcome

    def __len__(self):
        return self.scalars.shape[0]

    @property
    def kind(self):
        return self.meta["kind"]

    def column(self, name):
        return self.scalars[:, _COL[name]]

    def pose(self, t):
        row = self.scalars[t]
        return VehiclePose(row[_COL["x"]], row[_COL["y"]], row[_COL["psi"]])

    def command(self, t):
        row = self.scalars[t]
        return ControlCommand(row[_COL["cmd_accel"]], row[_COL["cmd_steer"]], int(row[_COL["cmd_gear"]]))

    def goal(self):
        from .world import GoalSlot

        row = self.scalars[0]
        return GoalSlot(row[_COL["goal_x"]], row[_COL["goal_y"]], row[_COL["goal_psi"]], self.kind)

    def ped_state(self, t):
        row = self.scalars[t]
        blk = row[_PED:_PED + 6 * PED_CAPACITY].reshape(3, PED_CAPACITY, 2)
        mask = row[_COL["ped_mask0"]:_COL["ped_mask0"] + PED_CAPACITY] > 0.5
        return blk[0], blk[1], blk[2], mask

    def ped_states(self):
        return [self.ped_state(t) for t in range(len(self))]

    def frame(self, t) -> FrameRecord:
        row = self.scalars[t]
        pos, vel, acc, mask = self.ped_state(t)
        return FrameRecord(
            float(row[_COL["time"]]), self.images[t], self.depth[t], self.pose(t),
            float(row[_COL["v"]]), float(row[_COL["a"]]), int(row[_COL["gear"]]),
            pos, vel, acc, mask,
            (row[_COL["goal_x"]], row[_COL["goal_y"]], row[_COL["goal_psi"]], self.kind),
            self.command(t),
        )

    def __eq__(self, other):
        if not isinstance(other, EpisodeRecord):
            return NotImplemented
        return (self.meta == other.meta and self.outcome == other.outcome
                and np.array_equal(self.scalars, other.scalars)
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.depth, other.depth))


@dataclass(frozen=True)
class QualityReport:
    accepted: bool
    pe: float
    oe: float
    collided: bool


def quality_filter(ep) -> QualityReport:
    """Accept iff final PE < 0.5 m, OE < 0.5 deg and no collision.

    Takes an ``EpisodeRecord`` or anything with ``pe``, ``oe`` and ``collided``.
    """
    out = ep.outcome if isinstance(ep, EpisodeRecord) else ep
    return QualityReport(is_success(out.pe, out.oe, out.collided), out.pe, out.oe, out.collided)


# -- recording -------------------------------------------------------------------
def frame_scalars(world: WorldState, cmd: ControlCommand):
    ego = world.ego
    pos, vel, acc, mask = world.pedestrian_arrays()
    g = world.goal
    return np.concatenate([
        [world.time, ego.pose.x, ego.pose.y, ego.pose.psi, ego.v, ego.a, ego.gear],
        pos.ravel(), vel.ravel(), acc.ravel(), mask.astype(np.float64),
        [g.x_g, g.y_g, g.psi_g, cmd.accel, cmd.steer, cmd.gear],
    ])


def observe(world: WorldState, rig):
    """Rendered uint8 images (ncam, H, W, 3) and uint16 mm depth (ncam, H, W)."""
    frames = render(world, rig)
    images = np.stack([to_uint8(f.image) for f in frames])
    depth = np.stack([np.clip(np.round(f.depth * 1000.0), 0, 65535).astype(np.uint16) for f in frames])
    return images, depth


def handover_state(seed, kind, pedestrians=-1, occupancy=0.6):
    """Spawned world advanced by the expert to the attempt trigger, plus that expert."""
    world = spawn_episode(seed, kind, pedestrians, occupancy)
    driver = ExpertDriver()
    return advance_to_attempt(world, driver), driver


def record_episode(seed, kind, pedestrians=-1, occupancy=0.6, rig=None, with_images=True) -> EpisodeRecord:
    """Run the expert from the attempt trigger to termination, recording every tick.

    The final state is recorded too (with the expert's would-be command), so the
    outcome equals the pose errors of the last frame.
    """
    rig = default_rig() if rig is None else rig
    world, driver = handover_state(seed, kind, pedestrians, occupancy)
    rows, imgs, deps = [], [], []

    def log(w, cmd):
        rows.append(frame_scalars(w, cmd))
        if with_images:
            im, dp = observe(w, rig)
            imgs.append(im)
            deps.append(dp)

    world, outcome = run_episode(world, driver, on_tick=log)
    log(world, driver(world))
    ncam, size = len(rig), rig[0].intr.height
    images = np.stack(imgs) if with_images else np.zeros((len(rows), ncam, size, size, 3), np.uint8)
    depth = np.stack(deps) if with_images else np.zeros((len(rows), ncam, size, size), np.uint16)
    meta = {
        "format": VERSION, "seed": int(seed), "kind": kind, "pedestrians": int(pedestrians),
        "occupancy": float(occupancy), "frames": len(rows), "dt": DT,
    }
    return EpisodeRecord(meta, np.stack(rows), images, depth, outcome)


def replay_poses(ep: EpisodeRecord):
    """Poses (N, 3) from re-simulating the recorded commands open-loop from frame 0."""
    world, _ = handover_state(ep.meta["seed"], ep.kind, ep.meta["pedestrians"], ep.meta["occupancy"])
    out = [(world.ego.pose.x, world.ego.pose.y, world.ego.pose.psi)]
    for t in range(len(ep) - 1):
        cmd = ep.command(t)
        world = step_world(world, cmd.accel, cmd.steer, cmd.gear)
        out.append((world.ego.pose.x, world.ego.pose.y, world.ego.pose.psi))
    return np.array(out)


# -- files -----------------------------------------------------------------------
def _record_size(ncam, h, w):
    return 8 * SCALARS + ncam * h * w * 3 + ncam * h * w * 2 + 4


def _outcome_dict(out: Outcome):
    return {"pe": out.pe, "oe": out.oe, "collided": out.collided, "reason": out.reason, "ticks": out.ticks}


def write_episode(ep: EpisodeRecord, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n, ncam, h, w = ep.depth.shape
    (d / "meta.json").write_text(json.dumps(ep.meta, indent=2, sort_keys=True) + "\n")
    with open(d / "frames.bin", "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, _record_size(ncam, h, w), n, ncam, h, w))
        for t in range(n):
            body = (np.ascontiguousarray(ep.scalars[t], dtype="<f8").tobytes()
                    + np.ascontiguousarray(ep.images[t]).tobytes()
                    + np.ascontiguousarray(ep.depth[t], dtype="<u2").tobytes())
            fh.write(body)
            fh.write(struct.pack("<I", zlib.crc32(body)))
    report = quality_filter(ep)
    (d / "outcome.json").write_text(
        json.dumps({**_outcome_dict(ep.outcome), "accepted": report.accepted}, indent=2, sort_keys=True) + "\n")


def read_episode(directory) -> EpisodeRecord:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    oc = json.loads((d / "outcome.json").read_text())
    outcome = Outcome(oc["pe"], oc["oe"], oc["collided"], oc["reason"], oc["ticks"])
    path = d / "frames.bin"
    data = path.read_bytes()
    if len(data) < HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, rsize, n, ncam, h, w = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: version {version} unsupported (expected {VERSION})")
    if rsize != _record_size(ncam, h, w):
        raise ValueError(f"{path}: record size {rsize} inconsistent with {ncam}x{h}x{w} rasters")
    expected = HEADER.size + rsize * n
    if len(data) != expected:
        raise ValueError(f"{path}: {len(data)} bytes, header declares {expected} "
                         f"(truncated at frame {(len(data) - HEADER.size) // rsize})")
    if n != meta["frames"]:
        raise ValueError(f"{path}: {n} frames but meta.json declares {meta['frames']}")
    scalars = np.empty((n, SCALARS))
    images = np.empty((n, ncam, h, w, 3), np.uint8)
    depth = np.empty((n, ncam, h, w), np.uint16)
    n_img, n_dep = ncam * h * w * 3, ncam * h * w * 2
    for t in range(n):
        off = HEADER.size + t * rsize
        body = data[off:off + rsize - 4]
        (crc,) = struct.unpack_from("<I", data, off + rsize - 4)
        if zlib.crc32(body) != crc:
            raise ValueError(f"{path}: checksum mismatch in frame {t} (byte offset {off})")
        scalars[t] = np.frombuffer(body, "<f8", SCALARS)
        images[t] = np.frombuffer(body, np.uint8, n_img, 8 * SCALARS).reshape(ncam, h, w, 3)
        depth[t] = np.frombuffer(body, "<u2", n_dep // 2, 8 * SCALARS + n_img).reshape(ncam, h, w)
    ep = EpisodeRecord(meta, scalars, images, depth, outcome)
    pe, oe = pose_errors(ep.pose(n - 1), ep.goal())
    if abs(pe - outcome.pe) > 1e-9 or abs(oe - outcome.oe) > 1e-9:
        raise ValueError(f"{d}: outcome.json disagrees with the last frame")
    if oc.get("accepted") and not quality_filter(ep).accepted:
        raise ValueError(f"{d}: marked accepted but fails the quality filter")
    return ep


MANIFEST_HEADER = ["episode", "seed", "kind", "frames", "pe_m", "oe_deg", "collided", "reason", "accepted"]


def write_dataset(eps, root, accepted_only=True):
    """Write episodes under ``root/<kind>_<seed>/`` plus ``manifest.csv``; returns written dirs."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows, dirs = [], []
    for ep in eps:
        report = quality_filter(ep)
        if accepted_only and not report.accepted:
            raise ValueError(f"episode {ep.kind} seed {ep.meta['seed']} fails the quality filter")
        name = f"{ep.kind}_{ep.meta['seed']:05d}"
        write_episode(ep, root / name)
        dirs.append(root / name)
        rows.append([name, ep.meta["seed"], ep.kind, len(ep), f"{report.pe:.6f}", f"{report.oe:.6f}",
                     int(report.collided), ep.outcome.reason, int(report.accepted)])
    manifest = root / "manifest.csv"
    existing = []
    if manifest.exists():
        with open(manifest, newline="") as fh:
            existing = [r for r in csv.reader(fh)][1:]
    names = {r[0] for r in rows}
    merged = sorted([r for r in existing if r[0] not in names] + [list(map(str, r)) for r in rows])
    with open(manifest, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(MANIFEST_HEADER)
        wr.writerows(merged)
    return dirs


def read_dataset(root, limit=None):
    """Episodes listed in ``root/manifest.csv`` (in manifest order)."""
    root = Path(root)
    with open(root / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if limit is not None:
        rows = rows[:limit]
    return [read_episode(root / r["episode"]) for r in rows]


# -- training targets and observations ---------------------------------------------
def target_sequence(ep: EpisodeRecord, t, horizon=tokens.T_MAX):
    """Token sequence of the expert commands from frame ``t``: up to ``horizon``
    commands, closed by EOS (early at the end of the episode)."""
    cmds = [ep.command(k) for k in range(t, min(t + horizon, len(ep)))]
    return tokens.build_sequence(cmds)


def observation(ep: EpisodeRecord, t, ped_states=None, with_targets=True) -> Observation:
    """Batch-of-one model inputs for frame ``t``."""
    ped_states = ep.ped_states() if ped_states is None else ped_states
    pose = ep.pose(t)
    hist, mask = motion.pedestrian_history(ped_states, t, pose)
    fut = fmask = dtarget = None
    if with_targets:
        fut, fmask = motion.future_positions(ped_states, t, pose)
        fut, fmask = fut[None], fmask[None]
        dtarget = bev.depth_targets(ep.depth[t].astype(np.float64) / 1000.0)[None]
    row = ep.scalars[t]
    return Observation(
        images=ep.images[t][None].astype(np.float64) / 255.0,
        goal=bev.goal_features(ep.goal(), pose)[None],
        history=hist[None], ped_mask=mask[None],
        ego_va=np.array([[row[_COL["v"]], row[_COL["a"]]]]),
        future=fut, future_mask=fmask, depth_targets=dtarget,
    )


def samples(eps):
    """All (episode index, frame index) pairs."""
    return [(i, t) for i, ep in enumerate(eps) for t in range(len(ep))]
