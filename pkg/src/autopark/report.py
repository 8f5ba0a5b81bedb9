"""Figures and tables for a logged episode.

Pixmaps are drawn directly; matplotlib renders PNG companions of the same
content. Top-down rasters are in the ego frame at the selected frame: forward
is up, left is left, 0.1 m per pixel over the 20 m x 20 m perception window.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from . import bev, motion, tokens  # noqa: E402
from .camera import write_ppm  # noqa: E402
from .dataset import EpisodeRecord, handover_state, observation, read_episode  # noqa: E402
from .evaluate import EpisodeResult  # noqa: E402
from .policy import Policy  # noqa: E402
from .world import CAR_LENGTH, CAR_WIDTH, PED_SIZE, OrientedBox, VehiclePose, make_layout  # noqa: E402

SIZE = bev.BEV_SIZE
RES = bev.BEV_RES
HALF = bev.BEV_RANGE

COLOURS = {
    "ground": (72, 72, 72),
    "marking": (235, 235, 235),
    "vehicle": (40, 90, 200),
    "pedestrian": (220, 40, 40),
    "ego": (240, 200, 40),
    "goal": (60, 200, 90),
    "path": (250, 140, 30),
    "truth": (60, 220, 90),
    "predicted": (230, 60, 200),
}
PNG_META = {"Software": None}


def to_pixels(local):
    """Ego-frame (..., 2) metres -> (col, row) raster coordinates."""
    local = np.asarray(local, dtype=np.float64)
    col = (HALF - local[..., 1]) / RES
    row = (HALF - local[..., 0]) / RES
    return np.stack([col, row], axis=-1)


def _polygon(draw, ego: VehiclePose, box: OrientedBox, colour, outline_only=False):
    pts = [tuple(p) for p in to_pixels(ego.to_local(box.corners()))]
    if outline_only:
        draw.line(pts + [pts[0]], fill=colour, width=2)
    else:
        draw.polygon(pts, fill=colour)


def _polyline(draw, ego: VehiclePose, world_pts, colour, width=2, local=False):
    pts = np.asarray(world_pts, dtype=np.float64)
    if len(pts) < 2:
        return
    px = to_pixels(pts if local else ego.to_local(pts))
    draw.line([tuple(p) for p in px], fill=colour, width=width)


class SceneLog:
    """A recorded episode plus the static scene rebuilt from its metadata."""

    def __init__(self, ep: EpisodeRecord):
        self.ep = ep
        world, _ = handover_state(ep.meta["seed"], ep.kind, ep.meta["pedestrians"], ep.meta["occupancy"])
        self.statics = world.static_vehicles
        self.layout = make_layout(ep.kind)
        self.goal = ep.goal()
        self.peds = ep.ped_states()

    def default_frame(self):
        """Frame with the most pedestrians present; the middle frame if none ever are."""
        counts = np.array([m.sum() for *_, m in self.peds])
        return int(np.argmax(counts)) if counts.max() > 0 else len(self.ep) // 2

    def scene_raster(self, t):
        ego = self.ep.pose(t)
        img = Image.new("RGB", (SIZE, SIZE), COLOURS["ground"])
        draw = ImageDraw.Draw(img)
        near = lambda b: np.hypot(b.cx - ego.x, b.cy - ego.y) < 2 * HALF  # noqa: E731
        for mark in self.layout.markings:
            if near(mark):
                _polygon(draw, ego, mark, COLOURS["marking"])
        _polygon(draw, ego, OrientedBox(self.goal.x_g, self.goal.y_g, self.goal.psi_g, CAR_LENGTH, CAR_WIDTH),
                 COLOURS["goal"], outline_only=True)
        for box in self.statics:
            if near(box):
                _polygon(draw, ego, box, COLOURS["vehicle"])
        pos, _, _, mask = self.peds[t]
        for p in pos[mask]:
            _polygon(draw, ego, OrientedBox(p[0], p[1], 0.0, PED_SIZE, PED_SIZE), COLOURS["pedestrian"])
        trail = self.ep.scalars[:, 1:3]
        _polyline(draw, ego, trail, COLOURS["path"], width=1)
        _polygon(draw, ego, ego.footprint(), COLOURS["ego"], outline_only=True)
        return np.asarray(img, dtype=np.uint8).copy()


def heatmap_grid(weights):
    """(625,) token weights -> 25x25 display grid (forward up, left on the left)."""
    w = np.asarray(weights, dtype=np.float64).reshape(bev.TOKEN_GRID, bev.TOKEN_GRID)
    return w[::-1, ::-1].copy()


def colourise(grid, cmap="viridis"):
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    norm = (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)
    rgba = matplotlib.colormaps[cmap](norm)
    return np.round(rgba[..., :3] * 255.0).astype(np.uint8)


def attention_weights(policy: Policy, enc):
    """Goal-to-BEV attention averaged over heads; for the concat variant (no goal
    attention) the attention the motion token pays to each BEV token in the last
    fusion layer."""
    if enc.bev.goal_weights is not None:
        return enc.bev.goal_weights[0].mean(axis=(0, 1))
    last = policy.last_fusion_weights[-1]  # (B, heads, 626, 626)
    return last[0, :, -1, : bev.N_TOKENS].mean(axis=0)


def bev_feature_norm(policy: Policy, obs, enc):
    """Per-cell feature norm (200, 200) of the full-resolution splat, display-oriented."""
    geo = policy.bev.geometry
    images = np.asarray(obs.images, dtype=np.float64)
    b, ncam = images.shape[:2]
    fmaps = bev.encode_images(policy.bev.encoder, images.reshape(b * ncam, *images.shape[2:]))
    fmaps = fmaps.data.reshape(b, ncam, geo.h, geo.w, bev.FEAT_CHANNELS)
    grid = bev.lift_splat(fmaps, enc.bev.depth.data, geo).data[0]
    return np.linalg.norm(grid, axis=-1)[::-1, ::-1].copy()


def prediction_overlay(scene: SceneLog, t, pred_local, base=None):
    """Ground-truth (green) and predicted (magenta) future tracks on the scene raster."""
    ego = scene.ep.pose(t)
    img = Image.fromarray(scene.scene_raster(t) if base is None else base)
    draw = ImageDraw.Draw(img)
    fut, keep = motion.future_positions(scene.peds, t, ego)
    pos, _, _, mask = scene.peds[t]
    here = ego.to_local(pos)
    for i in np.flatnonzero(mask):
        if keep[i]:
            _polyline(draw, ego, np.vstack([here[i], fut[i]]), COLOURS["truth"], local=True)
        if pred_local is not None:
            _polyline(draw, ego, np.vstack([here[i], pred_local[i]]), COLOURS["predicted"], local=True)
    return np.asarray(img, dtype=np.uint8).copy()


FRAME_HEADER = ["frame", "time", "expert_accel", "expert_steer", "expert_gear", "policy_accel", "policy_steer",
                "policy_gear", "command_match", "peds", "pred_ade_m", "pred_fde_m"]


def _png(path, fig):
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)


def render_outputs(episode_dir, policy: Policy, out_dir, frame=None, every=5):
    """Write the figure set and metric tables for a logged episode; returns written paths."""
    episode_dir = Path(episode_dir)
    if not (episode_dir / "frames.bin").exists():
        raise FileNotFoundError(f"{episode_dir}: no episode log (frames.bin) found")
    ep = read_episode(episode_dir)
    scene = SceneLog(ep)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = scene.default_frame() if frame is None else int(frame)
    if not 0 <= t0 < len(ep):
        raise ValueError(f"frame {t0} outside 0..{len(ep) - 1}")

    rows, focus = [], None
    for t in range(len(ep)):
        if t % every and t != t0:
            continue
        obs = observation(ep, t, scene.peds)
        cmd, seq, enc = policy.act(obs)
        exp = ep.command(t)
        pred = enc.motion.pred.data[0] if enc.motion.pred is not None else None
        ade = fde = float("nan")
        mask = obs.future_mask[0]
        if pred is not None and mask.any():
            err = np.linalg.norm(pred[mask] - obs.future[0][mask], axis=-1)
            ade, fde = float(err.mean()), float(err[:, -1].mean())
        match = tokens.tokenize(cmd) == tokens.tokenize(exp)
        rows.append([t, f"{ep.column('time')[t]:.1f}", f"{exp.accel:.5f}", f"{exp.steer:.6f}", exp.gear,
                     f"{cmd.accel:.5f}", f"{cmd.steer:.6f}", cmd.gear, int(match), int(obs.ped_mask.sum()),
                     f"{ade:.4f}", f"{fde:.4f}"])
        if t == t0:
            focus = (attention_weights(policy, enc), pred, bev_feature_norm(policy, obs, enc))

    written = []
    raster = scene.scene_raster(t0)
    grid = heatmap_grid(focus[0])
    overlay = prediction_overlay(scene, t0, focus[1], raster)
    norm = focus[2]
    for name, img in (("bev_scene.ppm", raster), ("goal_attention.ppm", colourise(grid)),
                      ("bev_feature_norm.ppm", colourise(norm, "magma")),
                      ("pedestrian_prediction.ppm", overlay)):
        write_ppm(out / name, img)
        written.append(out / name)

    with open(out / "frames.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(FRAME_HEADER)
        wr.writerows(rows)
    written.append(out / "frames.csv")
    last = ep.pose(len(ep) - 1)
    g = ep.goal()
    res = EpisodeResult(ep.meta["seed"], ep.kind, last.x, last.y, last.psi, g.x_g, g.y_g, g.psi_g,
                        ep.outcome.collided, ep.outcome.reason, ep.outcome.ticks)
    matches = [int(r[8]) for r in rows]
    with open(out / "metrics.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["seed", "kind", "frames", "focus_frame", "pe_m", "oe_deg", "collided", "reason",
                     "command_match_rate"])
        wr.writerow([res.seed, res.kind, len(ep), t0, f"{res.pe:.6f}", f"{res.oe:.6f}", int(res.collided),
                     res.reason, f"{np.mean(matches):.4f}"])
    written.append(out / "metrics.csv")

    fig, axes = plt.subplots(1, 4, figsize=(16, 4.2))
    axes[0].imshow(raster)
    axes[0].set_title(f"scene, frame {t0}")
    im = axes[1].imshow(grid, cmap="viridis")
    axes[1].set_title("goal attention (25x25 tokens)")
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    im = axes[2].imshow(norm, cmap="magma")
    axes[2].set_title("BEV feature norm")
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    axes[3].imshow(overlay)
    axes[3].set_title("pedestrian futures: truth / predicted")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    _png(out / "summary.png", fig)
    written.append(out / "summary.png")

    fig, ax = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    arr = np.array([[float(v) for v in r[:8]] for r in rows])
    ax[0].step(arr[:, 1], arr[:, 2], where="post", label="expert")
    ax[0].step(arr[:, 1], arr[:, 5], where="post", label="policy")
    ax[0].set_ylabel("accel m/s^2")
    ax[0].legend(loc="upper right")
    ax[1].step(arr[:, 1], arr[:, 3], where="post")
    ax[1].step(arr[:, 1], arr[:, 6], where="post")
    ax[1].set_ylabel("steer rad")
    ax[1].set_xlabel("time s")
    fig.tight_layout()
    _png(out / "commands.png", fig)
    written.append(out / "commands.png")
    return written
