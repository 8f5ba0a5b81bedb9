"""Camera features to a goal-aware bird's-eye-view token sequence.

Pipeline per frame: shared strided conv encoder per camera, per-pixel depth
distribution, lift each (pixel, depth bin) through the rig geometry into the
ego-centred 200 x 200 grid (sum pooling), add the fixed 2D sine-cosine encoding,
average-pool to 25 x 25 tokens, project to ``d_model``, then let the goal token
attend over the tokens and add the resulting context back to every token.

Because the rig is fixed in the ego frame, every lifted point lands in the same
cell on every frame. :class:`SplatGeometry` precomputes those cells once; the
training path fuses splatting and pooling into one scatter onto the token grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .camera import IMAGE_SIZE, unproject_points
from .world import GoalSlot, VehiclePose, wrap_angle

FEAT_CHANNELS = 32
ENCODER_WIDTHS = (32, 64, FEAT_CHANNELS)
STRIDE = 8
N_DEPTH = 24
DEPTH_MIN, DEPTH_MAX = 0.5, 12.5
DEPTH_STEP = (DEPTH_MAX - DEPTH_MIN) / N_DEPTH
DEPTH_CENTRES = DEPTH_MIN + DEPTH_STEP * (np.arange(N_DEPTH) + 0.5)
BEV_RANGE = 10.0
BEV_RES = 0.1
BEV_SIZE = 200
Z_MAX = 3.0
POOL = 8
TOKEN_GRID = BEV_SIZE // POOL
N_TOKENS = TOKEN_GRID * TOKEN_GRID
D_MODEL = 64
GOAL_HEADS = 4
GOAL_SCALE = 10.0


# -- geometry ------------------------------------------------------------------
def feature_pixel_centres(height=IMAGE_SIZE, width=IMAGE_SIZE):
    """Image coordinates (u, v) of the pixel each feature cell samples, (h, w) grids.

    Cell (i, j) covers pixels [8i, 8i+8) x [8j, 8j+8); it is tied to the ray
    through the centre of pixel (8i + 4, 8j + 4).
    """
    cols = STRIDE * np.arange(width // STRIDE) + STRIDE // 2 + 0.5
    rows = STRIDE * np.arange(height // STRIDE) + STRIDE // 2 + 0.5
    return np.meshgrid(cols, rows)


def depth_bin(depth):
    """Bin index of metric depths; -1 outside [0.5, 12.5)."""
    depth = np.asarray(depth, dtype=np.float64)
    k = np.floor((depth - DEPTH_MIN) / DEPTH_STEP).astype(np.int64)
    return np.where((depth >= DEPTH_MIN) & (k < N_DEPTH), k, -1)


def bev_cell(points):
    """Flat BEV cell index (ix * 200 + iy) of ego-frame points; -1 when dropped."""
    pts = np.asarray(points, dtype=np.float64)
    ix = np.floor((pts[..., 0] + BEV_RANGE) / BEV_RES).astype(np.int64)
    iy = np.floor((pts[..., 1] + BEV_RANGE) / BEV_RES).astype(np.int64)
    ok = (ix >= 0) & (ix < BEV_SIZE) & (iy >= 0) & (iy < BEV_SIZE) & (pts[..., 2] <= Z_MAX)
    return np.where(ok, ix * BEV_SIZE + iy, -1)


def cell_to_token(cell):
    cell = np.asarray(cell)
    ix, iy = cell // BEV_SIZE, cell % BEV_SIZE
    return np.where(cell >= 0, (ix // POOL) * TOKEN_GRID + iy // POOL, -1)


def frustum_points(cam, ego_pose=None):
    """Lifted points (h, w, N_d, 3) of one camera; world frame when a pose is given."""
    u, v = feature_pixel_centres(cam.intr.height, cam.intr.width)
    return unproject_points(u[..., None], v[..., None], DEPTH_CENTRES, cam.intr, cam.extr, ego_pose)


def ground_depth(cam):
    """Camera depth at which each feature ray meets the ground (0 above the horizon)."""
    u, v = feature_pixel_centres(cam.intr.height, cam.intr.width)
    rays = np.stack([(u - cam.intr.cx) / cam.intr.fx, (v - cam.intr.cy) / cam.intr.fy, np.ones_like(u)], -1)
    dirs = rays @ cam.extr.rotation  # ego frame, unit camera z
    h = cam.extr.centre()[2]
    with np.errstate(divide="ignore"):
        return np.where(dirs[..., 2] < 0, -h / dirs[..., 2], 0.0)


def depth_prior(cam, width=DEPTH_STEP):
    """Fixed per-pixel radial-basis encoding of the ground depth over the bin centres.

    Gives the 1x1 depth head the camera geometry it cannot infer from a small
    receptive field over flat-coloured ground.
    """
    g = ground_depth(cam)[..., None]
    prior = np.exp(-0.5 * ((g - DEPTH_CENTRES) / width) ** 2)
    return np.where(g > 0, prior, 0.0)


class SplatGeometry:
    """Per-rig cached cell and token index of every (camera, pixel, bin)."""

    def __init__(self, rig):
        self.rig = tuple(rig)
        pts = np.stack([frustum_points(cam) for cam in self.rig])  # (ncam, h, w, K, 3)
        self.points = pts
        self.ncam, self.h, self.w = pts.shape[:3]
        self.cells = bev_cell(pts).reshape(self.ncam * self.h * self.w, N_DEPTH)
        self.tokens = cell_to_token(self.cells)
        self.prior = np.stack([depth_prior(cam) for cam in self.rig])

    @property
    def n_pixels(self):
        return self.ncam * self.h * self.w


_GEOMETRY_CACHE = {}


def splat_geometry(rig):
    key = tuple((c.name, c.intr, c.extr.rotation.tobytes(), c.extr.translation.tobytes()) for c in rig)
    if key not in _GEOMETRY_CACHE:
        _GEOMETRY_CACHE[key] = SplatGeometry(rig)
    return _GEOMETRY_CACHE[key]


# -- encoder and depth ----------------------------------------------------------
class ImageEncoder(nn.Module):
    """Three stride-2 3x3 conv stages: 128 x 128 x 3 -> 16 x 16 x 32."""

    def __init__(self, rng, widths=ENCODER_WIDTHS):
        c_in = 3
        self.stages = []
        for c in widths:
            self.stages.append(nn.Conv2d(rng, c_in, c, kernel=3, stride=2, padding=1))
            c_in = c

    def __call__(self, images):
        x = images
        for i, conv in enumerate(self.stages):
            x = conv(x)
            if i < len(self.stages) - 1:
                x = ad.relu(x)
        return x


def encode_images(encoder, images):
    """``images``: (N, 128, 128, 3) array or tensor -> (N, 16, 16, 32) feature maps."""
    shape = images.shape
    if len(shape) != 4 or shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValueError(f"expected (N, {IMAGE_SIZE}, {IMAGE_SIZE}, 3) images, got {tuple(shape)}")
    return encoder(images)


class DepthHead(nn.Module):
    """1x1 convolution over features plus the fixed depth prior, softmax over bins."""

    def __init__(self, rng, c_feat=FEAT_CHANNELS, n_bins=N_DEPTH):
        self.proj = nn.Linear(rng, c_feat + n_bins, n_bins)

    def logits(self, fmap, prior):
        x = ad.concat([ad.as_tensor(fmap), ad.as_tensor(prior)], axis=-1)
        return self.proj(x)

    def __call__(self, fmap, prior):
        return ad.softmax(self.logits(fmap, prior), axis=-1)


def predict_depth(head, fmap, prior):
    return head(fmap, prior)


# -- splat, encoding, pooling ----------------------------------------------------
def lift_splat(fmaps, depths, geometry: SplatGeometry):
    """Full-resolution BEV grid (B, 200, 200, C) by sum pooling of lifted features.

    ``fmaps``: (B, ncam, h, w, C); ``depths``: (B, ncam, h, w, N_d).
    """
    fmaps, depths = ad.as_tensor(fmaps), ad.as_tensor(depths)
    b = fmaps.shape[0]
    if fmaps.shape[1] != geometry.ncam or depths.shape[1] != geometry.ncam:
        raise ValueError("camera count differs between features, depths and rig")
    feats = fmaps.reshape(b, geometry.n_pixels, fmaps.shape[-1])
    probs = depths.reshape(b, geometry.n_pixels, N_DEPTH)
    grid = ad.sparse_scatter(feats, probs, geometry.cells, BEV_SIZE * BEV_SIZE)
    return grid.reshape(b, BEV_SIZE, BEV_SIZE, fmaps.shape[-1])


def splat_points(points, feats, weights, ego_pose=None):
    """Sum ``weights * feats`` of arbitrary lifted points into the (200, 200, C) grid.

    ``points`` are world coordinates when ``ego_pose`` is given, else ego frame.
    """
    pts = np.asarray(points, dtype=np.float64)
    if ego_pose is not None:
        xy = ego_pose.to_local(pts[:, :2])
        pts = np.c_[xy, pts[:, 2]]
    cells = bev_cell(pts)[:, None]
    grid = ad.sparse_scatter(np.asarray(feats)[None], np.asarray(weights, dtype=np.float64)[None, :, None],
                             cells, BEV_SIZE * BEV_SIZE)
    return grid.data.reshape(BEV_SIZE, BEV_SIZE, -1)


def posenc_2d(size=BEV_SIZE, channels=FEAT_CHANNELS):
    """(size, size, channels): first half encodes the row index, second half the column."""
    if channels % 2 or (channels // 2) % 2:
        raise ValueError(f"2D sine-cosine encoding needs channels divisible by 4, got {channels}")
    half = channels // 2
    rows = nn.sincos_1d(np.arange(size), half)
    out = np.empty((size, size, channels))
    out[:, :, :half] = rows[:, None, :]
    out[:, :, half:] = rows[None, :, :]
    return out


def add_posenc(grid):
    grid = ad.as_tensor(grid)
    if grid.shape[-1] % 2:
        raise ValueError(f"channel count must be even, got {grid.shape[-1]}")
    return grid + posenc_2d(grid.shape[-2], grid.shape[-1])


def avg_pool_tokens(grid):
    """(B, 200, 200, C) -> (B, 625, C) by 8 x 8 mean pooling, row-major tokens."""
    b, _, _, c = grid.shape
    g = grid.reshape(b, TOKEN_GRID, POOL, TOKEN_GRID, POOL, c)
    return ad.mean(g, axis=(2, 4)).reshape(b, N_TOKENS, c)


@lru_cache(maxsize=None)
def pooled_posenc():
    pe = posenc_2d().reshape(TOKEN_GRID, POOL, TOKEN_GRID, POOL, FEAT_CHANNELS)
    return pe.mean(axis=(1, 3)).reshape(N_TOKENS, FEAT_CHANNELS)


def pooled_bev(fmaps, depths, geometry: SplatGeometry):
    """Fused splat + posenc + pooling straight onto the 625-token grid."""
    fmaps, depths = ad.as_tensor(fmaps), ad.as_tensor(depths)
    b = fmaps.shape[0]
    feats = fmaps.reshape(b, geometry.n_pixels, fmaps.shape[-1])
    probs = depths.reshape(b, geometry.n_pixels, N_DEPTH)
    tokens = ad.weighted_scatter(feats, probs, geometry.tokens, N_TOKENS)
    return tokens * (1.0 / (POOL * POOL)) + pooled_posenc()


# -- goal ------------------------------------------------------------------------
def goal_features(goal: GoalSlot, ego: VehiclePose):
    """(x, y, cos psi, sin psi) of the goal in the ego frame, positions scaled by 1/10."""
    local = ego.to_local([goal.x_g, goal.y_g])[0]
    dpsi = wrap_angle(goal.psi_g - ego.psi)
    return np.array([local[0] / GOAL_SCALE, local[1] / GOAL_SCALE, math.cos(dpsi), math.sin(dpsi)])


def goal_encode(mlp, goal_feats):
    return mlp(ad.as_tensor(goal_feats))


def goal_cross_attention(attn, goal_emb, tokens):
    """Goal token queries the BEV tokens; its context is added to every token.

    ``goal_emb``: (B, d); ``tokens``: (B, N, d). Returns (attended (B, N, d),
    weights (B, heads, 1, N)).
    """
    b, d = goal_emb.shape
    ctx, weights = attn(goal_emb.reshape(b, 1, d), tokens)
    return tokens + ctx, weights


@dataclass
class BevOutput:
    tokens: Tensor  # (B, 625, d) goal-aware
    depth: Tensor  # (B, ncam, h, w, N_d)
    depth_logits: Tensor
    goal_weights: np.ndarray | None  # (B, heads, 1, 625)
    goal_emb: Tensor


class BevPerception(nn.Module):
    def __init__(self, rng, rig, d_model=D_MODEL, target_concat=False):
        self.geometry = splat_geometry(tuple(rig))
        self.encoder = ImageEncoder(rng)
        self.depth_head = DepthHead(rng)
        self.token_proj = nn.Linear(rng, FEAT_CHANNELS, d_model)
        self.goal_mlp = nn.MLP(rng, 4, d_model, d_model)
        self.target_concat = target_concat
        if target_concat:
            self.concat_proj = nn.Linear(rng, 2 * d_model, d_model)
        else:
            self.goal_attn = nn.MultiHeadAttention(rng, d_model, GOAL_HEADS)

    def __call__(self, images, goal_feats, drop_goal_context=False):
        """``images``: (B, ncam, 128, 128, 3); ``goal_feats``: (B, 4).

        ``drop_goal_context`` skips the goal cross-attention residual (inference-time
        ablation); it has no effect on the concat variant.
        """
        images = np.asarray(images, dtype=np.float64)
        b, ncam = images.shape[:2]
        geo = self.geometry
        fmaps = encode_images(self.encoder, images.reshape(b * ncam, *images.shape[2:]))
        fmaps = fmaps.reshape(b, ncam, geo.h, geo.w, FEAT_CHANNELS)
        prior = np.broadcast_to(geo.prior, (b,) + geo.prior.shape)
        logits = self.depth_head.logits(fmaps, prior)
        depth = ad.softmax(logits, axis=-1)
        tokens = self.token_proj(pooled_bev(fmaps, depth, geo))
        goal_emb = goal_encode(self.goal_mlp, goal_feats)
        if self.target_concat:
            d = goal_emb.shape[-1]
            tiled = ad.broadcast_to(goal_emb.reshape(b, 1, d), (b, N_TOKENS, d))
            return BevOutput(self.concat_proj(ad.concat([tokens, tiled], axis=-1)), depth, logits, None, goal_emb)
        if drop_goal_context:
            return BevOutput(tokens, depth, logits, None, goal_emb)
        attended, weights = goal_cross_attention(self.goal_attn, goal_emb, tokens)
        return BevOutput(attended, depth, logits, weights, goal_emb)


def depth_targets(depth_maps):
    """Bin targets at the feature cells from rendered depth (B, ncam, 128, 128); -1 = ignore."""
    d = np.asarray(depth_maps)
    off = STRIDE // 2
    return depth_bin(d[..., off::STRIDE, off::STRIDE])


def depth_loss(logits, targets):
    """Mean cross-entropy over feature cells with a valid depth bin."""
    t = np.asarray(targets).reshape(-1)
    keep = t >= 0
    if not keep.any():
        return Tensor(0.0)
    flat = logits.reshape(-1, N_DEPTH)
    return ad.cross_entropy(flat[np.flatnonzero(keep)], t[keep])
