"""Pedestrian trajectory prediction and the ego motion-context token.

A GRU encoder summarises each pedestrian's last ``HISTORY`` steps of
(pos, vel, acc) in the ego frame; a GRU decoder rolls out ``HORIZON`` future
positions as per-step displacements. Predicted tracks are embedded, tagged with
a sinusoidal encoding of where the pedestrian stands, and attended to by the
ego token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .world import PED_CAPACITY

HISTORY = 10
HORIZON = 10
HIDDEN = 32
DEC_INPUT = 16
D_MODEL = 64
EGO_HEADS = 4
POS_SCALE = 10.0  # metres per network unit on positional inputs


def gru_encode(cell: nn.GRUCell, history, mask):
    """(B, P, H, 6) histories -> (B, P, hidden). Absent pedestrians see zero inputs."""
    history = np.asarray(history, dtype=np.float64) * np.asarray(mask, dtype=np.float64)[..., None, None]
    b, p, steps, feat = history.shape
    x = history.reshape(b * p, steps, feat) / POS_SCALE
    h = Tensor(np.zeros((b * p, cell.n_hidden)))
    for t in range(steps):
        h = cell(x[:, t, :], h)
    return h.reshape(b, p, cell.n_hidden)


class TrajectoryDecoder(nn.Module):
    def __init__(self, rng, n_hidden=HIDDEN, n_in=DEC_INPUT):
        self.inp = nn.Linear(rng, 2, n_in)
        self.cell = nn.GRUCell(rng, n_in, n_hidden)
        self.out = nn.Linear(rng, n_hidden, 2)

    def step_input(self, pos):
        return self.inp(ad.as_tensor(pos) * (1.0 / POS_SCALE))


def gru_decode(dec: TrajectoryDecoder, hidden, last_pos, horizon=HORIZON, teacher_forcing=False,
               ground_truth=None, inputs_out=None):
    """Autoregressive future positions (B, P, horizon, 2).

    Step t consumes the projection of the position at t-1 (ground truth under
    teacher forcing, else the previous prediction); the first step uses the
    current position ``last_pos``. ``inputs_out``, if a list, collects the
    decoder inputs for inspection.
    """
    if teacher_forcing and ground_truth is None:
        raise ValueError("teacher forcing needs ground-truth future positions")
    b, p, n = hidden.shape
    h = hidden.reshape(b * p, n)
    prev = ad.as_tensor(np.asarray(last_pos, dtype=np.float64).reshape(b * p, 2))
    gt = None if ground_truth is None else np.asarray(ground_truth, dtype=np.float64).reshape(b * p, horizon, 2)
    outs = []
    for t in range(horizon):
        x = dec.step_input(prev)
        if inputs_out is not None:
            inputs_out.append(x.data.reshape(b, p, -1))
        h = dec.cell(x, h)
        pos = prev + dec.out(h)
        outs.append(pos)
        prev = ad.as_tensor(gt[:, t, :]) if teacher_forcing else pos
    return ad.stack(outs, axis=1).reshape(b, p, horizon, 2)


def prediction_loss(pred, gt, mask):
    """Mean squared Euclidean error per future point, over present pedestrians."""
    pred = ad.as_tensor(pred)
    return ad.mse_masked(pred, gt, mask) * float(pred.shape[-1])


def ego_ped_cross_attention(attn: nn.MultiHeadAttention, ego_token, ped_emb, mask):
    """Ego token attends over present pedestrians, with a residual path.

    With nobody present the attention term is dropped entirely so the output is
    the ego token itself. Returns (context (B, d), weights (B, heads, 1, P)).
    """
    mask = np.asarray(mask, dtype=bool)
    b, d = ego_token.shape
    ctx, weights = attn(ego_token.reshape(b, 1, d), ped_emb, mask[:, None, None, :])
    any_present = mask.any(axis=1).astype(np.float64)[:, None]
    return ego_token + ctx.reshape(b, d) * any_present, weights


def location_encoding(pos, dim):
    """Sine-cosine encoding of ego-frame positions (..., 2) in 0.1 m units.

    Half the channels encode x, half y. Tied to where a pedestrian is rather than
    which slot it occupies, so slot order carries no information.
    """
    pos = np.asarray(pos, dtype=np.float64)
    flat = pos.reshape(-1, 2) / 0.1
    half = dim // 2
    enc = np.concatenate([nn.sincos_1d(flat[:, 0], half), nn.sincos_1d(flat[:, 1], half)], axis=1)
    return enc.reshape(pos.shape[:-1] + (dim,))


@dataclass
class MotionOutput:
    context: Tensor  # (B, d)
    ego_token: Tensor
    pred: Tensor | None  # free-running (B, P, HORIZON, 2), zero for absent slots
    pred_forced: Tensor | None  # teacher-forced, only when ground truth was supplied
    weights: np.ndarray | None


class MotionContext(nn.Module):
    def __init__(self, rng, d_model=D_MODEL):
        self.encoder = nn.GRUCell(rng, 6, HIDDEN)
        self.decoder = TrajectoryDecoder(rng)
        self.ped_embed = nn.Linear(rng, 2 * HORIZON, d_model)
        self.ego_mlp = nn.MLP(rng, 2, d_model, d_model)
        self.attn = nn.MultiHeadAttention(rng, d_model, EGO_HEADS)
        self.d_model = d_model

    def ego_token(self, ego_va):
        pe = nn.sincos_1d([0.0], self.d_model)[0]
        return self.ego_mlp(np.asarray(ego_va, dtype=np.float64)) + pe

    def predict(self, history, mask, teacher_forcing=False, gt_future=None):
        return self._predict(history, mask, teacher_forcing, gt_future)[0]

    def _predict(self, history, mask, teacher_forcing, gt_future):
        m = np.asarray(mask, dtype=np.float64)[:, :, None, None]
        hidden = gru_encode(self.encoder, history, mask)
        last = np.asarray(history)[:, :, -1, :2]
        free = gru_decode(self.decoder, hidden, last, HORIZON) * m
        forced = None
        if teacher_forcing:
            forced = gru_decode(self.decoder, hidden, last, HORIZON, True, gt_future) * m
        return (forced if teacher_forcing else free), free, forced

    def __call__(self, history, mask, ego_va, gt_future=None, teacher_forcing=False, disable_pedestrians=False):
        """Motion context. Under teacher forcing the forced rollout feeds only the
        predictor loss; the embeddings always use the free-running prediction, as
        at inference."""
        ego = self.ego_token(ego_va)
        if disable_pedestrians:
            return MotionOutput(ego, ego, None, None, None)
        mask = np.asarray(mask, dtype=bool)
        _, pred, forced = self._predict(history, mask, teacher_forcing, gt_future)
        b, p = mask.shape
        emb = self.ped_embed(pred.reshape(b, p, 2 * HORIZON) * (1.0 / POS_SCALE))
        emb = emb + location_encoding(np.asarray(history)[:, :, -1, :2], self.d_model)
        context, weights = ego_ped_cross_attention(self.attn, ego, emb, mask)
        return MotionOutput(context, ego, pred, forced, weights)


# -- building inputs from simulator states ------------------------------------------
def _ped_local(states, ego_pose):
    """Per-state ego-frame (pos, vel, acc) (8, 6) and presence (8,)."""
    pos, vel, acc, mask = states
    c, s = np.cos(ego_pose.psi), np.sin(ego_pose.psi)
    rot = np.array([[c, s], [-s, c]])
    lp = (pos - np.array([ego_pose.x, ego_pose.y])) @ rot.T
    out = np.concatenate([lp, vel @ rot.T, acc @ rot.T], axis=1)
    return out * mask[:, None], mask


def pedestrian_history(ped_states, t, ego_pose, history=HISTORY):
    """History (8, H, 6) and mask (8,) for frame ``t`` of a pedestrian-state sequence.

    ``ped_states[k]`` is a (pos, vel, acc, mask) tuple of (8, 2)/(8,) arrays. Steps
    before the first frame, and steps where a slot was empty, are zero. The mask
    is the presence at frame ``t``.
    """
    hist = np.zeros((PED_CAPACITY, history, 6))
    for h in range(history):
        k = t - (history - 1 - h)
        if k < 0:
            continue
        feats, present = _ped_local(ped_states[k], ego_pose)
        hist[:, h, :] = feats
    mask = np.asarray(ped_states[t][3], dtype=bool)
    return hist * mask[:, None, None], mask


def future_positions(ped_states, t, ego_pose, horizon=HORIZON):
    """Ground-truth future positions (8, horizon, 2) in the frame-``t`` ego frame.

    The mask keeps pedestrians present at ``t`` and through every future step that
    exists in the sequence; tracks cut short by the end of the sequence are masked.
    """
    fut = np.zeros((PED_CAPACITY, horizon, 2))
    keep = np.asarray(ped_states[t][3], dtype=bool).copy()
    for h in range(horizon):
        k = t + 1 + h
        if k >= len(ped_states):
            keep[:] = False
            break
        feats, present = _ped_local(ped_states[k], ego_pose)
        keep &= present.astype(bool)
        fut[:, h, :] = feats[:, :2]
    return fut * keep[:, None, None], keep
