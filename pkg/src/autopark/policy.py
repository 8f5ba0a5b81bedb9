"""End-to-end parking policy: perception + motion context -> fused tokens -> control tokens."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn, tokens
from .autodiff import Tensor
from .bev import D_MODEL, N_TOKENS, BevPerception, depth_loss
from .camera import default_rig
from .motion import MotionContext, prediction_loss

FUSION_LAYERS = 4
FUSION_HEADS = 8
DECODER_LAYERS = 4
DECODER_HEADS = 8
FF_WIDTH = 4 * D_MODEL
N_FUSED = N_TOKENS + 1


@dataclass
class Observation:
    """A batch of model inputs; leading axis is the batch."""

    images: np.ndarray  # (B, ncam, 128, 128, 3)
    goal: np.ndarray  # (B, 4) ego-frame goal features
    history: np.ndarray  # (B, 8, 10, 6)
    ped_mask: np.ndarray  # (B, 8)
    ego_va: np.ndarray  # (B, 2)
    future: np.ndarray | None = None  # (B, 8, 10, 2)
    future_mask: np.ndarray | None = None  # (B, 8)
    depth_targets: np.ndarray | None = None  # (B, ncam, 16, 16), -1 = ignore

    def __len__(self):
        return self.images.shape[0]

    @classmethod
    def stack(cls, items):
        items = list(items)
        fields = {}
        for name in cls.__dataclass_fields__:
            vals = [getattr(o, name) for o in items]
            fields[name] = None if any(v is None for v in vals) else np.concatenate(vals)
        return cls(**fields)


@dataclass
class Encoded:
    fused: Tensor  # (B, 626, d)
    bev: object
    motion: object


def causal_mask(n):
    return np.tril(np.ones((n, n), dtype=bool))


def ctrl_loss(logits, targets):
    """Mean cross-entropy of teacher-forced logits (B, L, V) against targets (B, L).

    Targets of -1 are padding and excluded; every real position, EOS included,
    counts once.
    """
    targets = np.asarray(targets)
    if logits.shape[:2] != targets.shape:
        raise ValueError(f"logits {logits.shape[:2]} and targets {targets.shape} are misaligned")
    flat = logits.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    keep = np.flatnonzero(t >= 0)
    if keep.size == t.size:
        return ad.cross_entropy(flat, t)
    return ad.cross_entropy(flat[keep], t[keep])


def teacher_forcing_pairs(seqs):
    """Padded decoder inputs and targets from full token sequences (BOS ... EOS)."""
    length = max(len(s) for s in seqs) - 1
    inputs = np.full((len(seqs), length), tokens.EOS, dtype=np.int64)
    targets = np.full((len(seqs), length), -1, dtype=np.int64)
    for i, s in enumerate(seqs):
        inputs[i, : len(s) - 1] = s[:-1]
        targets[i, : len(s) - 1] = s[1:]
    return inputs, targets


class Policy(nn.Module):
    def __init__(self, rng, rig=None, target_concat=False):
        self.rig = default_rig() if rig is None else tuple(rig)
        self.bev = BevPerception(rng, self.rig, D_MODEL, target_concat)
        self.motion = MotionContext(rng, D_MODEL)
        self.fusion_pos = nn.param(rng.normal(0.0, 0.02, size=(N_FUSED, D_MODEL)))
        self.fusion = [nn.EncoderLayer(rng, D_MODEL, FUSION_HEADS, FF_WIDTH) for _ in range(FUSION_LAYERS)]
        self.fusion_ln = nn.LayerNorm(D_MODEL)
        self.token_embed = nn.param(rng.normal(0.0, 0.1, size=(tokens.VOCAB_SIZE, D_MODEL)))
        self.decoder = [nn.DecoderLayer(rng, D_MODEL, DECODER_HEADS, FF_WIDTH) for _ in range(DECODER_LAYERS)]
        self.decoder_ln = nn.LayerNorm(D_MODEL)
        self.head = nn.Linear(rng, D_MODEL, tokens.VOCAB_SIZE)

    @property
    def target_concat(self):
        return self.bev.target_concat

    # -- encoder side ---------------------------------------------------------
    def encode(self, obs: Observation, teacher_forcing=False, disable_pedestrians=False,
               drop_goal_context=False) -> Encoded:
        bev_out = self.bev(obs.images, obs.goal, drop_goal_context)
        motion_out = self.motion(obs.history, obs.ped_mask, obs.ego_va, obs.future,
                                 teacher_forcing and obs.future is not None, disable_pedestrians)
        return Encoded(self.fuse(bev_out.tokens, motion_out.context), bev_out, motion_out)

    def fuse(self, bev_tokens, motion_context):
        b, _, d = bev_tokens.shape
        x = ad.concat([bev_tokens, motion_context.reshape(b, 1, d)], axis=1) + self.fusion_pos
        self.last_fusion_weights = []
        for layer in self.fusion:
            x, w = layer(x)
            self.last_fusion_weights.append(w)
        return self.fusion_ln(x)

    # -- decoder side ---------------------------------------------------------
    def memory_kv(self, fused):
        return [layer.cross_attn.project_kv(fused) for layer in self.decoder]

    def decoder_logits(self, fused, token_ids, memory_kv=None):
        """Logits (B, L, V) at every position of the (B, L) input token ids."""
        ids = np.asarray(token_ids, dtype=np.int64)
        b, n = ids.shape
        x = ad.take_rows(self.token_embed, ids) + nn.sincos_1d(np.arange(n), D_MODEL)
        mask = causal_mask(n)
        kvs = memory_kv or [None] * len(self.decoder)
        for layer, kv in zip(self.decoder, kvs):
            x = layer(x, fused, mask, kv)
        return self.head(self.decoder_ln(x))

    def decode_step(self, fused, prefix, memory_kv=None):
        """Next-token distribution (V,) after a prefix for a single fused sequence."""
        prefix = [int(t) for t in prefix]
        if not prefix or prefix[0] != tokens.BOS or len(prefix) >= tokens.MAX_SEQ_LEN:
            raise ValueError(f"malformed prefix {prefix}")
        for i, t in enumerate(prefix[1:]):
            if tokens.field_of(t) != i % 3:
                raise ValueError(f"prefix token {t} at position {i + 1} breaks the field rotation")
        logits = self.decoder_logits(fused, [prefix], memory_kv)
        return ad.softmax(logits[:, -1, :], axis=-1).data[0]

    def rollout(self, fused):
        """Greedy decoding of one fused sequence (1, 626, d) with grammar masking."""
        kv = self.memory_kv(fused)
        seq = [tokens.BOS]
        while True:
            logits = self.decoder_logits(fused, [seq], kv).data[0, -1]
            allowed = tokens.allowed_next(len(seq))
            nxt = int(np.argmax(np.where(allowed, logits, -np.inf)))
            seq.append(nxt)
            if nxt == tokens.EOS:
                return seq

    def act(self, obs: Observation, disable_pedestrians=False, drop_goal_context=False):
        """First command of the greedy rollout for a single observation."""
        enc = self.encode(obs, disable_pedestrians=disable_pedestrians, drop_goal_context=drop_goal_context)
        seq = self.rollout(enc.fused)
        return tokens.parse_sequence(seq)[0], seq, enc

    # -- training objective ---------------------------------------------------
    def loss(self, obs: Observation, seqs, pred_weight=0.5, depth_weight=0.0,
             disable_pedestrians=False):
        """(total loss, dict of parts, token accuracy stats) on one batch."""
        enc = self.encode(obs, teacher_forcing=True, disable_pedestrians=disable_pedestrians)
        inputs, targets = teacher_forcing_pairs(seqs)
        logits = self.decoder_logits(enc.fused, inputs)
        l_ctrl = ctrl_loss(logits, targets)
        total = l_ctrl
        parts = {"ctrl": l_ctrl.item()}
        if pred_weight and enc.motion.pred_forced is not None and obs.future_mask is not None:
            l_pred = prediction_loss(enc.motion.pred_forced, obs.future, obs.future_mask)
            total = total + pred_weight * l_pred
            parts["pred"] = l_pred.item()
        if depth_weight and obs.depth_targets is not None:
            l_depth = depth_loss(enc.bev.depth_logits, obs.depth_targets)
            total = total + depth_weight * l_depth
            parts["depth"] = l_depth.item()
        valid = targets >= 0
        correct = int(((np.argmax(logits.data, axis=-1) == targets) & valid).sum())
        return total, parts, (correct, int(valid.sum()))


# -- checkpoint ------------------------------------------------------------------
MAGIC = b"APPOLICY"
VERSION = 1


def save_checkpoint(policy: Policy, path):
    params = policy.named_parameters()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name, p in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Ordered {name: array} from a checkpoint file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a policy checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(data):
                raise ValueError(f"{path}: truncated at parameter {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def load_checkpoint(path, rig=None):
    arrays = read_checkpoint(path)
    policy = Policy(np.random.default_rng(0), rig, target_concat="bev.concat_proj.weight" in arrays)
    params = policy.named_parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise ValueError(f"{path}: parameter names do not match the architecture: {missing[:5]}")
    for name, p in params.items():
        if p.data.shape != arrays[name].shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        p.data[...] = arrays[name]
    return policy
