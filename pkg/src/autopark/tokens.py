"""Control discretisation and the flat token vocabulary.

Ids: acceleration bins 0..32, steering bins 33..65, gear 66 (forward) / 67
(reverse), BOS 68, EOS 69. Bins are uniform with centres on both range
endpoints, so the odd count puts an exact zero in the middle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import A_MAX, FORWARD, REVERSE, STEER_MAX

N_ACCEL = 33
N_STEER = 33
ACCEL_LO, ACCEL_HI = -A_MAX, A_MAX
STEER_LO, STEER_HI = -STEER_MAX, STEER_MAX
ACCEL_STEP = (ACCEL_HI - ACCEL_LO) / (N_ACCEL - 1)
STEER_STEP = (STEER_HI - STEER_LO) / (N_STEER - 1)

ACCEL_BASE = 0
STEER_BASE = ACCEL_BASE + N_ACCEL
GEAR_BASE = STEER_BASE + N_STEER
GEAR_FORWARD = GEAR_BASE
GEAR_REVERSE = GEAR_BASE + 1
BOS = GEAR_BASE + 2
EOS = BOS + 1
VOCAB_SIZE = EOS + 1
T_MAX = 8
MAX_SEQ_LEN = 3 * T_MAX + 2

FIELD_RANGES = (
    (ACCEL_BASE, ACCEL_BASE + N_ACCEL),
    (STEER_BASE, STEER_BASE + N_STEER),
    (GEAR_BASE, GEAR_BASE + 2),
)


@dataclass(frozen=True)
class ControlCommand:
    accel: float
    steer: float
    gear: int = FORWARD

    def __post_init__(self):
        if not (ACCEL_LO - 1e-12 <= self.accel <= ACCEL_HI + 1e-12):
            raise ValueError(f"accel {self.accel} outside [{ACCEL_LO}, {ACCEL_HI}]")
        if not (STEER_LO - 1e-12 <= self.steer <= STEER_HI + 1e-12):
            raise ValueError(f"steer {self.steer} outside [{STEER_LO}, {STEER_HI}]")
        if self.gear not in (FORWARD, REVERSE):
            raise ValueError(f"gear must be +1 (forward) or -1 (reverse), got {self.gear}")


def accel_bin(a):
    return np.rint((np.asarray(a, dtype=np.float64) - ACCEL_LO) / ACCEL_STEP).astype(np.int64)


def steer_bin(s):
    return np.rint((np.asarray(s, dtype=np.float64) - STEER_LO) / STEER_STEP).astype(np.int64)


def accel_center(k):
    # the symmetric form makes the middle bin exactly 0.0
    k = np.asarray(k)
    return (k - (N_ACCEL - 1) / 2) * ACCEL_STEP


def steer_center(k):
    k = np.asarray(k)
    return (k - (N_STEER - 1) / 2) * STEER_STEP


def quantize(cmd: ControlCommand) -> ControlCommand:
    """Snap a command to its bin centres."""
    return detokenize(tokenize(cmd))


def tokenize(cmd: ControlCommand):
    """(accel_id, steer_id, gear_id) for an in-range command."""
    if not isinstance(cmd, ControlCommand):
        raise TypeError("tokenize expects a ControlCommand")
    a = int(np.clip(accel_bin(cmd.accel), 0, N_ACCEL - 1))
    s = int(np.clip(steer_bin(cmd.steer), 0, N_STEER - 1))
    g = GEAR_FORWARD if cmd.gear == FORWARD else GEAR_REVERSE
    return ACCEL_BASE + a, STEER_BASE + s, g


def tokenize_arrays(accel, steer):
    """Vectorised accel/steer ids; raises on out-of-range values."""
    accel = np.asarray(accel, dtype=np.float64)
    steer = np.asarray(steer, dtype=np.float64)
    if np.any(np.abs(accel) > A_MAX + 1e-12) or np.any(np.abs(steer) > STEER_MAX + 1e-12):
        raise ValueError("command outside the declared ranges")
    return (ACCEL_BASE + np.clip(accel_bin(accel), 0, N_ACCEL - 1),
            STEER_BASE + np.clip(steer_bin(steer), 0, N_STEER - 1))


def field_of(token_id):
    """0 accel, 1 steer, 2 gear, or None for BOS/EOS."""
    for f, (lo, hi) in enumerate(FIELD_RANGES):
        if lo <= token_id < hi:
            return f
    return None


def detokenize(ids) -> ControlCommand:
    ids = [int(i) for i in ids]
    if len(ids) != 3:
        raise ValueError(f"expected an (accel, steer, gear) triple, got {len(ids)} ids")
    for f, tok in enumerate(ids):
        if field_of(tok) != f:
            raise ValueError(f"token {tok} at field position {f} violates accel/steer/gear order")
    a, s, g = ids
    gear = FORWARD if g == GEAR_FORWARD else REVERSE
    return ControlCommand(float(accel_center(a - ACCEL_BASE)), float(steer_center(s - STEER_BASE)), gear)


def build_sequence(cmds):
    """[BOS, a0, s0, g0, ..., EOS] for 1..T_MAX commands."""
    cmds = list(cmds)
    if not cmds:
        raise ValueError("a control sequence needs at least one command")
    if len(cmds) > T_MAX:
        raise ValueError(f"at most {T_MAX} commands per sequence, got {len(cmds)}")
    seq = [BOS]
    for c in cmds:
        seq.extend(tokenize(c))
    seq.append(EOS)
    return seq


def parse_sequence(seq):
    """Inverse of :func:`build_sequence`; validates the grammar."""
    seq = [int(t) for t in seq]
    if not is_valid_sequence(seq):
        raise ValueError(f"malformed control sequence {seq}")
    body = seq[1:-1] if seq[-1] == EOS else seq[1:]
    return [detokenize(body[i:i + 3]) for i in range(0, len(body), 3)]


def is_valid_sequence(seq, allow_truncated=False):
    """BOS, whole (accel, steer, gear) triples in rotation, then EOS.

    With ``allow_truncated`` a sequence that hit the length cap without EOS also
    passes (``T_MAX`` full commands).
    """
    seq = list(seq)
    if len(seq) < 2 or seq[0] != BOS:
        return False
    if seq[-1] == EOS:
        body = seq[1:-1]
    elif allow_truncated and len(seq) == 1 + 3 * T_MAX:
        body = seq[1:]
    else:
        return False
    if not body or len(body) % 3 or len(body) > 3 * T_MAX:
        return False
    return all(field_of(t) == i % 3 for i, t in enumerate(body))


def allowed_next(position):
    """Boolean mask over the vocabulary for the token at ``position`` (>=1)."""
    mask = np.zeros(VOCAB_SIZE, dtype=bool)
    k = position - 1  # index into the interior
    if k >= 3 * T_MAX:
        mask[EOS] = True
        return mask
    lo, hi = FIELD_RANGES[k % 3]
    mask[lo:hi] = True
    if k % 3 == 0 and k > 0:
        mask[EOS] = True
    return mask
