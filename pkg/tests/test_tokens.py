import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from autopark import tokens as tk
from autopark.tokens import ControlCommand, build_sequence, detokenize, parse_sequence, tokenize
from autopark.world import FORWARD, REVERSE

ACCEL_HALF_BIN = 0.09375
STEER_HALF_BIN = 0.0190625

commands = st.builds(ControlCommand, st.floats(-3.0, 3.0), st.floats(-0.61, 0.61), st.sampled_from([FORWARD, REVERSE]))


def test_vocab_layout():
    assert tk.VOCAB_SIZE == 70
    assert (tk.STEER_BASE, tk.GEAR_FORWARD, tk.GEAR_REVERSE, tk.BOS, tk.EOS) == (33, 66, 67, 68, 69)
    ids = [tk.field_of(i) for i in range(70)]
    assert ids.count(0) == 33 and ids.count(1) == 33 and ids.count(2) == 2 and ids.count(None) == 2


def test_zero_steer_is_centre_bin():
    _, s, _ = tokenize(ControlCommand(0.0, 0.0))
    assert s - tk.STEER_BASE == 16
    assert detokenize((0, s, tk.GEAR_FORWARD)).steer == 0.0


def test_accel_endpoints():
    assert tokenize(ControlCommand(-3.0, 0.0))[0] == 0
    assert tokenize(ControlCommand(3.0, 0.0))[0] == 32
    assert detokenize((32, 33, 66)).accel == 3.0 and detokenize((0, 65, 66)).steer == 0.61


def test_half_bin_constants():
    assert tk.ACCEL_STEP / 2 == ACCEL_HALF_BIN
    assert abs(tk.STEER_STEP / 2 - STEER_HALF_BIN) < 1e-15


@given(commands)
def test_quantization_bound(cmd):
    q = detokenize(tokenize(cmd))
    assert abs(q.accel - cmd.accel) <= ACCEL_HALF_BIN + 1e-12
    assert abs(q.steer - cmd.steer) <= STEER_HALF_BIN + 1e-12
    assert q.gear == cmd.gear


@pytest.mark.parametrize("args", [(3.1, 0.0), (0.0, -0.62), (0.0, 0.0, 0)])
def test_out_of_range_rejected(args):
    with pytest.raises(ValueError):
        ControlCommand(*args)


def test_tokenize_arrays_rejects_out_of_range():
    with pytest.raises(ValueError):
        tk.tokenize_arrays([0.0, 3.5], [0.0, 0.0])


def test_ids_round_trip_exhaustive():
    for a in range(33):
        for s in range(33, 66):
            for g in (66, 67):
                assert tokenize(detokenize((a, s, g))) == (a, s, g)


@pytest.mark.parametrize("ids", [(33, 0, 66), (0, 66, 33), (0, 33, 68), (0, 33)])
def test_detokenize_field_order(ids):
    with pytest.raises(ValueError):
        detokenize(ids)


def test_build_sequence_lengths():
    cmds = [ControlCommand(0.5, 0.1), ControlCommand(-1.0, -0.2, REVERSE), ControlCommand(0.0, 0.0)]
    seq = build_sequence(cmds)
    assert len(seq) == 11 and seq[0] == tk.BOS and seq[-1] == tk.EOS
    assert len(build_sequence(cmds[:1])) == 5


def test_build_sequence_bounds():
    with pytest.raises(ValueError):
        build_sequence([])
    with pytest.raises(ValueError):
        build_sequence([ControlCommand(0, 0)] * 9)


@given(st.lists(commands, min_size=1, max_size=8))
def test_parse_round_trip(cmds):
    back = parse_sequence(build_sequence(cmds))
    assert len(back) == len(cmds)
    for b, c in zip(back, cmds):
        assert abs(b.accel - c.accel) <= ACCEL_HALF_BIN + 1e-12
        assert abs(b.steer - c.steer) <= STEER_HALF_BIN + 1e-12
        assert b.gear == c.gear
    assert parse_sequence(build_sequence(back)) == back


@pytest.mark.parametrize("seq,ok", [
    ([68, 0, 33, 66, 69], True),
    ([68, 69], False),
    ([0, 33, 66, 69], False),
    ([68, 0, 33, 69], False),
    ([68, 33, 0, 66, 69], False),
    ([68, 0, 33, 66], False),
])
def test_is_valid_sequence(seq, ok):
    assert tk.is_valid_sequence(seq) == ok


def test_truncated_at_cap():
    body = [0, 33, 66] * 8
    assert not tk.is_valid_sequence([68] + body)
    assert tk.is_valid_sequence([68] + body, allow_truncated=True)


def test_allowed_next_masks():
    assert np.flatnonzero(tk.allowed_next(1)).tolist() == list(range(33))
    assert np.flatnonzero(tk.allowed_next(2)).tolist() == list(range(33, 66))
    assert np.flatnonzero(tk.allowed_next(3)).tolist() == [66, 67]
    assert np.flatnonzero(tk.allowed_next(4)).tolist() == list(range(33)) + [69]
    assert np.flatnonzero(tk.allowed_next(25)).tolist() == [69]
