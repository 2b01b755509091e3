import struct

import numpy as np
import pytest

from bers import instrument
from bers.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    parameter_hash,
    save_checkpoint,
)
from bers.errors import ConfigurationError, FormatError, IntegrityError
from bers.net import BackboneConfig, StudentNet, TeacherNet, TrainMeta, build_student, build_teacher

CFG = BackboneConfig(base_width=4, cardinality=2, clip_shape=(4, 16, 16), num_classes=3)


@pytest.fixture
def student():
    net = build_student(CFG, 3)
    net.meta = TrainMeta(epoch=7, lam=0.25, seed=3)
    for st in net.stats.values():
        st.mean = np.random.default_rng(0).normal(size=st.mean.shape)
    return net


def test_roundtrip_bit_identical(student, tmp_path):
    path = tmp_path / "s.bck"
    save_checkpoint(student, path)
    back = load_checkpoint(path)
    assert isinstance(back, StudentNet)
    assert back.config == student.config
    assert back.meta == student.meta
    for (n1, a), (n2, b) in zip(student.state(), back.state()):
        assert n1 == n2 and a.tobytes() == b.tobytes()
    save_checkpoint(back, tmp_path / "t.bck")
    assert (tmp_path / "t.bck").read_bytes() == path.read_bytes()
    assert parameter_hash(back) == parameter_hash(student)


def test_teacher_roundtrip():
    t = build_teacher(CFG, 1)
    back = decode_checkpoint(encode_checkpoint(t))
    assert isinstance(back, TeacherNet) and back.config.in_channels == 2
    assert encode_checkpoint(back) == encode_checkpoint(t)


def test_layout(student):
    blob = encode_checkpoint(student)
    assert blob[:4] == b"BCK1" and blob[4] == 1 and blob[5] == 0
    assert struct.unpack_from("<4I", blob, 6) == (1, 1, 1, 1)


def test_loaded_net_predicts_identically(student):
    from bers.tensor import Tensor

    x = Tensor(np.random.default_rng(1).random((2, 3, 4, 16, 16)))
    back = decode_checkpoint(encode_checkpoint(student))
    assert np.array_equal(student(x).logits.data, back(x).logits.data)


@pytest.mark.parametrize("where", [0.1, 0.5, 0.99])
def test_flipped_byte_detected(student, where):
    blob = bytearray(encode_checkpoint(student))
    blob[int(len(blob) * where)] ^= 0x01
    with pytest.raises(IntegrityError):
        decode_checkpoint(bytes(blob))


def test_flipped_config_byte_detected(student):
    blob = bytearray(encode_checkpoint(student))
    blob[6] ^= 0x02
    with pytest.raises(IntegrityError):
        decode_checkpoint(bytes(blob))


def test_truncation_detected(student):
    blob = encode_checkpoint(student)
    for n in (len(blob) - 1, len(blob) // 2, 40, 5):
        with pytest.raises(IntegrityError):
            decode_checkpoint(blob[:n])


def test_bad_magic_and_version(student):
    blob = encode_checkpoint(student)
    with pytest.raises(FormatError):
        decode_checkpoint(b"BCK2" + blob[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:4] + b"\x09" + blob[5:])


def test_kind_mismatch_rejected_before_building():
    blob = encode_checkpoint(build_teacher(CFG, 0))
    with instrument.counting() as delta:
        with pytest.raises(ConfigurationError):
            decode_checkpoint(blob, expect="student")
    assert delta[instrument.TEACHER_BUILDS] == 0


def test_config_mismatch_rejected(student):
    blob = encode_checkpoint(student)
    decode_checkpoint(blob, config=CFG)
    with pytest.raises(ConfigurationError):
        decode_checkpoint(blob, config=BackboneConfig(base_width=8, cardinality=2, clip_shape=(4, 16, 16), num_classes=3))
