import struct
import zlib

import numpy as np
import pytest

from ntm_lab import checkpoint as ckpt
from ntm_lab.checkpoint import (
    CorruptCheckpointError, VersionMismatchError, decode, encode, load_checkpoint, read_checkpoint,
    save_checkpoint,
)
from ntm_lab.ntm import NtmConfig
from ntm_lab.tasks import TaskConfig
from ntm_lab.training import TrainConfig, Trainer


def cfg(scheme="random", **kw):
    base = dict(task=TaskConfig("copy", bits=3, len_range=(1, 3)),
                ntm=NtmConfig(N=8, W=4, controller_units=16, init_scheme=scheme),
                batch_size=4, total_steps=50, eval_every=5, eval_examples=16, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def curve_key(curve):
    return [(p.step, p.val_loss, p.val_bits_per_seq) for p in curve]


def test_encode_decode_round_trip_is_bit_exact():
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)), "b": np.array(np.pi), "c/d": rng.normal(size=(2, 1, 5)),
              "tiny": np.array([5e-324, -0.0, np.finfo(float).max])}
    meta = {"step": 7, "nested": {"x": [1, 2]}}
    meta2, back = decode(encode(meta, arrays))
    assert meta2 == meta
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()


def test_trainer_round_trip(tmp_path):
    trainer = Trainer(cfg())
    trainer.run(until=10)
    path = save_checkpoint(trainer, tmp_path / "t.ckpt")
    loaded = load_checkpoint(path)
    assert loaded.step == 10 and loaded.adam.t == 10
    for k, p in trainer.params.items():
        assert loaded.params[k].data.tobytes() == p.data.tobytes()
        assert loaded.adam.m[k].tobytes() == trainer.adam.m[k].tobytes()
        assert loaded.adam.v[k].tobytes() == trainer.adam.v[k].tobytes()
    assert loaded.data_rng.bit_generator.state == trainer.data_rng.bit_generator.state
    assert loaded.memory_rng.bit_generator.state == trainer.memory_rng.bit_generator.state
    assert curve_key(loaded.curve) == curve_key(trainer.curve)
    assert loaded.cfg == trainer.cfg


@pytest.mark.parametrize("model, scheme", [("ntm", "constant"), ("ntm", "learned"), ("ntm", "random"),
                                           ("lstm", "constant")])
def test_resume_matches_uninterrupted_run(tmp_path, model, scheme):
    c = cfg(scheme, model=model, lstm_units=8, lstm_layers=2)
    straight = Trainer(c)
    straight.run(until=50)

    first = Trainer(c)
    first.run(until=25)
    save_checkpoint(first, tmp_path / "mid.ckpt")
    resumed = load_checkpoint(tmp_path / "mid.ckpt")
    resumed.run(until=50)

    assert resumed.step == straight.step == 50
    for k, p in straight.params.items():
        assert resumed.params[k].data.tobytes() == p.data.tobytes(), k
    assert curve_key(resumed.curve) == curve_key(straight.curve)


def test_truncated_file_raises_corrupt(tmp_path):
    trainer = Trainer(cfg())
    path = save_checkpoint(trainer, tmp_path / "t.ckpt")
    data = path.read_bytes()
    for cut in (0, 5, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)


def test_flipped_byte_fails_checksum(tmp_path):
    path = save_checkpoint(Trainer(cfg()), tmp_path / "t.ckpt")
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptCheckpointError):
        read_checkpoint(path)


def test_bad_magic_rejected():
    blob = encode({}, {})
    with pytest.raises(CorruptCheckpointError):
        decode(b"NOTMAGIC" + blob[8:])


def test_version_mismatch_rejected():
    blob = bytearray(encode({}, {"a": np.zeros(2)}))
    struct.pack_into("<I", blob, len(ckpt.MAGIC), ckpt.VERSION + 1)
    body = bytes(blob[:-4])
    blob = body + struct.pack("<I", zlib.crc32(body))
    with pytest.raises(VersionMismatchError):
        decode(blob)


def test_failed_save_leaves_previous_file(tmp_path, monkeypatch):
    trainer = Trainer(cfg())
    path = save_checkpoint(trainer, tmp_path / "t.ckpt")
    before = path.read_bytes()

    def boom(*_):
        raise OSError("disk full")

    monkeypatch.setattr(ckpt, "encode", boom)
    trainer.run(until=5)
    with pytest.raises(OSError):
        save_checkpoint(trainer, path)
    assert path.read_bytes() == before
    assert sorted(p.name for p in tmp_path.iterdir()) == ["t.ckpt"]


def test_parameter_set_mismatch_rejected(tmp_path):
    path = save_checkpoint(Trainer(cfg()), tmp_path / "t.ckpt")
    meta, arrays = decode(path.read_bytes())
    del arrays["param/projection.bias"]
    path.write_bytes(encode(meta, arrays))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)
