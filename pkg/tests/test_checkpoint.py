import struct

import numpy as np
import pytest

from dualres.checkpoint import (MAGIC, Checkpoint, CheckpointError, config_digest, from_bytes, load_checkpoint,
                                load_params, params_of, save_checkpoint, to_bytes)
from dualres.training import MergeSpec, merge


def _params(rng):
    return {"z.w": rng.standard_normal((3, 2)).astype(np.float32), "a.b": rng.standard_normal(4).astype(np.float32),
            "m.scalar": np.array(1.5, np.float32)}


def test_round_trip_bytes_identical(tmp_path, rng):
    ck = Checkpoint(_params(rng), "cocktail1", config_digest({"x": 1}), {"seed": 3})
    p = save_checkpoint(tmp_path / "a.ckpt", ck)
    loaded = load_checkpoint(p)
    save_checkpoint(tmp_path / "b.ckpt", loaded)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert loaded.stage == "cocktail1" and loaded.metadata == {"seed": 3}
    assert list(loaded.params) == sorted(ck.params)
    for n in ck.params:
        assert loaded.params[n].tobytes() == ck.params[n].tobytes()


def test_layout_header(rng):
    data = to_bytes(Checkpoint(_params(rng), "init"))
    assert data[:8] == MAGIC
    assert struct.unpack_from("<I", data, 8)[0] == 1


def test_corrupted_byte_names_file(tmp_path, rng):
    p = save_checkpoint(tmp_path / "c.ckpt", Checkpoint(_params(rng)))
    raw = bytearray(p.read_bytes())
    raw[-3] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="c.ckpt.*digest"):
        load_checkpoint(p)


def test_truncated_and_version(rng):
    data = to_bytes(Checkpoint(_params(rng)))
    with pytest.raises(CheckpointError):
        from_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(data[:8] + struct.pack("<I", 9) + data[12:])
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError):
        from_bytes(data[:20])


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="no such"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_insertion_order_does_not_matter(rng):
    p = _params(rng)
    rev = dict(reversed(list(p.items())))
    assert to_bytes(Checkpoint(p)) == to_bytes(Checkpoint(rev))


def test_merge_path_independence(tmp_path, rng):
    m0, m1 = _params(rng), _params(rng)
    save_checkpoint(tmp_path / "m0.ckpt", Checkpoint(m0))
    save_checkpoint(tmp_path / "m1.ckpt", Checkpoint(m1))
    from_disk = merge(load_checkpoint(tmp_path / "m0.ckpt").params, load_checkpoint(tmp_path / "m1.ckpt").params,
                      MergeSpec(0.5))
    in_memory = merge(m0, m1, MergeSpec(0.5))
    assert to_bytes(Checkpoint(from_disk, "merged")) == to_bytes(Checkpoint(in_memory, "merged"))


def test_model_params_round_trip(tiny_model):
    params = params_of(tiny_model)
    data = to_bytes(Checkpoint(params))
    params["text_head.bias"][:] = 7.0
    load_params(tiny_model, from_bytes(data).params)
    assert params_of(tiny_model)["text_head.bias"].tolist() != [7.0] * 256
    bad = dict(from_bytes(data).params)
    bad.pop("ln_f.bias")
    with pytest.raises(CheckpointError):
        load_params(tiny_model, bad)
