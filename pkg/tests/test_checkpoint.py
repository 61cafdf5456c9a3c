import struct

import numpy as np
import pytest

from irmlab.checkpoint import (MAGIC, CheckpointError, load_host, load_irm, load_trace,
                               read_container, round_trip_f32, save_host, save_irm, save_trace,
                               write_container)

from conftest import TINY, random_irm


def test_container_layout(tmp_path, rng):
    p = tmp_path / "c.bin"
    write_container(p, {"a": 1}, {"x": rng.normal(size=(3, 5)), "ids": np.arange(4)}, dtype="f8")
    raw = p.read_bytes()
    assert raw.startswith(MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    assert hlen > 0 and len(raw) % 64 == 0
    meta, t = read_container(p)
    assert meta == {"a": 1}
    assert t["ids"].dtype == np.int64 and list(t["ids"]) == [0, 1, 2, 3]


def test_payloads_are_aligned(tmp_path, rng):
    import json
    p = tmp_path / "c.bin"
    write_container(p, {}, {f"t{i}": rng.normal(size=i + 1) for i in range(5)})
    raw = p.read_bytes()
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    header = json.loads(raw[len(MAGIC) + 8:len(MAGIC) + 8 + hlen])
    assert all(e["offset"] % 64 == 0 for e in header["tensors"])


def test_bad_magic(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOTMAGIC" + b"\0" * 16)
    with pytest.raises(CheckpointError):
        read_container(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_container(tmp_path / "nope")


def test_host_round_trip_after_f32(tmp_path, tiny_host):
    round_trip_f32(tiny_host)
    save_host(tiny_host, tmp_path / "h.ckpt")
    back = load_host(tmp_path / "h.ckpt")
    assert back.weight_hash() == tiny_host.weight_hash()
    assert back.config == tiny_host.config and back.eos_id == tiny_host.eos_id


def test_host_save_is_byte_stable(tmp_path, tiny_host):
    save_host(tiny_host, tmp_path / "a")
    save_host(load_host(tmp_path / "a"), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_irm_requires_matching_host(tmp_path, tiny_host):
    net = random_irm(TINY)
    with pytest.raises(CheckpointError):
        save_irm(net, tmp_path / "i.ckpt")
    net.host_hash = tiny_host.weight_hash()
    round_trip_f32(net)
    save_irm(net, tmp_path / "i.ckpt")
    back = load_irm(tmp_path / "i.ckpt", tiny_host)
    for a, b in zip(back.parameters(), net.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    tiny_host.lm_head.data[0, 0] += 1.0
    with pytest.raises(CheckpointError):
        load_irm(tmp_path / "i.ckpt", tiny_host)


def test_trace_round_trip(tmp_path, tiny_host):
    net = random_irm(TINY)
    toks, trace = tiny_host.generate([2, 3], 4, net)
    save_trace(tmp_path / "t", toks, trace, {"note": "x"})
    meta, t = load_trace(tmp_path / "t")
    assert meta["prompt_len"] == 2 and meta["note"] == "x"
    assert meta["plan"].block_indices == (0, 1)
    np.testing.assert_array_equal(t["injections"], trace.injections())
    assert len(t["tokens"]) == len(trace) == t["post_attention"].shape[0]


def test_wrong_kind(tmp_path, tiny_host):
    save_host(tiny_host, tmp_path / "h")
    with pytest.raises(CheckpointError):
        load_irm(tmp_path / "h")
    with pytest.raises(CheckpointError):
        load_trace(tmp_path / "h")
