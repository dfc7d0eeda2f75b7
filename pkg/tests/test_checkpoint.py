"""Checkpoint container format tests."""

import struct
import zlib

import pytest
import torch

from hybridsynth.checkpoint import (
    MAGIC, VERSION, load_checkpoint, load_container, pack_tensors,
    save_checkpoint, save_container, unpack_tensors,
)
from hybridsynth.errors import CheckpointIntegrityError


def sample_tensors(seed=0):
    g = torch.Generator().manual_seed(seed)
    return {
        "w.f32": torch.randn(3, 4, generator=g),
        "w.f64": torch.randn(2, 2, generator=g).double(),
        "idx": torch.tensor([5, -7, 11], dtype=torch.int64),
        "bytes": torch.tensor([0, 128, 255], dtype=torch.uint8),
        "i32": torch.tensor([[1, 2], [3, 4]], dtype=torch.int32),
        "mask": torch.tensor([True, False, True]),
        "half": torch.randn(5, generator=g).half(),
        "scalar": torch.tensor(0.25),
    }


# ---------------------------------------------------------------------------
# tensor packs

def test_pack_unpack_round_trip():
    src = sample_tensors()
    out = unpack_tensors(pack_tensors(src))
    assert list(out) == list(src)
    for name in src:
        assert out[name].dtype == src[name].dtype, name
        assert out[name].shape == src[name].shape, name
        assert torch.equal(out[name], src[name]), name


def test_pack_empty_dict():
    assert unpack_tensors(pack_tensors({})) == {}


def test_pack_zero_dim_tensor():
    out = unpack_tensors(pack_tensors({"s": torch.tensor(3.5)}))
    assert out["s"].dim() == 0
    assert float(out["s"]) == 3.5


def test_pack_canonicalizes_channels_last():
    t = torch.randn(2, 3, 4, 4).to(memory_format=torch.channels_last)
    plain = t.contiguous()
    assert pack_tensors({"t": t}) == pack_tensors({"t": plain})
    out = unpack_tensors(pack_tensors({"t": t}))["t"]
    assert torch.equal(out, plain)
    assert out.is_contiguous()


def test_pack_rejects_unsupported_dtype():
    with pytest.raises(CheckpointIntegrityError, match="dtype"):
        pack_tensors({"c": torch.zeros(2, dtype=torch.complex64)})


def test_unpack_truncated_payload():
    payload = pack_tensors(sample_tensors())
    with pytest.raises(CheckpointIntegrityError):
        unpack_tensors(payload[:-3])


def test_unpack_trailing_bytes():
    payload = pack_tensors({"s": torch.tensor(1.0)})
    with pytest.raises(CheckpointIntegrityError, match="trailing"):
        unpack_tensors(payload + b"\x00")


def test_unpack_unknown_dtype_code():
    # entry: count=1, name "x", dtype code 250, ndim 0
    payload = struct.pack("<I", 1) + struct.pack("<H", 1) + b"x" \
        + struct.pack("<BB", 250, 0) + b"\x00\x00\x00\x00"
    with pytest.raises(CheckpointIntegrityError, match="dtype code"):
        unpack_tensors(payload)


# ---------------------------------------------------------------------------
# container

def test_container_round_trip(tmp_path):
    path = tmp_path / "c.bin"
    sections = [("alpha", b"payload-a"), ("beta", b""), ("géo", b"\x00\xff")]
    save_container(path, sections)
    assert load_container(path) == sections


def test_container_no_tmp_left_behind(tmp_path):
    path = tmp_path / "c.bin"
    save_container(path, [("a", b"x")])
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c.bin"]


def test_container_bad_magic(tmp_path):
    path = tmp_path / "c.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(CheckpointIntegrityError, match="magic"):
        load_container(path)


def test_container_too_short(tmp_path):
    path = tmp_path / "c.bin"
    path.write_bytes(MAGIC + b"\x00" * 4)
    with pytest.raises(CheckpointIntegrityError):
        load_container(path)


def test_container_crc_catches_any_flipped_byte(tmp_path):
    path = tmp_path / "c.bin"
    save_container(path, [("sec", b"some payload bytes")])
    blob = bytearray(path.read_bytes())
    for pos in (5, 13, len(blob) - 7):  # version, header, payload regions
        mutated = bytearray(blob)
        mutated[pos] ^= 0x40
        path.write_bytes(bytes(mutated))
        with pytest.raises(CheckpointIntegrityError):
            load_container(path)


def test_container_truncation_detected(tmp_path):
    path = tmp_path / "c.bin"
    save_container(path, [("sec", b"0123456789")])
    blob = path.read_bytes()
    path.write_bytes(blob[:-6])
    with pytest.raises(CheckpointIntegrityError):
        load_container(path)


def test_container_version_check(tmp_path):
    path = tmp_path / "c.bin"
    save_container(path, [("sec", b"x")])
    blob = bytearray(path.read_bytes())[:-4]
    struct.pack_into("<I", blob, 4, VERSION + 9)
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointIntegrityError, match="version"):
        load_container(path)


def test_container_trailing_bytes_with_valid_crc(tmp_path):
    # body claims 1 section but carries extra bytes before the crc
    body = bytearray(MAGIC)
    body += struct.pack("<II", VERSION, 1)
    body += struct.pack("<H", 1) + b"a" + struct.pack("<Q", 2) + b"xy"
    body += b"JUNK"
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    path = tmp_path / "c.bin"
    path.write_bytes(bytes(body))
    with pytest.raises(CheckpointIntegrityError, match="trailing"):
        load_container(path)


# ---------------------------------------------------------------------------
# full checkpoint

def full_checkpoint_kwargs(seed=0):
    g = torch.Generator().manual_seed(seed)
    return dict(
        step=42,
        config_text="total_steps = 100\n",
        gen={"a.weight": torch.randn(4, 3, generator=g)},
        ema={"a.weight": torch.randn(4, 3, generator=g)},
        disc={"d.weight": torch.randn(2, 2, generator=g),
              "d.u": torch.randn(2, generator=g)},
        opt_g={"a.weight.exp_avg": torch.zeros(4, 3),
               "a.weight.exp_avg_sq": torch.zeros(4, 3),
               "a.weight.step": torch.tensor(7, dtype=torch.int64)},
        opt_d={"d.weight.exp_avg": torch.ones(2, 2)},
        rng=bytes(range(64)),
    )


def test_checkpoint_round_trip(tmp_path):
    path = tmp_path / "s.bin"
    kw = full_checkpoint_kwargs()
    save_checkpoint(path, **kw)
    data = load_checkpoint(path)
    assert data.step == 42
    assert data.config_text == kw["config_text"]
    assert data.rng == kw["rng"]
    for field in ("gen", "ema", "disc", "opt_g", "opt_d"):
        got, want = getattr(data, field), kw[field]
        assert list(got) == list(want)
        for name in want:
            assert got[name].dtype == want[name].dtype
            assert torch.equal(got[name], want[name])


def test_save_load_save_byte_identical(tmp_path):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(p1, **full_checkpoint_kwargs())
    data = load_checkpoint(p1)
    save_checkpoint(
        p2, step=data.step, config_text=data.config_text, gen=data.gen,
        ema=data.ema, disc=data.disc, opt_g=data.opt_g, opt_d=data.opt_d,
        rng=data.rng,
    )
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_missing_section(tmp_path):
    path = tmp_path / "s.bin"
    save_container(path, [
        ("meta", b'{"config": "", "format": 1, "step": 0}'),
        ("gen", pack_tensors({})),
    ])
    with pytest.raises(CheckpointIntegrityError, match="ema"):
        load_checkpoint(path)


def test_checkpoint_bad_meta_json(tmp_path):
    path = tmp_path / "s.bin"
    save_container(path, [
        ("meta", b"{not json"), ("gen", pack_tensors({})),
        ("ema", pack_tensors({})), ("disc", pack_tensors({})),
        ("opt_g", pack_tensors({})), ("opt_d", pack_tensors({})),
        ("rng", b""),
    ])
    with pytest.raises(CheckpointIntegrityError, match="meta"):
        load_checkpoint(path)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.bin")
