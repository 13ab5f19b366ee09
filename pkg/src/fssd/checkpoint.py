"""Binary container for checkpoints and detector state.

Layout (all integers little-endian)::

    magic      8 bytes   b"FSSDBIN\\x00"
    version    u16
    n_sections u32
    section*   tag (4 ASCII bytes) | length u64 | payload
    crc32      u32       over every preceding byte

Checkpoint files carry the sections CONF (model config as ``key=value``
lines), META (u64 step, u64 seed) and PARM (named arrays). Detector files
carry one DETC section per detector. See docs/checkpoint_format.md.
"""

import struct
import zlib

import numpy as np

from fssd.models import Checkpoint, Model, ModelConfig

MAGIC = b"FSSDBIN\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_kv(d):
    return "".join(f"{k}={v}\n" for k, v in d.items()).encode("utf-8")


def decode_kv(blob):
    out = {}
    for line in blob.decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def encode_arrays(arrays):
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_arrays(blob):
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"array block truncated at offset {pos} (need {n} more bytes)")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"array block has {len(blob) - pos} trailing bytes")
    return arrays


def write_container(path, sections):
    body = [MAGIC, struct.pack("<HI", VERSION, len(sections))]
    for tag, payload in sections:
        tag_b = tag.encode("ascii")
        if len(tag_b) != 4:
            raise ValueError(f"section tag must be 4 ASCII characters, got {tag!r}")
        body.append(tag_b + struct.pack("<Q", len(payload)) + payload)
    data = b"".join(body)
    data += struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(data)


def read_container(path):
    """Return the list of (tag, payload) sections, validating the whole file first."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 10:
        raise CheckpointError(f"{path}: file too short ({len(data)} bytes) to hold a header")
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}, expected {MAGIC!r}")
    version, n_sections = struct.unpack("<HI", data[8:14])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (this reader handles version {VERSION})")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is truncated or corrupt")
    pos, end = 14, len(data) - 4
    sections = []
    for i in range(n_sections):
        if pos + 12 > end:
            raise CheckpointError(f"{path}: section {i} header truncated at offset {pos}")
        tag = data[pos:pos + 4].decode("ascii", errors="replace")
        (length,) = struct.unpack("<Q", data[pos + 4:pos + 12])
        pos += 12
        if pos + length > end:
            raise CheckpointError(f"{path}: section {tag} at offset {pos} runs past end of file")
        sections.append((tag, data[pos:pos + length]))
        pos += length
    if pos != end:
        raise CheckpointError(f"{path}: {end - pos} unexpected bytes after last section")
    return sections


def save_checkpoint(model_or_ckpt, path, step=None, seed=None):
    if isinstance(model_or_ckpt, Checkpoint):
        ckpt = model_or_ckpt
    else:
        ckpt = Checkpoint.from_model(model_or_ckpt, step=step or 0, seed=seed)
    write_container(
        path,
        [
            ("CONF", encode_kv(ckpt.config.to_dict())),
            ("META", struct.pack("<QQ", ckpt.step if step is None else int(step), ckpt.seed if seed is None else int(seed))),
            ("PARM", encode_arrays(ckpt.params)),
        ],
    )


def load_checkpoint_full(path):
    sections = dict(read_container(path))
    for tag in ("CONF", "META", "PARM"):
        if tag not in sections:
            raise CheckpointError(f"{path}: missing {tag} section; not a checkpoint file")
    try:
        config = ModelConfig.from_dict(decode_kv(sections["CONF"]))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad CONF section: {exc}") from None
    if len(sections["META"]) != 16:
        raise CheckpointError(f"{path}: META section is {len(sections['META'])} bytes, expected 16")
    step, seed = struct.unpack("<QQ", sections["META"])
    params = decode_arrays(sections["PARM"])
    try:
        expected = set(Model(config, params).params)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    extra = sorted(set(params) - expected)
    if extra:
        raise CheckpointError(f"{path}: unexpected parameters {extra} for a {config.architecture} model")
    return Checkpoint(config=config, params=params, step=step, seed=seed)


def load_checkpoint(path):
    return load_checkpoint_full(path).to_model()

