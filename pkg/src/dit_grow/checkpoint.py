"""Binary checkpoint format.

Layout (integers little-endian u64)::

    b"MGRW" | version | header_len | header (UTF-8) | payload_len | payload

The header is text: a ``[config]`` section of ``key = value`` lines, a
``[tensors]`` section of ``name shape_csv offset`` lines, and optionally an
``[optimizer]`` section of ``name step`` lines. Optimizer moments are stored
as tensors named ``opt.m/<param>`` and ``opt.v/<param>``. The payload holds
the tensors as little-endian float32 at the listed byte offsets.
"""
from __future__ import annotations

import struct

import numpy as np

from .config import MODEL_KEYS, ConfigError, GrowConfig, parse_config, serialize_config
from .model import DiT, ModelConfig
from .optim import AdamState

MAGIC = b"MGRW"
VERSION = 1
_U64 = struct.Struct("<Q")


class CheckpointError(Exception):
    code = "checkpoint_error"


class BadMagic(CheckpointError):
    code = "bad_magic"


class VersionMismatch(CheckpointError):
    code = "version_mismatch"


class TruncatedPayload(CheckpointError):
    code = "truncated_payload"


class ShapeMismatch(CheckpointError):
    code = "shape_mismatch"


class MalformedHeader(CheckpointError):
    code = "malformed_header"


def _tensor_table(model: DiT, optimizer: AdamState | None):
    table = [(name, p.data) for name, p in model.named_parameters()]
    if optimizer is not None:
        for name in optimizer.m:
            table.append((f"opt.m/{name}", optimizer.m[name]))
            table.append((f"opt.v/{name}", optimizer.v[name]))
    return table


def build_header(model: DiT, optimizer: AdamState | None = None) -> tuple[bytes, list]:
    cfg = GrowConfig().with_model(model.config)
    lines = ["[config]", serialize_config(cfg, MODEL_KEYS).rstrip("\n"), "[tensors]"]
    offset = 0
    table = []
    for name, arr in _tensor_table(model, optimizer):
        if " " in name:
            raise ValueError(f"tensor name with whitespace: {name!r}")
        lines.append(f"{name} {','.join(map(str, arr.shape))} {offset}")
        table.append((name, arr, offset))
        offset += arr.size * 4
    if optimizer is not None:
        lines.append("[optimizer]")
        lines.extend(f"{name} {optimizer.step[name]}" for name in optimizer.m)
    return ("\n".join(lines) + "\n").encode("utf-8"), table


def save_checkpoint(model: DiT, path, optimizer: AdamState | None = None) -> None:
    header, table = build_header(model, optimizer)
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes() for _, arr, _ in table)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U64.pack(VERSION))
        fh.write(_U64.pack(len(header)))
        fh.write(header)
        fh.write(_U64.pack(len(payload)))
        fh.write(payload)


def _read_u64(buf: bytes, pos: int, what: str) -> tuple[int, int]:
    if pos + 8 > len(buf):
        raise TruncatedPayload(f"file ends inside the {what} field")
    return _U64.unpack_from(buf, pos)[0], pos + 8


def _parse_header(text: str):
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif line:
            if current is None:
                raise MalformedHeader("header line outside any section")
            sections[current].append(line)
    if "config" not in sections or "tensors" not in sections:
        raise MalformedHeader("header lacks [config] or [tensors]")
    return sections


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, int] | None]:
    """Low-level read: model config, every named tensor, optimizer step counts."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise BadMagic(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    version, pos = _read_u64(buf, 4, "version")
    if version != VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {VERSION}")
    hlen, pos = _read_u64(buf, pos, "header length")
    if pos + hlen > len(buf):
        raise TruncatedPayload(f"{path}: header truncated")
    sections = _parse_header(buf[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    plen, pos = _read_u64(buf, pos, "payload length")
    payload = buf[pos:]
    if len(payload) < plen:
        raise TruncatedPayload(f"{path}: payload has {len(payload)} of {plen} bytes")
    try:
        cfg = parse_config("\n".join(sections["config"])).model_config()
    except ConfigError as e:
        raise MalformedHeader(f"bad config section: {e}") from None
    tensors = {}
    end = 0
    for line in sections["tensors"]:
        try:
            name, shape_csv, offset = line.split(" ")
            shape = tuple(int(s) for s in shape_csv.split(","))
            offset = int(offset)
        except ValueError:
            raise MalformedHeader(f"bad tensor line {line!r}") from None
        if name in tensors:
            raise MalformedHeader(f"duplicate tensor name {name}")
        if offset < end:
            raise MalformedHeader(f"tensor {name} overlaps its predecessor")
        n = int(np.prod(shape))
        end = offset + 4 * n
        if end > plen:
            raise TruncatedPayload(f"tensor {name} runs past the payload")
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)
    steps = None
    if "optimizer" in sections:
        steps = {}
        for line in sections["optimizer"]:
            name, step = line.rsplit(" ", 1)
            steps[name] = int(step)
    return cfg, tensors, steps


def load_checkpoint(path) -> tuple[DiT, AdamState | None]:
    cfg, tensors, steps = read_checkpoint(path)
    model = DiT(cfg)
    expected = dict(model.named_parameters())
    for name, p in expected.items():
        if name not in tensors:
            raise ShapeMismatch(f"checkpoint lacks tensor {name}")
        if tensors[name].shape != p.shape:
            raise ShapeMismatch(f"{name}: checkpoint shape {tensors[name].shape} != model shape {p.shape}")
        p.data = tensors[name]
    extra = [n for n in tensors if not n.startswith("opt.") and n not in expected]
    if extra:
        raise ShapeMismatch(f"checkpoint has tensors the model does not: {extra[:3]}")
    optimizer = None
    if steps is not None:
        optimizer = AdamState()
        for name, step in steps.items():
            optimizer.m[name] = tensors[f"opt.m/{name}"]
            optimizer.v[name] = tensors[f"opt.v/{name}"]
            optimizer.step[name] = step
    return model, optimizer

