"""Weight payload: concatenated little-endian float32 arrays plus a text manifest.

Manifest layout (one record per line, space separated)::

    payload-sha256 <hex digest of the payload file>
    param <id> <d0>x<d1>... <byte offset> <byte length>

A scalar has shape ``-``.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping

import numpy as np

DTYPE = np.dtype("<f4")


class CorruptPayloadError(ValueError):
    pass


def _fmt_shape(shape) -> str:
    return "x".join(str(d) for d in shape) if shape else "-"


def _parse_shape(text: str):
    return () if text == "-" else tuple(int(d) for d in text.split("x"))


def write_payload(arrays: Mapping[str, np.ndarray], payload: Path, manifest: Path) -> None:
    lines = []
    offset = 0
    digest = hashlib.sha256()
    with open(payload, "wb") as fh:
        for name, arr in arrays.items():
            if any(c.isspace() for c in name):
                raise ValueError(f"parameter id may not contain whitespace: {name!r}")
            raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
            fh.write(raw)
            digest.update(raw)
            lines.append(f"param {name} {_fmt_shape(np.shape(arr))} {offset} {len(raw)}")
            offset += len(raw)
    header = f"payload-sha256 {digest.hexdigest()}"
    Path(manifest).write_text("\n".join([header] + lines) + "\n", encoding="utf-8")


def read_payload(payload: Path, manifest: Path) -> dict[str, np.ndarray]:
    try:
        raw = Path(payload).read_bytes()
        text = Path(manifest).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise CorruptPayloadError(f"cannot read weights: {e}") from e
    if not text or not text[0].startswith("payload-sha256 "):
        raise CorruptPayloadError("manifest has no checksum line")
    expected = text[0].split()[1]
    if hashlib.sha256(raw).hexdigest() != expected:
        raise CorruptPayloadError("weight payload checksum mismatch")
    out = {}
    for lineno, line in enumerate(text[1:], start=2):
        fields = line.split()
        if len(fields) != 5 or fields[0] != "param":
            raise CorruptPayloadError(f"manifest line {lineno} is malformed")
        _, name, shape, off, length = fields
        off, length = int(off), int(length)
        shape = _parse_shape(shape)
        if off + length > len(raw) or length != DTYPE.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CorruptPayloadError(f"manifest entry {name!r} does not fit the payload")
        out[name] = np.frombuffer(raw, dtype=DTYPE, count=length // DTYPE.itemsize, offset=off).reshape(shape).copy()
    return out
