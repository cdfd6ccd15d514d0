"""Checkpoint and Top-k set files.

Checkpoint layout::

    b"KLG1\\n" | uint64 little-endian header length | UTF-8 JSON header | float64 LE payload

The header maps each tensor name to its shape and payload offset, and
carries a free-form ``meta`` object.  Keys are sorted so identical
parameters always produce identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from klg.errors import ParseError, VocabularyError

MAGIC = b"KLG1\n"


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps(
        {"tensors": entries, "meta": dict(meta or {})}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ParseError("not a KLG1 checkpoint", path)
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}", path) from None
    payload = np.frombuffer(raw, dtype="<f8", offset=pos + hlen)
    tensors = {}
    for name, entry in header["tensors"].items():
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + size > payload.size:
            raise ParseError(f"tensor {name!r} runs past the end of the file", path)
        tensors[name] = payload[start : start + size].reshape(entry["shape"]).astype(np.float64)
    return tensors, header.get("meta", {})


def write_topk(sets: Sequence, label_names: Sequence[str], path) -> None:
    """One JSON object per line: ``id``, ranked ``labels`` (names), ``probs``."""
    lines = []
    for s in sets:
        rec = {"id": s.example_id, "labels": [label_names[c] for c in s.labels], "probs": list(s.probs)}
        lines.append(json.dumps(rec))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    os.replace(tmp, path)


def read_topk(path, vocab) -> list:
    from klg.base_model import TopKSet

    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                labels = tuple(vocab.id_of(n) for n in rec["labels"])
                probs = tuple(float(p) for p in rec["probs"])
                out.append(TopKSet(str(rec["id"]), labels, probs))
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path, lineno) from None
            except VocabularyError:
                raise
            except (KeyError, TypeError) as exc:
                raise ParseError(f"bad Top-k record: {exc}", path, lineno) from None
    return out
