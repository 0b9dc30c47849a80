"""Self-describing model checkpoints.

Layout::

    b"ENNCKPT1"
    repeated section:
        u32   name length (little-endian)
        bytes name (utf-8)
        u64   payload length
        bytes payload

Sections: ``arch`` (JSON model descriptor), ``ref`` (JSON reference
distribution), ``layout`` (JSON list of ``[name, shape]``), ``params``
(little-endian float64 flat vector).
"""
from __future__ import annotations

import json
import struct

import numpy as np

from ennkit.enn.models import build_model
from ennkit.enn.reference import ReferenceDistribution
from ennkit.numerics import Layout, ParamStore

MAGIC = b"ENNCKPT1"


class CheckpointError(ValueError):
    pass


def _section(name, payload):
    nb = name.encode()
    return struct.pack("<I", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload


def dumps(model, params=None):
    params = model.params if params is None else params
    out = [MAGIC]
    out.append(_section("arch", json.dumps(model.descriptor(), sort_keys=True).encode()))
    out.append(_section("ref", json.dumps(model.ref.to_dict(), sort_keys=True).encode()))
    out.append(_section("layout", json.dumps(params.layout.to_list()).encode()))
    out.append(_section("params", params.flat.astype("<f8").tobytes()))
    return b"".join(out)


def read_sections(blob):
    if not blob.startswith(MAGIC):
        raise CheckpointError("not an ENN checkpoint (bad magic)")
    pos, sections = len(MAGIC), {}
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise CheckpointError("truncated section header")
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + n].decode()
        pos += n
        (size,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if pos + size > len(blob):
            raise CheckpointError(f"section {name!r} truncated")
        sections[name] = blob[pos : pos + size]
        pos += size
    return sections


def loads(blob):
    """Returns ``(model, params)``; ``model.params`` is also set to the loaded values."""
    s = read_sections(blob)
    missing = {"arch", "ref", "layout", "params"} - set(s)
    if missing:
        raise CheckpointError(f"checkpoint missing sections {sorted(missing)}")
    model = build_model(json.loads(s["arch"]))
    ref = ReferenceDistribution.from_dict(json.loads(s["ref"]))
    layout = Layout.from_list(json.loads(s["layout"]))
    if layout != model.layout:
        raise CheckpointError("stored layout does not match the rebuilt architecture")
    if ref != model.ref:
        raise CheckpointError("stored reference distribution does not match the rebuilt model")
    flat = np.frombuffer(s["params"], dtype="<f8").astype(np.float64)
    params = ParamStore(layout, flat)
    model.params = params
    return model, params


def save(path, model, params=None):
    with open(path, "wb") as fh:
        fh.write(dumps(model, params))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
