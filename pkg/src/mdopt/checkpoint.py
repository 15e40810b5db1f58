"""Versioned binary checkpoints of an :class:`MdrState` plus its ModelSpec.

Layout: the 8-byte magic ``MDCKPT01``, a little-endian uint32 header length,
a UTF-8 JSON header, then the raw float64 arrays in header order.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import MdoptError
from .nn import Layout, ModelSpec, ParamVector
from .optim import OptState
from .strategies import MdrState

MAGIC = b"MDCKPT01"
VERSION = 1


class CheckpointError(MdoptError, ValueError):
    """Unreadable, truncated or incompatible checkpoint file."""


def _blocks(layout):
    return [[name, list(shape)] for name, shape in layout.blocks]


def _layout(blocks):
    return Layout(tuple((name, tuple(shape)) for name, shape in blocks))


def _collect(state):
    arrays = [("shared", state.shared.values)]
    arrays += [(f"specific.{i}", s.values) for i, s in enumerate(state.specific)]
    opt = {}
    for key in sorted(state.aux):
        value = state.aux[key]
        if isinstance(value, OptState):
            opt[key] = {
                "kind": value.kind,
                "lr": value.lr,
                "beta1": value.beta1,
                "beta2": value.beta2,
                "eps": value.eps,
                "step_count": value.step_count,
                "blocks": _blocks(value.moment1.layout),
            }
            arrays.append((f"{key}.m1", value.moment1.values))
            arrays.append((f"{key}.m2", value.moment2.values))
        elif isinstance(value, ParamVector):
            opt[key] = {"kind": "vector", "blocks": _blocks(value.layout)}
            arrays.append((key, value.values))
    return arrays, opt


def save(state, path, extra=None):
    """Write ``state`` (spec, all parameter vectors and optimizer moments)."""
    if state.spec is None:
        raise CheckpointError("state has no ModelSpec attached")
    arrays, opt = _collect(state)
    header = {
        "version": VERSION,
        "spec": state.spec.to_dict(),
        "n_domains": state.n_domains,
        "arrays": [[name, int(a.size)] for name, a in arrays],
        "aux": opt,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def load(path):
    """Inverse of :func:`save`; returns ``(state, extra)``."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not an mdopt checkpoint")
    try:
        (n,) = struct.unpack_from("<I", raw, len(MAGIC))
        start = len(MAGIC) + 4
        header = json.loads(raw[start : start + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    d = header["spec"]
    spec = ModelSpec(d["num_users"], d["num_items"], d["embed_dim"], tuple(d["hidden"]), d["activation"], d["seed"])
    pos = start + n
    arrays = {}
    for name, size in header["arrays"]:
        end = pos + 8 * size
        if end > len(raw):
            raise CheckpointError(f"{path} is truncated")
        arrays[name] = np.frombuffer(raw[pos:end], dtype="<f8").astype(np.float64)
        pos = end
    if pos != len(raw):
        raise CheckpointError(f"{path} has trailing bytes")
    layout = spec.layout

    def vec(name, lay=layout):
        if arrays[name].size != lay.size:
            raise CheckpointError(f"array {name} does not match the model layout")
        return ParamVector(arrays[name], lay)

    shared = vec("shared")
    specific = tuple(vec(f"specific.{i}") for i in range(header["n_domains"]))
    aux = {}
    for key, meta in header["aux"].items():
        lay = _layout(meta["blocks"])
        if meta["kind"] == "vector":
            aux[key] = vec(key, lay)
        else:
            aux[key] = OptState(
                meta["kind"], meta["lr"], meta["beta1"], meta["beta2"], meta["eps"], meta["step_count"],
                vec(f"{key}.m1", lay), vec(f"{key}.m2", lay),
            )
    return MdrState(shared, specific, spec, aux), header["extra"]


def states_equal(a, b):
    """Bitwise equality of every parameter vector."""
    if a.n_domains != b.n_domains:
        return False
    return all(x.bitwise_equal(y) for x, y in zip(a.params(), b.params()))
