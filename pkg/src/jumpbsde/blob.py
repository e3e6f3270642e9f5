"""Flat binary containers for path clouds and trained networks.

Layout: magic ``JBSD``, format version (``<u4``), header length (``<u4``),
a UTF-8 JSON header, then the arrays listed in the header back to back as
little-endian ``float64`` / ``int64`` / ``bool`` payloads.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import Mlp
from .paths import IncrementBatch, PathBatch, TimeGrid
from .solver import StepNetworks

MAGIC = b"JBSD"
VERSION = 1
_DTYPES = {"f8": "<f8", "i8": "<i8", "b1": "|b1"}


class BlobError(ValueError):
    pass


def write_blob(path, kind: str, meta: dict, arrays: dict) -> None:
    entries = []
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "b1" if arr.dtype == bool else ("i8" if np.issubdtype(arr.dtype, np.integer) else "f8")
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    header = json.dumps({"kind": kind, "meta": meta, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
        for chunk in payload:
            fh.write(chunk)


def read_blob(path, kind: str = None):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BlobError(f"{path}: not a jumpbsde blob")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise BlobError(f"{path}: unsupported blob version {version}")
    header = json.loads(data[12:12 + hlen].decode())
    if kind is not None and header["kind"] != kind:
        raise BlobError(f"{path}: holds '{header['kind']}', expected '{kind}'")
    pos = 12 + hlen
    arrays = {}
    for ent in header["arrays"]:
        dt = np.dtype(_DTYPES[ent["dtype"]])
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        arrays[ent["name"]] = np.frombuffer(data, dt, n, pos).reshape(ent["shape"]).copy()
        pos += n * dt.itemsize
    if pos != len(data):
        raise BlobError(f"{path}: {len(data) - pos} trailing bytes")
    return header["meta"], arrays


# ---------------------------------------------------------------------------
# path clouds


def save_paths(path, paths: PathBatch) -> None:
    inc = paths.increments
    meta = {"seed": int(paths.seed), "fingerprint": paths.fingerprint, "batch": int(paths.batch),
            "N": int(paths.grid.N), "q": int(paths.X.shape[2]), "d": int(inc.dW.shape[2]), "extra": paths.meta}
    write_blob(path, "paths", meta, {
        "nodes": paths.grid.nodes, "X": paths.X, "valid": paths.valid, "sigma_eps_sqrt": paths.sigma_eps_sqrt,
        "dW": inc.dW, "dWt": inc.dWt, "counts": inc.counts, "jump_path": inc.jump_path,
        "jump_cell": inc.jump_cell, "jump_size": inc.jump_size, "step_ptr": inc.step_ptr,
        "masses": inc.masses, "steps": inc.steps,
    })


def load_paths(path) -> PathBatch:
    meta, a = read_blob(path, "paths")
    inc = IncrementBatch(a["dW"], a["dWt"], a["counts"].astype(np.int32), a["jump_path"], a["jump_cell"],
                         a["jump_size"], a["step_ptr"], a["masses"], a["steps"])
    return PathBatch(a["X"], inc, TimeGrid(a["nodes"]), a["sigma_eps_sqrt"], meta["seed"], a["valid"],
                     meta["fingerprint"], meta.get("extra", {}))


# ---------------------------------------------------------------------------
# networks


def _net_arrays(prefix: str, net: Mlp, out: dict) -> int:
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.W{k}"] = w
        out[f"{prefix}.b{k}"] = b
    return len(net.weights)


def save_networks(path, steps, meta: dict = None) -> None:
    """Store the per-step networks of a trained solution."""
    arrays = {}
    layout = []
    for i, s in enumerate(steps):
        entry = {}
        for name in ("Y", "Z", "W", "U"):
            net = getattr(s, f"net_{name}")
            entry[name] = None if net is None else _net_arrays(f"{i}.{name}", net, arrays)
        arrays[f"{i}.x_shift"] = s.x_shift
        arrays[f"{i}.x_scale"] = s.x_scale
        entry["e_scale"] = float(s.e_scale)
        layout.append(entry)
    write_blob(path, "networks", {"layout": layout, **(meta or {})}, arrays)


def load_networks(path):
    """Returns ``(steps, meta)``."""
    meta, a = read_blob(path, "networks")
    steps = []
    for i, entry in enumerate(meta["layout"]):
        nets = {}
        for name in ("Y", "Z", "W", "U"):
            L = entry[name]
            nets[name] = None if L is None else Mlp([a[f"{i}.{name}.W{k}"] for k in range(L)],
                                                    [a[f"{i}.{name}.b{k}"] for k in range(L)])
        steps.append(StepNetworks(nets["Y"], nets["Z"], nets["W"], nets["U"], a[f"{i}.x_shift"],
                                  a[f"{i}.x_scale"], entry["e_scale"]))
    return steps, meta
