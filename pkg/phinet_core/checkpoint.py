"""
Checkpoint Module
=================

Saving and loading training state to and from a single file.

A checkpoint file is a container of named arrays laid out as follows::

    8 bytes   magic  b"PHINETCK"
    4 bytes   header length N, unsigned little-endian
    N bytes   header, UTF-8 JSON:
                {"format_version": 1,
                 "metadata": {...},
                 "arrays": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}
    ...       array data, little-endian, C order; offsets are relative to the end
              of the header

The metadata holds the resolved configuration text, the epoch and step counters and
anything else that is not an array. Loading checks the magic and the format version.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from phinet_core.abstract import CheckpointError

MAGIC = b"PHINETCK"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<I")


@dataclass
class Checkpoint:
    """Named arrays and metadata read from (or about to be written to) a container."""

    arrays: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def epoch(self):
        return int(self.metadata.get("epoch", 0))

    @property
    def step(self):
        return int(self.metadata.get("step", 0))

    def subset(self, prefix):
        """All arrays below `prefix`, with the prefix stripped from their names."""
        return {name[len(prefix) :]: a for name, a in self.arrays.items() if name.startswith(prefix)}


def _little_endian(array):
    array = np.asarray(array)
    if array.dtype.byteorder == ">":
        array = array.astype(array.dtype.newbyteorder("<"))
    return np.ascontiguousarray(array)


def write_container(path, arrays, metadata=None):
    """Write named arrays and a metadata dict to `path`.

    Args:
        path (str or Path): the output file.
        arrays (dict): ``{name: numpy.ndarray}``.
        metadata (dict): JSON-serialisable metadata.

    Returns:
        Path: the written file.
    """
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, array in arrays.items():
        array = _little_endian(array)
        data = array.tobytes()
        entries.append(
            {"name": name, "shape": list(array.shape), "dtype": array.dtype.str, "offset": offset, "nbytes": len(data)}
        )
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "metadata": metadata or {}, "arrays": entries}, sort_keys=True
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_LENGTH.pack(len(header)))
        f.write(header)
        for data in blobs:
            f.write(data)
    tmp.replace(path)
    return path


def read_container(path):
    """Read a container written by `write_container`.

    Raises:
        CheckpointError: if the file is missing, truncated, not a container or of
            another format version.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint container")
    start = len(MAGIC) + _LENGTH.size
    if len(raw) < start:
        raise CheckpointError(f"{path} is truncated")
    (length,) = _LENGTH.unpack(raw[len(MAGIC) : start])
    try:
        header = json.loads(raw[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {e}")
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {header.get('format_version')}, expected {FORMAT_VERSION}"
        )
    base = start + length
    arrays = {}
    for entry in header["arrays"]:
        begin = base + entry["offset"]
        data = raw[begin : begin + entry["nbytes"]]
        if len(data) != entry["nbytes"]:
            raise CheckpointError(f"array {entry['name']!r} in {path} is truncated")
        arrays[entry["name"]] = np.frombuffer(data, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return Checkpoint(arrays=arrays, metadata=header["metadata"])


#################
# Torch helpers
#################


def module_arrays(prefix, module):
    """``state_dict`` of a module as numpy arrays named ``<prefix><key>``."""
    return {prefix + name: t.detach().cpu().numpy() for name, t in module.state_dict().items()}


def load_module_arrays(module, arrays):
    """Load numpy arrays (names without prefix) into `module`, strictly."""
    state = {name: torch.from_numpy(np.array(a)) for name, a in arrays.items()}
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint does not fit the model: {e}")


def optimizer_arrays(prefix, optimizer):
    """Split an optimizer state dict into arrays and JSON metadata."""
    sd = optimizer.state_dict()
    arrays = {}
    for index, slots in sd["state"].items():
        for key, value in slots.items():
            arrays[f"{prefix}{index}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return arrays, groups


def load_optimizer_arrays(optimizer, arrays, groups):
    """Inverse of `optimizer_arrays`."""
    state = {}
    for name, array in arrays.items():
        index, key = name.split("/", 1)
        state.setdefault(int(index), {})[key] = torch.from_numpy(np.array(array))
    groups = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()} for g in groups]
    try:
        optimizer.load_state_dict({"state": state, "param_groups": groups})
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"optimizer state does not fit: {e}")
