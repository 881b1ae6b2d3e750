"""Named, ordered parameter collections: the unit of federation.

A ParamSet is an ordered list of (name, tensor, role) entries. Ordering is
fixed by model construction and identical across all clients built from the
same spec, which is what makes deterministic reductions possible.
"""

import json
import struct
from enum import Enum

import numpy as np

from .errors import DataFormatError, ProtocolError


class Role(str, Enum):
    WEIGHT = "Weight"
    BIAS = "Bias"
    NORM_AFFINE = "NormAffine"
    NORM_RUNNING_STAT = "NormRunningStat"
    FROZEN = "Frozen"


NORM_ROLES = (Role.NORM_AFFINE, Role.NORM_RUNNING_STAT)


class ParamSet:
    """Ordered mapping name -> (tensor, role) with stable iteration order."""

    def __init__(self, entries=()):
        self._names = []
        self._data = {}
        self._roles = {}
        for name, tensor, role in entries:
            self.add(name, tensor, role)

    def add(self, name, tensor, role):
        if name in self._data:
            raise ProtocolError(f"duplicate parameter name {name!r}")
        self._names.append(name)
        self._data[name] = np.asarray(tensor)
        self._roles[name] = Role(role)

    def __len__(self):
        return len(self._names)

    def __contains__(self, name):
        return name in self._data

    def __iter__(self):
        for name in self._names:
            yield name, self._data[name], self._roles[name]

    @property
    def names(self):
        return list(self._names)

    def get(self, name):
        return self._data[name]

    def role(self, name):
        return self._roles[name]

    def set(self, name, tensor):
        tensor = np.asarray(tensor)
        if tensor.shape != self._data[name].shape:
            raise ProtocolError(
                f"shape mismatch for {name!r}: {tensor.shape} vs "
                f"{self._data[name].shape}"
            )
        self._data[name] = tensor

    def copy(self):
        return ParamSet((n, t.copy(), r) for n, t, r in self)

    def zeros_like(self):
        return ParamSet((n, np.zeros_like(t), r) for n, t, r in self)

    def compatible_with(self, other):
        return self._names == other._names and all(
            self._data[n].shape == other._data[n].shape for n in self._names
        )

    def require_compatible(self, other):
        if not self.compatible_with(other):
            raise ProtocolError("incompatible ParamSets (names or shapes differ)")

    def flat(self, roles=None):
        """Concatenate entries (optionally restricted to roles) into one vector."""
        parts = [
            t.ravel() for n, t, r in self if roles is None or r in roles
        ]
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)

    def allclose(self, other, rtol=0.0, atol=0.0):
        return self.compatible_with(other) and all(
            np.allclose(self._data[n], other._data[n], rtol=rtol, atol=atol)
            for n in self._names
        )

    def equal(self, other):
        """Bitwise equality of every entry."""
        return self.compatible_with(other) and all(
            np.array_equal(self._data[n], other._data[n]) for n in self._names
        )


def param_partition(params, policy):
    """Split a ParamSet into (shared, local) partitions.

    Policy "All" shares everything; "ExcludeNorm" keeps norm affine
    parameters and running statistics client-local (the FedBN split).
    """
    if policy not in ("All", "ExcludeNorm"):
        raise ProtocolError(f"unknown partition policy {policy!r}")
    shared, local = ParamSet(), ParamSet()
    for name, tensor, role in params:
        if policy == "ExcludeNorm" and role in NORM_ROLES:
            local.add(name, tensor, role)
        else:
            shared.add(name, tensor, role)
    return shared, local


MAGIC = b"FSPS"


def save_paramset(params, path):
    """Flat binary container: JSON header + little-endian float64 payload."""
    header = {
        "entries": [
            {"name": n, "shape": list(t.shape), "role": r.value}
            for n, t, r in params
        ]
    }
    hbytes = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for _, t, _ in params:
            f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_paramset(path):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise DataFormatError(f"{path}: not a ParamSet file (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        out = ParamSet()
        for e in header["entries"]:
            size = int(np.prod(e["shape"])) if e["shape"] else 1
            raw = f.read(8 * size)
            if len(raw) != 8 * size:
                raise DataFormatError(f"{path}: truncated payload at {e['name']}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).copy()
            out.add(e["name"], arr, Role(e["role"]))
        return out


def write_manifest(params, path):
    """Human-readable JSON companion to the binary container."""
    manifest = [
        {"name": n, "shape": list(t.shape), "role": r.value,
         "size": int(t.size)}
        for n, t, r in params
    ]
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
