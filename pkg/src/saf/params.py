"""Named parameter collections, gradient descent, gradient checking and the
SAFP1 parameter file format."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from .io import atomic_write_bytes
from .tensor import ContractError, Tensor

ROLES = ("encoder", "backcast-decoder", "forecast-decoder", "static-net")

MAGIC = b"SAFP1"


class ParameterSet:
    """Ordered mapping ``name -> Tensor`` tagged with the network role it serves."""

    def __init__(self, role: str, tensors: Mapping[str, Tensor | np.ndarray] | None = None):
        if role not in ROLES:
            raise ValueError(f"unknown parameter role {role!r}")
        self.role = role
        self._tensors: dict[str, Tensor] = {}
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value: Tensor | np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r} in {self.role}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def clone(self) -> "ParameterSet":
        """Deep copy with independent storage and no gradients."""
        return ParameterSet(self.role, {k: Tensor(t.values.copy()) for k, t in self.items()})

    def tile(self, batch: int) -> "ParameterSet":
        """One independent copy per batch element, stacked on a new leading axis."""
        return ParameterSet(
            self.role,
            {k: Tensor(np.repeat(t.values[None], batch, axis=0)) for k, t in self.items()},
        )

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def digest(self) -> str:
        h = hashlib.sha256(self.role.encode())
        for name, t in self.items():
            h.update(name.encode())
            h.update(str(t.shape).encode())
            h.update(np.ascontiguousarray(t.values).tobytes())
        return h.hexdigest()

    def equals(self, other: "ParameterSet") -> bool:
        """Bit-identical names, shapes and values."""
        if list(self) != list(other):
            return False
        return all(np.array_equal(self[k].values, other[k].values) for k in self)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}{t.shape}" for k, t in self.items())
        return f"ParameterSet({self.role}: {inner})"


def sgd_step(params: ParameterSet, rate: float) -> ParameterSet:
    """In-place ``theta <- theta - rate * grad``; gradients are cleared afterwards."""
    if rate < 0:
        raise ContractError(f"learning rate must be non-negative, got {rate}")
    for name, t in params.items():
        if t.grad is None:
            raise ContractError(f"{params.role}/{name} has no gradient")
    for t in params.tensors():
        if rate:
            t.values -= rate * t.grad
        t.grad = None
    return params


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-5

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


def grad_check(f: Callable[[], Tensor], params: list[ParameterSet] | ParameterSet,
               step: float = 1e-6, tol: float = 1e-5, atol: float = 1e-7) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` with central differences.

    ``f`` must build its graph from the tensors in ``params`` each call. The
    error for one parameter tensor is ``||a - n|| / max(||a||, ||n||, atol)``
    (Euclidean norms over its elements), so a tensor whose true gradient is
    zero is judged on an absolute scale. A norm rather than an elementwise
    ratio keeps finite-difference roundoff on near-zero components, which is
    of order ``eps * |f| / step``, from dominating the report.
    """
    from .tensor import Tape

    if not 0 < step <= 1e-3:
        raise ValueError(f"step must be in (0, 1e-3], got {step}")
    sets = [params] if isinstance(params, ParameterSet) else list(params)
    for ps in sets:
        ps.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss, wrt=[t for ps in sets for t in ps.tensors()])

    report = GradCheckReport(tol=tol)
    for ps in sets:
        for name, t in ps.items():
            analytic = t.grad.reshape(-1).copy()
            t.grad = None
            flat = t.values.reshape(-1)
            numeric = np.empty_like(analytic)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2.0 * step)
            a, n = np.linalg.norm(analytic), np.linalg.norm(numeric)
            report.max_rel_error[f"{ps.role}/{name}"] = float(np.linalg.norm(analytic - numeric) / max(a, n, atol))
    return report


# -- SAFP1 file format -------------------------------------------------------
#
#   bytes 0..4   b"SAFP1"
#   bytes 5..8   uint32 little-endian N = length of the JSON header
#   next N bytes UTF-8 JSON: {"meta": {...}, "tensors": [{"set", "name", "shape"}, ...]}
#   remainder    float64 little-endian values of every tensor, in header order,
#                each row-major


def save_parameters(path: str | os.PathLike, sets: list[ParameterSet], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    for ps in sets:
        for name, t in ps.items():
            entries.append({"set": ps.role, "name": name, "shape": list(t.shape)})
            blobs.append(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs))


def load_parameters(path: str | os.PathLike) -> tuple[dict[str, ParameterSet], dict]:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise ValueError(f"{path}: not a SAFP1 parameter file")
    (hlen,) = struct.unpack("<I", raw[5:9])
    header = json.loads(raw[9:9 + hlen].decode("utf-8"))
    offset = 9 + hlen
    sets: dict[str, ParameterSet] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        role = entry["set"]
        if role not in sets:
            sets[role] = ParameterSet(role)
        sets[role].add(entry["name"], values.astype(np.float64))
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return sets, header["meta"]
