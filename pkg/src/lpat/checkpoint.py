"""Lossless, line-oriented text checkpoints.

Layout: a magic line ``LPAT-CKPT v1``, one ``arch`` line with the five layer
widths, optional ``meta key value`` lines, then one block per parameter
tensor (``tensor <name> <rows> [<cols>]`` followed by rows of hexadecimal
float literals), closed by an ``end`` line. Hex floats round-trip bit-exactly.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from .model import DenseParams, LstmParams, Network

MAGIC = "LPAT-CKPT v1"
ARCH_KEYS = ("n_attrs", "hidden1", "hidden2", "lstm_units", "classes")


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class CheckpointFormatError(CheckpointError):
    """Wrong magic tag or a structurally malformed line."""


class CheckpointArchitectureError(CheckpointError):
    """Stored architecture differs from what the caller expects."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before all tensors (or the end marker) were read."""


def _hex_row(row: np.ndarray) -> str:
    return " ".join(float(x).hex() for x in row)


def checkpoint_save(net: Network, path, meta: Optional[dict[str, str]] = None) -> None:
    """Write ``net`` to ``path``; ``meta`` holds extra single-line strings
    (e.g. the training window, attribute list and scaling) carried verbatim."""
    dims = net.dims
    lines = [MAGIC, "arch " + " ".join(f"{k} {dims[k]}" for k in ARCH_KEYS)]
    for key, value in (meta or {}).items():
        value = str(value)
        if "\n" in value or " " in key:
            raise ValueError(f"meta entry {key!r} must be single-line with a bare key")
        lines.append(f"meta {key} {value}")
    for name, arr in net.params().items():
        if arr.ndim == 1:
            lines.append(f"tensor {name} {arr.shape[0]}")
            lines.append(_hex_row(arr))
        else:
            lines.append(f"tensor {name} {arr.shape[0]} {arr.shape[1]}")
            lines.extend(_hex_row(row) for row in arr)
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def _tensor_shapes(dims: dict[str, int]) -> dict[str, tuple[int, ...]]:
    n, h1, h2, q, c = (dims[k] for k in ARCH_KEYS)
    return {
        "dense1.W": (h1, n), "dense1.b": (h1,),
        "dense2.W": (h2, h1), "dense2.b": (h2,),
        "lstm.W": (4 * q, h2), "lstm.U": (4 * q, q), "lstm.b": (4 * q,),
        "dense3.W": (c, q), "dense3.b": (c,),
    }


def checkpoint_load(path, expect: Optional[dict[str, int]] = None
                    ) -> tuple[Network, dict[str, str]]:
    """Read a checkpoint; returns (network, meta).

    ``expect`` maps arch keys (e.g. ``lstm_units``) to required values and
    raises CheckpointArchitectureError on any mismatch.
    """
    try:
        text = Path(path).read_text(encoding="ascii")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(f"{path}: not a text checkpoint ({exc})") from None
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        raise CheckpointFormatError(f"{path}: missing magic line {MAGIC!r}")
    if len(lines) < 2 or not lines[1].startswith("arch "):
        raise CheckpointTruncatedError(f"{path}: no architecture line")
    arch_tokens = lines[1].split()[1:]
    if len(arch_tokens) != 2 * len(ARCH_KEYS):
        raise CheckpointFormatError(f"{path}: malformed arch line")
    dims: dict[str, int] = {}
    for k, v in zip(arch_tokens[0::2], arch_tokens[1::2]):
        if k not in ARCH_KEYS:
            raise CheckpointFormatError(f"{path}: unknown arch key {k!r}")
        try:
            dims[k] = int(v)
        except ValueError:
            raise CheckpointFormatError(f"{path}: bad arch value {v!r} for {k}") from None
    if expect:
        for k, v in expect.items():
            if dims.get(k) != v:
                raise CheckpointArchitectureError(
                    f"{path}: checkpoint has {k}={dims.get(k)}, expected {v}")

    shapes = _tensor_shapes(dims)
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    i = 2
    saw_end = False
    while i < len(lines):
        line = lines[i]
        if line == "end":
            saw_end = True
            break
        if line.startswith("meta "):
            parts = line.split(" ", 2)
            if len(parts) < 3:
                raise CheckpointFormatError(f"{path}:{i + 1}: malformed meta line")
            meta[parts[1]] = parts[2]
            i += 1
            continue
        if not line.startswith("tensor "):
            raise CheckpointFormatError(f"{path}:{i + 1}: unexpected line {line!r}")
        head = line.split()
        name = head[1]
        if name not in shapes:
            raise CheckpointFormatError(f"{path}:{i + 1}: unknown tensor {name!r}")
        shape = tuple(int(t) for t in head[2:])
        if shape != shapes[name]:
            raise CheckpointFormatError(
                f"{path}:{i + 1}: tensor {name} has shape {shape}, arch implies {shapes[name]}")
        rows = 1 if len(shape) == 1 else shape[0]
        cols = shape[0] if len(shape) == 1 else shape[1]
        if i + rows >= len(lines) + 1:
            raise CheckpointTruncatedError(f"{path}: tensor {name} cut short")
        block = np.empty(shape)
        flat = block.reshape(rows, cols)
        for r in range(rows):
            if i + 1 + r >= len(lines):
                raise CheckpointTruncatedError(f"{path}: tensor {name} cut short")
            vals = lines[i + 1 + r].split()
            if len(vals) != cols:
                raise CheckpointTruncatedError(
                    f"{path}: tensor {name} row {r} has {len(vals)} values, expected {cols}")
            try:
                flat[r] = [float.fromhex(v) for v in vals]
            except ValueError:
                raise CheckpointFormatError(
                    f"{path}: tensor {name} row {r} holds a non-hex-float value") from None
        tensors[name] = block
        i += 1 + rows
    if not saw_end:
        raise CheckpointTruncatedError(f"{path}: missing end marker")
    missing = set(shapes) - set(tensors)
    if missing:
        raise CheckpointTruncatedError(f"{path}: missing tensors {sorted(missing)}")

    net = Network(
        dense1=DenseParams(tensors["dense1.W"], tensors["dense1.b"]),
        dense2=DenseParams(tensors["dense2.W"], tensors["dense2.b"]),
        lstm=LstmParams(tensors["lstm.W"], tensors["lstm.U"], tensors["lstm.b"]),
        dense3=DenseParams(tensors["dense3.W"], tensors["dense3.b"]),
    )
    return net, meta
