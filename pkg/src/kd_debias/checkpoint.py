"""Plain-text checkpoints.

Layout::

    KD-DEBIAS-CKPT 1
    kind=teacher
    num_users=...
    num_items=...
    dim=...
    num_envs=...          (teacher only)

    [user_inv]
    <one row of space-separated floats per entity>
    ...

Floats are written with 17 significant digits so every value round-trips exactly.
"""
from __future__ import annotations

import os

import numpy as np

from .distiller import StudentModel
from .teacher import TeacherModel

MAGIC = "KD-DEBIAS-CKPT 1"
KINDS = ("teacher", "student")


class CheckpointError(ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        loc = os.fspath(path) if path is not None else "<checkpoint>"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}")
        self.path = path
        self.line = line


def _sections(model) -> tuple[dict[str, int], list[tuple[str, np.ndarray]]]:
    if isinstance(model, TeacherModel):
        header = {"kind": "teacher", "num_users": model.num_users, "num_items": model.num_items,
                  "dim": model.dim, "num_envs": model.num_envs}
        body = [(name, t) for name, t in model.tables().items()]
        body = [(n, t.reshape(1, -1) if t.ndim == 1 else t) for n, t in body]
    elif isinstance(model, StudentModel):
        header = {"kind": "student", "num_users": model.num_users, "num_items": model.num_items,
                  "dim": model.dim}
        body = list(model.tables().items())
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    return header, body


def _expected_shapes(kind: str, h: dict[str, int]) -> dict[str, tuple[int, int]]:
    nu, ni, d = h["num_users"], h["num_items"], h["dim"]
    if kind == "student":
        return {"user_emb": (nu, d), "item_emb": (ni, d)}
    k = h["num_envs"]
    return {"user_inv": (nu, d), "item_inv": (ni, d), "user_var": (nu, d), "item_var": (ni, d),
            "env_emb": (k, d), "clf_weight": (d, k), "clf_bias": (1, k)}


def dumps(model) -> str:
    header, body = _sections(model)
    lines = [MAGIC]
    lines += [f"{k}={v}" for k, v in header.items()]
    lines.append("")
    for name, table in body:
        lines.append(f"[{name}]")
        lines += [" ".join(format(float(x), ".17g") for x in row) for row in table]
    return "\n".join(lines) + "\n"


def save_checkpoint(model, path) -> None:
    text = dumps(model)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint: {exc.strerror}", path) from exc


def loads(text: str, path=None):
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].strip() != MAGIC:
        raise CheckpointError(f"bad magic line, expected {MAGIC!r}", path, 1)
    header: dict[str, str] = {}
    pos = 1
    while pos < len(lines) and lines[pos].strip():
        key, sep, value = lines[pos].partition("=")
        if not sep:
            raise CheckpointError(f"expected key=value, got {lines[pos]!r}", path, pos + 1)
        header[key.strip()] = value.strip()
        pos += 1
    kind = header.get("kind")
    if kind not in KINDS:
        raise CheckpointError(f"unknown kind {kind!r}; accepted: {', '.join(KINDS)}", path, 2)
    required = ["num_users", "num_items", "dim"] + (["num_envs"] if kind == "teacher" else [])
    dims: dict[str, int] = {}
    for key in required:
        if key not in header:
            raise CheckpointError(f"missing header field {key!r}", path)
        try:
            dims[key] = int(header[key])
        except ValueError:
            raise CheckpointError(f"{key} is not an integer: {header[key]!r}", path) from None
        if dims[key] < 1:
            raise CheckpointError(f"{key} must be positive", path)
    shapes = _expected_shapes(kind, dims)

    tables: dict[str, np.ndarray] = {}
    pos += 1  # blank separator
    for name, (rows, cols) in shapes.items():
        if pos >= len(lines):
            raise CheckpointError(f"truncated: missing section [{name}]", path, pos + 1)
        if lines[pos].strip() != f"[{name}]":
            raise CheckpointError(f"expected section [{name}], got {lines[pos]!r}", path, pos + 1)
        pos += 1
        data = np.empty((rows, cols))
        for r in range(rows):
            if pos >= len(lines) or lines[pos].startswith("["):
                raise CheckpointError(f"section [{name}] has {r} of {rows} declared rows (dimension mismatch or truncated file)",
                                      path, pos + 1)
            tokens = lines[pos].split()
            if len(tokens) != cols:
                raise CheckpointError(f"dimension mismatch in [{name}]: expected {cols} values, got {len(tokens)}",
                                      path, pos + 1)
            try:
                data[r] = [float(t) for t in tokens]
            except ValueError:
                bad = next(t for t in tokens if not _is_float(t))
                raise CheckpointError(f"non-numeric token {bad!r}", path, pos + 1) from None
            pos += 1
        tables[name] = data
    if pos != len(lines):
        raise CheckpointError("dimension mismatch: unexpected trailing content", path, pos + 1)

    try:
        if kind == "student":
            return StudentModel(tables["user_emb"], tables["item_emb"])
        tables["clf_bias"] = tables["clf_bias"].reshape(-1)
        return TeacherModel(**tables)
    except ValueError as exc:
        raise CheckpointError(str(exc), path) from None


def _is_float(t: str) -> bool:
    try:
        float(t)
    except ValueError:
        return False
    return True


def load_checkpoint(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc.strerror}", path) from exc
    return loads(text, path)
