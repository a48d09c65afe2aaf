"""Deterministic single-file checkpoint archive.

A checkpoint is a zip file holding a JSON header plus one ``.npy`` member
per named array.  Member metadata (timestamps, permissions, ordering,
compression) is pinned, so saving the same state twice produces
byte-identical files, and a save -> load -> save round trip is bit-exact.
The header is always read and validated before any array data.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1
_HEADER_NAME = "header.json"
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON encoding of a config mapping."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    """Training state: named arrays plus the config snapshot that made them."""

    step: int
    config: dict
    arrays: dict[str, np.ndarray]
    log_digest: str = ""
    format_version: int = FORMAT_VERSION

    def array_names(self) -> list[str]:
        return sorted(self.arrays)


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o600 << 16
    return info


def save(ckpt: Checkpoint, path: str | Path) -> None:
    """Write the checkpoint archive (deterministic bytes)."""
    header = {
        "format_version": ckpt.format_version,
        "step": int(ckpt.step),
        "config": ckpt.config,
        "config_hash": config_hash(ckpt.config),
        "log_digest": ckpt.log_digest,
        "arrays": {
            name: {
                "shape": list(ckpt.arrays[name].shape),
                "dtype": str(ckpt.arrays[name].dtype),
            }
            for name in ckpt.array_names()
        },
    }
    header_blob = json.dumps(header, sort_keys=True, separators=(",", ":"))
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(_member(_HEADER_NAME), header_blob)
        for name in ckpt.array_names():
            data = ckpt.arrays[name]
            if data.ndim > 0:  # ascontiguousarray would promote 0-d to 1-d
                data = np.ascontiguousarray(data)
            buf = io.BytesIO()
            np.save(buf, data)
            zf.writestr(_member(f"arrays/{name}.npy"), buf.getvalue())


def load(path: str | Path) -> Checkpoint:
    """Read and validate a checkpoint archive.

    The header is parsed and its format version checked before any array
    member is opened; any structural problem raises
    :class:`~madseg.errors.CheckpointError`.
    """
    try:
        with zipfile.ZipFile(path, "r") as zf:
            try:
                header_blob = zf.read(_HEADER_NAME)
            except KeyError as exc:
                raise CheckpointError(
                    f"checkpoint {path} has no {_HEADER_NAME}"
                ) from exc
            try:
                header = json.loads(header_blob)
            except json.JSONDecodeError as exc:
                raise CheckpointError(
                    f"checkpoint {path} header is not valid JSON: {exc}"
                ) from exc
            version = header.get("format_version")
            if version != FORMAT_VERSION:
                raise CheckpointError(
                    f"checkpoint {path} has format version {version}, "
                    f"this build reads version {FORMAT_VERSION}"
                )
            for key in ("step", "config", "arrays"):
                if key not in header:
                    raise CheckpointError(
                        f"checkpoint {path} header lacks '{key}'"
                    )
            declared = header["arrays"]
            arrays: dict[str, np.ndarray] = {}
            for name in sorted(declared):
                member = f"arrays/{name}.npy"
                try:
                    raw = zf.read(member)
                except KeyError as exc:
                    raise CheckpointError(
                        f"checkpoint {path} is missing array member {member}"
                    ) from exc
                try:
                    arr = np.load(io.BytesIO(raw), allow_pickle=False)
                except ValueError as exc:
                    raise CheckpointError(
                        f"checkpoint {path} array {name} is corrupt: {exc}"
                    ) from exc
                want_shape = tuple(declared[name]["shape"])
                want_dtype = declared[name]["dtype"]
                if arr.shape != want_shape or str(arr.dtype) != want_dtype:
                    raise CheckpointError(
                        f"checkpoint {path} array {name} is "
                        f"{arr.shape}/{arr.dtype}, header says "
                        f"{want_shape}/{want_dtype}"
                    )
                arrays[name] = arr
            extra = {
                n for n in zf.namelist() if n != _HEADER_NAME
            } - {f"arrays/{n}.npy" for n in declared}
            if extra:
                raise CheckpointError(
                    f"checkpoint {path} has undeclared members: {sorted(extra)}"
                )
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"checkpoint {path} is not a valid archive: {exc}") from exc
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint {path} does not exist") from exc
    if header.get("config_hash") != config_hash(header["config"]):
        raise CheckpointError(
            f"checkpoint {path} config hash does not match its config"
        )
    return Checkpoint(
        step=int(header["step"]),
        config=header["config"],
        arrays=arrays,
        log_digest=header.get("log_digest", ""),
        format_version=FORMAT_VERSION,
    )
