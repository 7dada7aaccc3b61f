"""Shared checkpoint archive format.

A checkpoint is a ZIP archive (stored, fixed timestamps, so identical content
gives identical bytes) holding:

  manifest.json   format version, checkpoint kind, architecture metadata,
                  per-array shapes, free-form metadata, and a SHA-256 content
                  checksum
  arrays/<name>   raw little-endian float32 values for every parameter /
                  optimizer moment, names stable across versions
  blobs/<name>    raw byte strings (RNG states)

Loading verifies the checksum and, when the caller states expectations, the
kind and architecture metadata; failures raise IntegrityError rather than
returning silently corrupt tensors.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import IntegrityError

FORMAT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    kind: str
    arch: dict
    arrays: dict[str, torch.Tensor]
    blobs: dict[str, bytes] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _content_checksum(arrays: dict[str, bytes], blobs: dict[str, bytes]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(arrays[name])
    for name in sorted(blobs):
        h.update(name.encode())
        h.update(blobs[name])
    return h.hexdigest()


def save_checkpoint(path: Path | str, ckpt: Checkpoint) -> None:
    array_bytes: dict[str, bytes] = {}
    shapes: dict[str, list[int]] = {}
    for name, tensor in ckpt.arrays.items():
        arr = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        array_bytes[name] = arr.tobytes()
        shapes[name] = list(tensor.shape)

    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "arch": ckpt.arch,
        "shapes": shapes,
        "meta": ckpt.meta,
        "checksum": _content_checksum(array_bytes, ckpt.blobs),
    }

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        def put(name: str, data: bytes) -> None:
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            zf.writestr(info, data)

        put("manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for name in sorted(array_bytes):
            put(f"arrays/{name}", array_bytes[name])
        for name in sorted(ckpt.blobs):
            put(f"blobs/{name}", ckpt.blobs[name])
    tmp.replace(path)


def load_checkpoint(
    path: Path | str,
    kind: str | None = None,
    expect_arch: dict | None = None,
) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"checkpoint file not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            array_bytes: dict[str, bytes] = {}
            blobs: dict[str, bytes] = {}
            for info in zf.infolist():
                if info.filename.startswith("arrays/"):
                    array_bytes[info.filename[len("arrays/"):]] = zf.read(info)
                elif info.filename.startswith("blobs/"):
                    blobs[info.filename[len("blobs/"):]] = zf.read(info)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, EOFError) as exc:
        raise IntegrityError(f"unreadable checkpoint {path}: {exc}") from exc

    if manifest.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(
            f"{path}: unsupported checkpoint format version {manifest.get('format_version')}"
        )
    if manifest.get("checksum") != _content_checksum(array_bytes, blobs):
        raise IntegrityError(f"{path}: content checksum mismatch (corrupt or truncated file)")
    if kind is not None and manifest.get("kind") != kind:
        raise IntegrityError(
            f"{path}: expected a {kind!r} checkpoint, found {manifest.get('kind')!r}"
        )
    if expect_arch is not None and manifest.get("arch") != expect_arch:
        raise IntegrityError(
            f"{path}: architecture metadata mismatch\n"
            f"  checkpoint: {manifest.get('arch')}\n  expected:   {expect_arch}"
        )

    arrays: dict[str, torch.Tensor] = {}
    for name, raw in array_bytes.items():
        shape = manifest["shapes"].get(name)
        if shape is None:
            raise IntegrityError(f"{path}: array {name!r} missing from manifest shapes")
        flat = np.frombuffer(raw, dtype="<f4")
        expected = int(np.prod(shape)) if shape else 1
        if flat.size != expected:
            raise IntegrityError(
                f"{path}: array {name!r} has {flat.size} values, shape {shape} needs {expected}"
            )
        arrays[name] = torch.from_numpy(flat.copy()).reshape(shape)

    return Checkpoint(
        kind=manifest["kind"],
        arch=manifest["arch"],
        arrays=arrays,
        blobs=blobs,
        meta=manifest.get("meta", {}),
    )


def module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{name}": tensor for name, tensor in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, ckpt: Checkpoint, prefix: str) -> None:
    state = {}
    head = prefix + "."
    for name, tensor in ckpt.arrays.items():
        if name.startswith(head):
            state[name[len(head):]] = tensor
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise IntegrityError(f"checkpoint is missing arrays for {prefix!r}: {sorted(missing)}")
    module.load_state_dict(state)
