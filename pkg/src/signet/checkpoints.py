"""Versioned model checkpoint files.

A checkpoint is a ``torch.save`` payload::

    {"format": "signet-checkpoint", "version": 1, "kind": <str>,
     "arch": <dict of primitives>, "state": {<name>: state_dict}, "meta": <dict>}

``arch`` is enough to rebuild the modules before loading ``state``.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import torch

from .errors import StartupError

FORMAT = "signet-checkpoint"
VERSION = 1


def save_checkpoint(path, kind: str, arch: dict, state: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "arch": dict(arch),
        "state": {k: {n: t.detach().cpu().clone() for n, t in sd.items()} for k, sd in state.items()},
        "meta": dict(meta or {}),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, kind: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise StartupError(f"missing {kind} checkpoint: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001 - torch raises many types for bad files
        raise StartupError(f"unreadable {kind} checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise StartupError(f"{path} is not a signet checkpoint")
    if payload.get("version") != VERSION:
        raise StartupError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if payload.get("kind") != kind:
        raise StartupError(f"{path} holds a {payload.get('kind')} model, expected {kind}")
    return payload


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
