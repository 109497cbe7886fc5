"""Artifact paths and content hashing for provenance checks."""

from __future__ import annotations

import hashlib
import json
import os

GAITS_NAME = "gaits.json"
RECOVERY_NAME = "recovery_lib.json"
TARGETS_NAME = "targets.json"
FRS_DIR_NAME = "frs_cache"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def obj_sha256(obj) -> str:
    """Hash of a JSON-serializable object, key order fixed."""
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True).encode()).hexdigest()


def data_dir() -> str:
    return os.path.join(os.path.dirname(__file__), "data")


def default_path(name: str) -> str:
    return os.path.join(data_dir(), name)
