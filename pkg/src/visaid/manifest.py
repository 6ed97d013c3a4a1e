"""Run manifests: resolved flags, input fingerprints, and a stable hash.

The manifest hash covers only deterministic content (subcommand, resolved
configuration, input fingerprints, seed, tool version), so artifacts that
embed it stay byte-identical across reruns; the wall clock lives only in the
manifest file itself.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from . import __version__


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


VOLATILE_KEYS = ("out", "ckpt")


def make_manifest(subcommand: str, resolved: dict, inputs: dict[str, str]) -> dict:
    """Manifest for one run; the hash is location-independent.

    Path-valued flags enter the hash through their *content* fingerprints
    (the inputs dict), never as raw strings, so rerunning with the same data
    in a different directory yields the same hash and identical artifacts.
    The full flag set, paths included, is still recorded unhashed.
    """
    skip = set(inputs) | set(VOLATILE_KEYS)
    core = {
        "subcommand": subcommand,
        "config": {k: v for k, v in resolved.items() if k not in skip},
        "inputs": {name: sha256_file(path) for name, path in sorted(inputs.items())},
        "seed": resolved.get("seed"),
        "tool_version": __version__,
    }
    digest = hashlib.sha256(
        json.dumps(core, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]
    manifest = dict(core)
    manifest["flags"] = {k: str(v) if v is not None else None for k, v in resolved.items()}
    manifest["manifest_hash"] = digest
    manifest["wall_clock"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    return manifest


def write_manifest(path, manifest: dict):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
