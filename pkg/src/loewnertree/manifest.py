"""Run manifests: config echo, seed, digests of every emitted file.

One manifest per output directory.  Wall-clock timing is written to a
separate sidecar (off by default) so the manifest itself is byte-stable for
identical (config, seed) runs.
"""
from __future__ import annotations

import hashlib
import json
import os

from . import __version__

MANIFEST_NAME = "manifest.json"


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str, *, command: str, config: dict, seed,
                   outputs: list[str], inputs: list[str] = (),
                   step_counts: dict | None = None,
                   wall_clock: float | None = None) -> str:
    doc = {
        "tool": "loewnertree",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {os.path.basename(p): file_digest(p) for p in inputs},
        "outputs": {os.path.basename(p): file_digest(p) for p in outputs},
        "step_counts": step_counts or {},
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    if wall_clock is not None:
        with open(os.path.join(out_dir, "timing.json"), "w") as f:
            json.dump({"wall_clock_s": wall_clock}, f)
            f.write("\n")
    return path


def verify_manifest(out_dir: str) -> list[str]:
    """Return a list of mismatched files (empty when everything checks out)."""
    with open(os.path.join(out_dir, MANIFEST_NAME)) as f:
        doc = json.load(f)
    bad = []
    for name, digest in doc.get("outputs", {}).items():
        p = os.path.join(out_dir, name)
        if not os.path.exists(p) or file_digest(p) != digest:
            bad.append(name)
    return bad
