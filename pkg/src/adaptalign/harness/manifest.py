"""Run manifests written beside every output."""

from __future__ import annotations

import json
import os
import platform
import time
from importlib import metadata
from typing import Optional, Sequence

from .. import __version__
from .config import ExperimentConfig

MANIFEST_NAME = "manifest.json"
_PACKAGES = ("numpy", "scipy", "matplotlib", "Pillow")


def package_versions() -> dict[str, str]:
    out = {"python": platform.python_version(), "adaptalign": __version__}
    for name in _PACKAGES:
        try:
            out[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            out[name] = "missing"
    return out


def write_manifest(
    out_dir: str,
    command: str,
    cfg: Optional[ExperimentConfig] = None,
    argv: Sequence[str] = (),
    outputs: Sequence[str] = (),
    extra: Optional[dict] = None,
) -> str:
    """Config hash, seed, versions and outputs; ``created`` is the only non-reproducible field."""
    os.makedirs(out_dir, exist_ok=True)
    doc = {
        "command": command,
        "argv": list(argv),
        "config_sha256": cfg.digest() if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "config": cfg.to_dict() if cfg is not None else None,
        "versions": package_versions(),
        "outputs": sorted(os.path.relpath(p, out_dir) for p in outputs),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        doc["extra"] = extra
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path
