"""Run manifests: every command leaves one manifest.json in its output
directory with the resolved config, input checksums, seed, and the argv
needed to re-run the job."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

MANIFEST_NAME = "manifest.json"


class ManifestError(ValueError):
    """Raised when a manifest is missing or unreadable."""


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def checksum_input(path: str | Path) -> str:
    """Checksum a file, or a directory as the hash of its sorted file hashes."""

    path = Path(path)
    if path.is_file():
        return sha256_file(path)
    if path.is_dir():
        digest = hashlib.sha256()
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            digest.update(str(child.relative_to(path)).encode())
            digest.update(bytes.fromhex(sha256_file(child)))
        return digest.hexdigest()
    raise ManifestError(f"cannot checksum missing input {path}")


def write_manifest(
    out_dir: str | Path,
    command: str,
    argv: list[str],
    config: dict,
    inputs: list[str | Path],
    seed: int,
    outputs: list[str],
) -> Path:
    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "inputs": {str(p): checksum_input(p) for p in inputs},
        "seed": seed,
        "version": __version__,
        "outputs": sorted(outputs),
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise ManifestError(f"no manifest at {path}")
    payload = json.loads(path.read_text())
    for key in ("command", "argv", "seed"):
        if key not in payload:
            raise ManifestError(f"{path}: manifest is missing '{key}'")
    return payload
