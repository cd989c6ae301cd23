"""Run manifests: what a command was asked to do and what it produced."""

import json
import logging
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .errors import ArgumentError, CheckpointError

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    version: str = __version__
    python: str = field(default_factory=platform.python_version)
    wall_time: float = 0.0

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(**data)
        except TypeError as exc:
            raise ArgumentError(f"malformed manifest: {exc}") from None


def manifest_path(output):
    """``out.mobe`` -> ``out.mobe.manifest.json``."""
    output = Path(output)
    return output.with_name(output.name + MANIFEST_SUFFIX)


def write_manifest(manifest, output):
    path = manifest_path(output)
    path.write_text(manifest.to_json() + "\n", encoding="utf-8")
    logger.debug("wrote manifest %s", path)
    return path


def read_manifest(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"{path}: not a JSON manifest ({exc.msg})") from None
    manifest = RunManifest.from_dict(data)
    if manifest.version != __version__:
        logger.warning("manifest %s was written by version %s (running %s)", path, manifest.version, __version__)
    return manifest
