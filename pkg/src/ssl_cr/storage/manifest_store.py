"""Run manifests linking configs, seeds and artifact hashes."""

import fcntl
import hashlib
import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Optional

from pydantic import BaseModel, Field, ValidationError

from ssl_cr import __version__
from ssl_cr.errors import ConfigurationError, IntegrityError
from ssl_cr.storage.checkpoint_store import file_sha256

logger = logging.getLogger(__name__)


class RunManifest(BaseModel):
    """Everything needed to audit or replay one run."""

    run_id: str
    kind: str = Field(description="gen-data, pretrain, finetune, consist or eval")
    config: dict[str, Any] = Field(description="Flat dotted-key config snapshot")
    seed: int
    code_version: str = Field(default=__version__)
    inputs: dict[str, str] = Field(default_factory=dict, description="Input artifact -> sha256")
    parents: list[str] = Field(default_factory=list, description="Run ids this run consumes")
    output_path: Optional[str] = None
    output_sha256: Optional[str] = None
    rng_streams: dict[str, int] = Field(default_factory=dict)
    metrics: dict[str, Any] = Field(default_factory=dict)


def make_run_id(kind: str, config: dict[str, Any], seed: int, inputs: Optional[dict[str, str]] = None) -> str:
    """Deterministic id from the run kind, config, seed and input hashes."""
    payload = json.dumps(
        {"kind": kind, "config": config, "seed": seed, "inputs": inputs or {}}, sort_keys=True, default=str
    )
    return f"{kind}-{hashlib.sha256(payload.encode()).hexdigest()[:16]}"


class ManifestStore:
    """JSON manifests under `<root>/manifests`, written under an advisory lock."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.directory = self.root / "manifests"
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock_path = self.directory / ".lock"

    @contextmanager
    def _locked(self) -> Iterator[None]:
        with self._lock_path.open("a") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def path_for(self, run_id: str) -> Path:
        return self.directory / f"{run_id}.json"

    def run_dir(self, run_id: str) -> Path:
        path = self.root / "runs" / run_id
        path.mkdir(parents=True, exist_ok=True)
        return path

    def write(self, manifest: RunManifest) -> Path:
        """Store a manifest; cycles in the parent graph are rejected."""
        if manifest.run_id in manifest.parents:
            raise ConfigurationError(f"Run {manifest.run_id} lists itself as a parent")
        for parent in manifest.parents:
            if manifest.run_id in self.ancestors(parent):
                raise ConfigurationError(f"Run {manifest.run_id} would close a cycle through {parent}")
        path = self.path_for(manifest.run_id)
        with self._locked():
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True))
            tmp.replace(path)
        logger.debug("[manifest] wrote %s", path.name)
        return path

    def read(self, run_id: str) -> Optional[RunManifest]:
        path = self.path_for(run_id)
        if not path.exists():
            return None
        try:
            return RunManifest.model_validate_json(path.read_text())
        except ValidationError as e:
            raise IntegrityError(f"Manifest {path} is malformed: {e}") from e

    def ancestors(self, run_id: str) -> set[str]:
        seen: set[str] = set()
        stack = [run_id]
        while stack:
            manifest = self.read(stack.pop())
            if manifest is None:
                continue
            for parent in manifest.parents:
                if parent not in seen:
                    seen.add(parent)
                    stack.append(parent)
        return seen

    def verify(self, manifest: RunManifest) -> bool:
        """True when the recorded output exists and its hash matches."""
        if manifest.output_path is None or manifest.output_sha256 is None:
            return manifest.output_path is None
        path = Path(manifest.output_path)
        return path.exists() and file_sha256(path) == manifest.output_sha256

    def completed(self, run_id: str) -> Optional[RunManifest]:
        """Cached manifest whose output verifies; a corrupted output is logged and treated as missing."""
        manifest = self.read(run_id)
        if manifest is None:
            return None
        if not self.verify(manifest):
            logger.warning("[manifest] %s output failed its hash check; the run will be repeated", run_id)
            return None
        return manifest

    def all(self) -> list[RunManifest]:
        return [m for m in (self.read(p.stem) for p in sorted(self.directory.glob("*.json"))) if m is not None]
