"""Versioned checkpoint container shared by every training module."""

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import torch

from ssl_cr.errors import ConfigurationError, IntegrityError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Module state dicts plus the metadata needed to rebuild and audit a model.

    `modules` holds state dicts keyed by role: `encoder`, `rsp_head`, `adapter`,
    `head`, `projection` or `decoder` depending on `method`.
    """

    method: str
    arch: str
    feature_dim: int
    modules: dict[str, dict[str, torch.Tensor]]
    task: Optional[dict[str, Any]] = None
    freeze_spec: Optional[dict[str, bool]] = None
    rng_streams: dict[str, int] = field(default_factory=dict)
    manifest_id: Optional[str] = None
    history: list[dict[str, Any]] = field(default_factory=list)
    best_epoch: Optional[int] = None
    lineage: list[str] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    @property
    def has_task_head(self) -> bool:
        return self.task is not None and "head" in self.modules


def file_sha256(path: Path) -> str:
    """Hex sha256 of a file's bytes."""
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> str:
    """Write the container and return its sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(asdict(checkpoint), path)
    sha = file_sha256(path)
    logger.info("[checkpoint] saved %s (%s) sha256=%s", path, checkpoint.method, sha[:12])
    return sha


def load_checkpoint(path: Path, expected_sha256: Optional[str] = None) -> Checkpoint:
    """Load a container, verifying its hash when one is given."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Checkpoint not found: {path}")
    if expected_sha256 is not None:
        actual = file_sha256(path)
        if actual != expected_sha256:
            raise IntegrityError(f"Checkpoint {path} hash {actual[:12]} != recorded {expected_sha256[:12]}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise IntegrityError(f"Checkpoint {path} is unreadable: {e}") from e
    version = payload.get("version", 0)
    if version > CHECKPOINT_VERSION:
        raise ConfigurationError(f"Checkpoint version {version} is newer than supported {CHECKPOINT_VERSION}")
    known = set(Checkpoint.__dataclass_fields__)
    return Checkpoint(**{k: v for k, v in payload.items() if k in known})
