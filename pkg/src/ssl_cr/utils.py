"""Shared helpers for the training loops: tensors, optimizers, selection and metric logs."""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Literal, Optional, Sequence

import numpy as np
import torch
from torch import nn

from ssl_cr.configuration import OptimizerFamily, SelectionRule
from ssl_cr.errors import ConfigurationError, NumericError

logger = logging.getLogger(__name__)


def to_float_image(img: np.ndarray) -> np.ndarray:
    """Convert an HxWx3 uint8 or float image to float32 in [0, 1]."""
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    return np.clip(img.astype(np.float32), 0.0, 1.0)


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack HxWx3 images into an NCHW float32 tensor."""
    batch = np.stack([to_float_image(img) for img in images])
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2)))


def parameter_checksum(params: nn.Module | Iterable[torch.Tensor]) -> str:
    """Return a sha256 digest over parameter values in iteration order."""
    tensors = params.parameters() if isinstance(params, nn.Module) else params
    digest = hashlib.sha256()
    for tensor in tensors:
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def named_checksum(model: nn.Module, prefix: str) -> str:
    """Checksum of the parameters whose names start with `prefix`."""
    return parameter_checksum(p for n, p in model.named_parameters() if n.startswith(prefix))


def build_optimizer(
    params: Iterable[torch.Tensor],
    family: OptimizerFamily,
    lr: float,
    weight_decay: float,
    momentum: float = 0.9,
    betas: tuple[float, float] = (0.9, 0.999),
) -> torch.optim.Optimizer:
    """Create the optimizer named by a hyperparameter profile."""
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ConfigurationError("No trainable parameters to optimize")
    if family is OptimizerFamily.ADAM:
        return torch.optim.Adam(params, lr=lr, betas=betas, weight_decay=weight_decay)
    if family is OptimizerFamily.SGD_NESTEROV:
        return torch.optim.SGD(params, lr=lr, momentum=momentum, nesterov=True, weight_decay=weight_decay)
    raise ConfigurationError(f"Unsupported optimizer family: {family}")


def select_best(history: Sequence[dict[str, Any]], rule: SelectionRule) -> int:
    """Return the index of the best epoch record; ties resolve to the earliest.

    Non-finite values never win; a history with none finite is a NumericError.
    """
    if not history:
        raise ConfigurationError("Cannot select from an empty training history")
    key = "val_loss" if rule is SelectionRule.MIN_VAL_LOSS else "val_accuracy"
    values = np.asarray([record[key] for record in history], dtype=float)
    finite = np.isfinite(values)
    if not finite.any():
        raise NumericError(f"Every epoch has a non-finite {key}; no epoch can be selected")
    if rule is SelectionRule.MIN_VAL_LOSS:
        return int(np.argmin(np.where(finite, values, np.inf)))
    return int(np.argmax(np.where(finite, values, -np.inf)))


def is_improvement(value: float, best: Optional[float], mode: Literal["min", "max"]) -> bool:
    """Strict improvement test used while training; non-finite values never improve."""
    if not math.isfinite(value):
        return False
    if best is None:
        return True
    return value < best if mode == "min" else value > best


@dataclass
class MetricsLog:
    """Line-delimited metric records: run id, epoch, split, metric, value."""

    run_id: str
    records: list[dict[str, Any]] = field(default_factory=list)
    path: Optional[Path] = None

    def log(self, epoch: int, split: str, metric: str, value: float) -> None:
        """Append one record and mirror it to the log file when attached."""
        record = {"run_id": self.run_id, "epoch": int(epoch), "split": split, "metric": metric, "value": float(value)}
        self.records.append(record)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def log_many(self, epoch: int, split: str, values: dict[str, float]) -> None:
        """Append one record per metric."""
        for metric, value in values.items():
            self.log(epoch, split, metric, value)

    @staticmethod
    def read(path: Path) -> list[dict[str, Any]]:
        """Load every record of a metrics log file."""
        with Path(path).open() as fh:
            return [json.loads(line) for line in fh if line.strip()]
