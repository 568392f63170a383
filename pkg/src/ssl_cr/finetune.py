"""Supervised fine-tuning of pretrained checkpoints under a label fraction."""

import copy
import logging
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim.lr_scheduler import MultiStepLR
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from ssl_cr.augment import AugPolicy, apply_policy, finetune_policy
from ssl_cr.configuration import DataConfig, ExperimentConfig, PretrainMethod, SelectionRule, TaskMode
from ssl_cr.errors import ArgumentError, ConfigurationError
from ssl_cr.nets import (
    Encoder,
    FreezeSpec,
    RspAdapter,
    RspHead,
    TaskHead,
    TaskModel,
    apply_freeze,
    build_task_model,
    task_forward,
)
from ssl_cr.pyramid_data import DatasetSplit, Example
from ssl_cr.seeding import RngStreams
from ssl_cr.storage.checkpoint_store import Checkpoint
from ssl_cr.utils import MetricsLog, build_optimizer, is_improvement, select_best, to_float_image

logger = logging.getLogger(__name__)


def n_outputs(data: DataConfig) -> int:
    """Head width for the configured task."""
    return 1 if data.task is TaskMode.REGRESSION else data.n_classes


class PatchDataset(Dataset):
    """Region patches with targets, optionally augmented per epoch."""

    def __init__(
        self,
        examples: Sequence[Example],
        mode: TaskMode,
        streams: Optional[RngStreams] = None,
        policy: Optional[AugPolicy] = None,
        stream: str = "aug_finetune",
    ):
        self.examples = list(examples)
        self.mode = mode
        self.streams = streams
        self.policy = policy
        self.stream = stream
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        example = self.examples[index]
        if self.policy is not None and self.streams is not None:
            img = apply_policy(example.image, self.policy, self.streams.child(self.stream, self.epoch, index))
        else:
            img = to_float_image(example.image)
        x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))
        if self.mode is TaskMode.CLASSIFICATION:
            return x, torch.tensor(int(example.target), dtype=torch.long)
        return x, torch.tensor(float(example.target), dtype=torch.float32)


def supervised_loss(pred: torch.Tensor, y: torch.Tensor, mode: TaskMode) -> torch.Tensor:
    """Cross-entropy on logits for classification; mean squared error for regression."""
    if mode is TaskMode.CLASSIFICATION:
        if pred.dim() != 2:
            raise ArgumentError("Classification expects (N, C) logits")
        y = y.long()
        if ((y < 0) | (y >= pred.shape[1])).any():
            raise ArgumentError(f"Class labels must lie in 0..{pred.shape[1] - 1}")
        return F.cross_entropy(pred, y)
    if pred.shape != y.shape:
        raise ArgumentError(f"Regression prediction {tuple(pred.shape)} and target {tuple(y.shape)} differ")
    return F.mse_loss(pred, y.to(pred.dtype))


###################
# Checkpoint <-> model
###################
def random_checkpoint(arch: str, seed: int) -> Checkpoint:
    """Randomly initialized encoder, the baseline without pretraining."""
    torch.manual_seed(seed)
    encoder = Encoder(arch)
    return Checkpoint(
        method=PretrainMethod.RANDOM.value, arch=arch, feature_dim=encoder.out_dim, modules={"encoder": encoder.state_dict()}
    )


def task_model_from_pretrained(ckpt: Checkpoint, mode: TaskMode, outputs: int, hidden: tuple[int, int]) -> TaskModel:
    """Build a fresh task head on top of a pretraining checkpoint."""
    encoder = Encoder(ckpt.arch)
    encoder.load_state_dict(ckpt.modules["encoder"])
    rsp_head = None
    if ckpt.method == PretrainMethod.RSP.value:
        rsp_head = RspHead()
        rsp_head.load_state_dict(ckpt.modules["rsp_head"])
    model = build_task_model(encoder, mode, outputs, rsp_head, hidden)
    if model.feature_dim != ckpt.feature_dim:
        raise ConfigurationError(f"Checkpoint feature dim {ckpt.feature_dim} != pathway {model.feature_dim}")
    return model


def load_task_model(ckpt: Checkpoint) -> TaskModel:
    """Rebuild a fine-tuned model, head included."""
    if not ckpt.has_task_head:
        raise ConfigurationError(f"Checkpoint '{ckpt.method}' has no task head")
    encoder = Encoder(ckpt.arch)
    encoder.load_state_dict(ckpt.modules["encoder"])
    adapter = None
    if "adapter" in ckpt.modules:
        adapter = RspAdapter()
        adapter.load_state_dict(ckpt.modules["adapter"])
    task = ckpt.task
    head = TaskHead(TaskMode(task["mode"]), int(task["in_dim"]), int(task["n_outputs"]), tuple(task["hidden"]))
    head.load_state_dict(ckpt.modules["head"])
    return TaskModel(encoder, head, adapter)


def checkpoint_from_task_model(
    model: TaskModel,
    method: str,
    arch: str,
    spec: FreezeSpec,
    history: list[dict],
    best_epoch: int,
    streams: RngStreams,
    lineage: list[str],
) -> Checkpoint:
    """Package a task model with its head metadata and freeze spec."""
    modules = {"encoder": model.encoder.state_dict(), "head": model.head.state_dict()}
    if model.adapter is not None:
        modules["adapter"] = model.adapter.state_dict()
    hidden = (model.head.mlp[0].out_features, model.head.mlp[2].out_features)
    return Checkpoint(
        method=method,
        arch=arch,
        feature_dim=model.feature_dim,
        modules=copy.deepcopy(modules),
        task={"mode": model.head.mode.value, "in_dim": model.head.in_dim, "n_outputs": model.head.n_outputs, "hidden": list(hidden)},
        freeze_spec=dict(spec.trainable),
        rng_streams=streams.describe(),
        history=history,
        best_epoch=best_epoch,
        lineage=lineage,
    )


###################
# Evaluation helpers
###################
@torch.no_grad()
def evaluate_task(model: TaskModel, loader: DataLoader, mode: TaskMode) -> tuple[float, float]:
    """Mean loss and accuracy (NaN for regression) over a loader."""
    model.eval()
    total, correct, count = 0.0, 0, 0
    for x, y in loader:
        out = model(x)
        total += supervised_loss(out, y, mode).item() * len(y)
        if mode is TaskMode.CLASSIFICATION:
            correct += int((out.argmax(dim=1) == y).sum())
        count += len(y)
    accuracy = correct / count if mode is TaskMode.CLASSIFICATION else float("nan")
    return total / count, accuracy


@torch.no_grad()
def predict_examples(model: TaskModel, examples: Sequence[Example], batch_size: int = 64) -> np.ndarray:
    """Class probabilities (N, C) or regression predictions (N,) without augmentation."""
    model.eval()
    examples = list(examples)
    outputs = []
    for start in range(0, len(examples), batch_size):
        images = [to_float_image(e.image) for e in examples[start:start + batch_size]]
        x = torch.from_numpy(np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2), dtype=np.float32))
        outputs.append(task_forward(model, x).numpy())
    return np.concatenate(outputs) if outputs else np.zeros(0)


def run_epoch(
    model: TaskModel,
    loader: DataLoader,
    optimizer: torch.optim.Optimizer,
    mode: TaskMode,
) -> tuple[float, float]:
    """One supervised pass; returns mean loss and running accuracy."""
    model.train()
    total, correct, count = 0.0, 0, 0
    for x, y in loader:
        optimizer.zero_grad()
        out = model(x)
        loss = supervised_loss(out, y, mode)
        loss.backward()
        optimizer.step()
        total += loss.item() * len(y)
        if mode is TaskMode.CLASSIFICATION:
            correct += int((out.argmax(dim=1) == y).sum())
        count += len(y)
    return total / count, (correct / count if mode is TaskMode.CLASSIFICATION else float("nan"))


def finetune(
    ckpt: Checkpoint,
    split: DatasetSplit,
    config: ExperimentConfig,
    streams: RngStreams,
    metrics: Optional[MetricsLog] = None,
) -> Checkpoint:
    """Fine-tune every layer on the labeled share of a split.

    Args:
        ckpt: Pretraining checkpoint (rsp, moco, vae or random).
        split: Label-fraction split; its alpha must equal `finetune.alpha`.
        config: Experiment config; `finetune`, `augment` and `data` sections are used.
        streams: Named random streams of the run.
        metrics: Optional metrics log.

    Returns:
        The checkpoint of the epoch chosen by the selection rule.
    """
    cfg, mode = config.finetune, config.data.task
    if abs(split.alpha - cfg.alpha) > 1e-9:
        raise ConfigurationError(f"Split alpha {split.alpha} does not match finetune.alpha {cfg.alpha}")
    labeled = split.finetune_labeled
    if not labeled or not split.validation:
        raise ConfigurationError("Fine-tuning needs labeled and validation examples")
    if cfg.selection is SelectionRule.MAX_VAL_ACCURACY and mode is TaskMode.REGRESSION:
        raise ConfigurationError("Accuracy-based selection needs a classification task")

    torch.manual_seed(streams.seed_for("init"))
    model = task_model_from_pretrained(ckpt, mode, n_outputs(config.data), cfg.head_hidden)
    spec = FreezeSpec.all_trainable(model)
    apply_freeze(model, spec)
    optimizer = build_optimizer(model.parameters(), cfg.optimizer, cfg.lr, cfg.weight_decay, cfg.momentum, cfg.betas)
    scheduler = MultiStepLR(optimizer, milestones=cfg.milestones, gamma=cfg.gamma)

    train_set = PatchDataset(labeled, mode, streams, finetune_policy(config.augment))
    train_loader = DataLoader(
        train_set, batch_size=cfg.batch_size, shuffle=True, generator=streams.torch("shuffle"), num_workers=cfg.num_workers
    )
    val_loader = DataLoader(PatchDataset(split.validation, mode), batch_size=max(cfg.batch_size, 32))

    history: list[dict] = []
    best_state, best_value = None, None
    rule_mode = "min" if cfg.selection is SelectionRule.MIN_VAL_LOSS else "max"
    for epoch in tqdm(range(cfg.epochs), desc=f"[finetune] {ckpt.method}", disable=not config.progress):
        train_set.set_epoch(epoch)
        lr = optimizer.param_groups[0]["lr"]
        train_loss, train_acc = run_epoch(model, train_loader, optimizer, mode)
        scheduler.step()
        val_loss, val_acc = evaluate_task(model, val_loader, mode)
        record = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "train_accuracy": train_acc,
                  "val_loss": val_loss, "val_accuracy": val_acc}
        history.append(record)
        if metrics is not None:
            metrics.log_many(epoch, "train", {"loss": train_loss, "lr": lr})
            metrics.log(epoch, "val", "loss", val_loss)
            if mode is TaskMode.CLASSIFICATION:
                metrics.log(epoch, "train", "accuracy", train_acc)
                metrics.log(epoch, "val", "accuracy", val_acc)
        value = val_loss if rule_mode == "min" else val_acc
        if is_improvement(value, best_value, rule_mode):
            best_value, best_state = value, copy.deepcopy(model.state_dict())
        logger.info("[finetune] epoch=%d lr=%.2e train_loss=%.4f val_loss=%.4f", epoch, lr, train_loss, val_loss)

    best_epoch = select_best(history, cfg.selection)
    model.load_state_dict(best_state)
    logger.info("[finetune] selected epoch %d by %s", best_epoch, cfg.selection.value)
    return checkpoint_from_task_model(
        model, "finetune", ckpt.arch, spec, history, best_epoch, streams, lineage=[*ckpt.lineage, ckpt.method]
    )
