"""Teacher-student consistency training on labeled and unlabeled region patches."""

import copy
import logging
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from torch.optim.lr_scheduler import MultiStepLR
from torch.utils.data import DataLoader
from tqdm import tqdm

from ssl_cr.augment import AugPolicy, apply_policy, finetune_policy, strong_policy, weak_policy
from ssl_cr.configuration import ExperimentConfig, PseudoLabelMode, SelectionRule, TaskMode
from ssl_cr.errors import ArgumentError, ConfigurationError, NumericError
from ssl_cr.finetune import PatchDataset, checkpoint_from_task_model, evaluate_task, load_task_model, supervised_loss
from ssl_cr.nets import FreezeSpec, TaskModel, apply_freeze, clone_and_freeze, set_train_mode, task_forward
from ssl_cr.pyramid_data import DatasetSplit, Example
from ssl_cr.seeding import RngStreams
from ssl_cr.storage.checkpoint_store import Checkpoint
from ssl_cr.utils import MetricsLog, build_optimizer, is_improvement, named_checksum, parameter_checksum, select_best

logger = logging.getLogger(__name__)

PROB_TOLERANCE = 1e-4
LOG_FLOOR = 1e-12


@dataclass
class TeacherStudent:
    """Frozen teacher and a student whose backbone is frozen but whose head trains."""

    teacher: TaskModel
    student: TaskModel
    teacher_spec: FreezeSpec
    student_spec: FreezeSpec

    def swap(self) -> None:
        """Make the student the new teacher (full copy, re-frozen)."""
        self.teacher.load_state_dict(self.student.state_dict())
        apply_freeze(self.teacher, self.teacher_spec)
        self.teacher.eval()


def init_teacher_student(ckpt: Checkpoint) -> TeacherStudent:
    """Initialize both networks from a fine-tuned checkpoint."""
    if not ckpt.has_task_head:
        raise ConfigurationError(f"Consistency training needs a fine-tuned checkpoint with a task head, got '{ckpt.method}'")
    base = load_task_model(ckpt)
    teacher_spec = FreezeSpec.frozen(base)
    student_spec = FreezeSpec.student_consistency(base)
    teacher = clone_and_freeze(base, teacher_spec).eval()
    student = clone_and_freeze(base, student_spec)
    return TeacherStudent(teacher, student, teacher_spec, student_spec)


###################
# Batching
###################
def build_batch(
    labeled: Sequence[Example],
    unlabeled: Sequence[Example],
    batch_size: int,
    mu: int,
    rng: np.random.Generator,
) -> tuple[list[Example], list[Example]]:
    """Draw B labeled and mu*B unlabeled examples."""
    if batch_size <= 0 or mu < 1:
        raise ConfigurationError("Consistency batches need B >= 1 and mu >= 1")
    if not labeled or not unlabeled:
        raise ConfigurationError("Consistency batches need labeled and unlabeled examples")
    n_u = mu * batch_size
    li = rng.choice(len(labeled), size=batch_size, replace=batch_size > len(labeled))
    ui = rng.choice(len(unlabeled), size=n_u, replace=n_u > len(unlabeled))
    return [labeled[i] for i in li], [unlabeled[i] for i in ui]


class _CyclingQueue:
    """Index stream over a permutation that reshuffles when exhausted."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.order = rng.permutation(size)
        self.cursor = 0

    def take(self, n: int) -> np.ndarray:
        out = []
        while len(out) < n:
            if self.cursor == self.size:
                self.order, self.cursor = self.rng.permutation(self.size), 0
            step = min(n - len(out), self.size - self.cursor)
            out.extend(self.order[self.cursor:self.cursor + step].tolist())
            self.cursor += step
        return np.asarray(out, dtype=np.int64)


class ConsistencyBatcher:
    """Epochs of (labeled, unlabeled) index batches.

    An epoch has ceil(|D_fu| / (mu * B)) steps, so the unlabeled pool is covered
    once per epoch; the labeled set cycles with reshuffling. Labeled and
    unlabeled orders come from separate streams.
    """

    def __init__(
        self, n_labeled: int, n_unlabeled: int, batch_size: int, mu: int, streams: RngStreams, use_unlabeled: bool = True
    ):
        if batch_size <= 0:
            raise ConfigurationError("Labeled batch size must be positive")
        if n_labeled == 0 or n_unlabeled == 0:
            raise ConfigurationError("Consistency training needs labeled and unlabeled examples")
        self.batch_size = batch_size
        self.mu = mu
        self.n_unlabeled = n_unlabeled
        self.use_unlabeled = use_unlabeled
        self.labeled = _CyclingQueue(n_labeled, streams.numpy("shuffle"))
        self.unlabeled = _CyclingQueue(n_unlabeled, streams.numpy("shuffle_unlabeled"))

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.n_unlabeled / (self.mu * self.batch_size))

    def epoch(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for _ in range(self.steps_per_epoch):
            li = self.labeled.take(self.batch_size)
            ui = self.unlabeled.take(self.mu * self.batch_size) if self.use_unlabeled else np.zeros(0, dtype=np.int64)
            yield li, ui


###################
# Losses
###################
def _check_probabilities(p: torch.Tensor, name: str) -> None:
    if p.dim() != 2:
        raise ArgumentError(f"{name} must be (N, C) probabilities")
    if not torch.isfinite(p).all() or (p < -PROB_TOLERANCE).any():
        raise NumericError(f"{name} holds invalid probabilities")
    if (p.sum(dim=1) - 1).abs().max() > PROB_TOLERANCE:
        raise NumericError(f"{name} rows do not sum to 1")


def pseudo_label_mask(q: torch.Tensor, tau_c: float) -> torch.Tensor:
    """1 where the teacher's top probability reaches tau_c."""
    return (q.max(dim=1).values >= tau_c).to(q.dtype)


def consistency_loss_cls(
    q: torch.Tensor,
    q_hat: torch.Tensor,
    tau_c: float = 0.0,
    mode: PseudoLabelMode = PseudoLabelMode.HARD,
    smoothing: float = 0.1,
) -> torch.Tensor:
    """Masked cross-entropy of student probabilities against teacher pseudo labels.

    Hard mode uses the one-hot argmax of `q` (ties go to the lowest index); soft
    mode smooths it with `smoothing`. The mean runs over the whole unlabeled batch.
    """
    _check_probabilities(q, "teacher probabilities")
    _check_probabilities(q_hat, "student probabilities")
    if q.shape != q_hat.shape:
        raise ArgumentError(f"Teacher {tuple(q.shape)} and student {tuple(q_hat.shape)} shapes differ")
    q = q.detach()
    target = torch.zeros_like(q).scatter_(1, q.argmax(dim=1, keepdim=True), 1.0)
    if mode is PseudoLabelMode.SOFT:
        target = (1.0 - smoothing) * target + smoothing / q.shape[1]
    ce = -(target * torch.log(q_hat.clamp_min(LOG_FLOOR))).sum(dim=1)
    return (pseudo_label_mask(q, tau_c) * ce).mean()


def consistency_loss_reg(teacher_pred: torch.Tensor, student_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between teacher and student predictions."""
    if teacher_pred.shape != student_pred.shape:
        raise ArgumentError("Teacher and student predictions differ in shape")
    return ((student_pred - teacher_pred.detach()) ** 2).mean()


def total_loss(l_s: torch.Tensor, l_c: torch.Tensor, lam: float) -> torch.Tensor:
    """L_s + lam * L_c; exactly L_s when lam is zero."""
    if lam < 0:
        raise ArgumentError(f"Consistency weight must be non-negative, got {lam}")
    if lam == 0:
        return l_s
    return l_s + lam * l_c


###################
# Training
###################
def _augmented(
    examples: Sequence[Example], policy: AugPolicy, streams: RngStreams, stream: str, epoch: int, step: int
) -> torch.Tensor:
    images = [apply_policy(ex.image, policy, streams.child(stream, epoch, step, slot)) for slot, ex in enumerate(examples)]
    return torch.from_numpy(np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2), dtype=np.float32))


def _targets(examples: Sequence[Example], mode: TaskMode) -> torch.Tensor:
    if mode is TaskMode.CLASSIFICATION:
        return torch.tensor([int(ex.target) for ex in examples], dtype=torch.long)
    return torch.tensor([float(ex.target) for ex in examples], dtype=torch.float32)


def consistency_train(
    ckpt: Checkpoint,
    split: DatasetSplit,
    config: ExperimentConfig,
    streams: RngStreams,
    metrics: Optional[MetricsLog] = None,
) -> Checkpoint:
    """Train the student against a per-epoch frozen teacher, swapping at epoch end.

    Labeled inputs go through the fine-tune augmentation, teacher inputs through
    the weak policy and student unlabeled inputs through the strong policy.
    With `use_unlabeled` off only the supervised term is trained, on the same
    labeled batches.
    """
    cfg, mode = config.consistency, config.data.task
    if abs(split.alpha - config.finetune.alpha) > 1e-9:
        raise ConfigurationError(f"Split alpha {split.alpha} does not match finetune.alpha {config.finetune.alpha}")
    if cfg.selection is SelectionRule.MAX_VAL_ACCURACY and mode is TaskMode.REGRESSION:
        raise ConfigurationError("Accuracy-based selection needs a classification task")
    labeled, unlabeled = split.finetune_labeled, split.finetune_unlabeled
    if not split.validation:
        raise ConfigurationError("Consistency training needs validation examples")

    pair = init_teacher_student(ckpt)
    student, teacher = pair.student, pair.teacher
    optimizer = build_optimizer(student.parameters(), cfg.optimizer, cfg.lr, cfg.weight_decay, cfg.momentum, cfg.betas)
    scheduler = MultiStepLR(optimizer, milestones=cfg.milestones, gamma=cfg.gamma)
    batcher = ConsistencyBatcher(len(labeled), len(unlabeled), cfg.batch_size, cfg.mu, streams, cfg.use_unlabeled)
    eta, eta_w, eta_s = finetune_policy(config.augment), weak_policy(config.augment), strong_policy(config.augment)
    val_loader = DataLoader(PatchDataset(split.validation, mode), batch_size=max(cfg.batch_size, 32))

    history: list[dict] = []
    best_state, best_value = None, None
    rule_mode = "min" if cfg.selection is SelectionRule.MIN_VAL_LOSS else "max"
    for epoch in tqdm(range(cfg.epochs), desc="[consist]", disable=not config.progress):
        teacher_start = parameter_checksum(teacher)
        lr = optimizer.param_groups[0]["lr"]
        set_train_mode(student)
        sums = {"loss_s": 0.0, "loss_c": 0.0, "mask": 0.0}
        steps = 0
        for step, (li, ui) in enumerate(batcher.epoch()):
            batch_l = [labeled[i] for i in li]
            l_s = supervised_loss(student(_augmented(batch_l, eta, streams, "aug_finetune", epoch, step)),
                                  _targets(batch_l, mode), mode)
            l_c, mask = torch.zeros(()), float("nan")
            if cfg.use_unlabeled:
                batch_u = [unlabeled[i] for i in ui]
                with torch.no_grad():
                    q = task_forward(teacher, _augmented(batch_u, eta_w, streams, "aug_weak", epoch, step))
                out_s = student(_augmented(batch_u, eta_s, streams, "aug_strong", epoch, step))
                if mode is TaskMode.CLASSIFICATION:
                    l_c = consistency_loss_cls(q, torch.softmax(out_s, dim=1), cfg.tau_c, cfg.pseudo_label,
                                               cfg.label_smoothing)
                    mask = float(pseudo_label_mask(q, cfg.tau_c).mean())
                else:
                    l_c = consistency_loss_reg(q, out_s)
                    mask = 1.0
            loss = total_loss(l_s, l_c, cfg.lam)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sums["loss_s"] += l_s.item()
            sums["loss_c"] += float(l_c.item())
            sums["mask"] += mask
            steps += 1
        scheduler.step()

        val_loss, val_acc = evaluate_task(student, val_loader, mode)
        teacher_end = parameter_checksum(teacher)
        record = {
            "epoch": epoch,
            "lr": lr,
            "loss_s": sums["loss_s"] / steps,
            "loss_c": sums["loss_c"] / steps,
            "mask_fraction": sums["mask"] / steps,
            "val_loss": val_loss,
            "val_accuracy": val_acc,
            "teacher_start": teacher_start,
            "teacher_end": teacher_end,
            "student_end": parameter_checksum(student),
            "student_backbone": named_checksum(student, "encoder."),
        }
        history.append(record)
        if metrics is not None:
            metrics.log_many(epoch, "train", {"loss_s": record["loss_s"], "loss_c": record["loss_c"], "lr": lr})
            if cfg.use_unlabeled:
                metrics.log(epoch, "train", "mask_fraction", record["mask_fraction"])
            metrics.log(epoch, "val", "loss", val_loss)
            if mode is TaskMode.CLASSIFICATION:
                metrics.log(epoch, "val", "accuracy", val_acc)
        value = val_loss if rule_mode == "min" else val_acc
        if is_improvement(value, best_value, rule_mode):
            best_value, best_state = value, copy.deepcopy(student.state_dict())
        logger.info(
            "[consist] epoch=%d loss_s=%.4f loss_c=%.4f mask=%.3f val_loss=%.4f",
            epoch, record["loss_s"], record["loss_c"], record["mask_fraction"], val_loss,
        )
        pair.swap()

    best_epoch = select_best(history, cfg.selection)
    student.load_state_dict(best_state)
    logger.info("[consist] selected epoch %d by %s", best_epoch, cfg.selection.value)
    return checkpoint_from_task_model(
        student, "consistency", ckpt.arch, pair.student_spec, history, best_epoch, streams,
        lineage=[*ckpt.lineage, ckpt.method],
    )
