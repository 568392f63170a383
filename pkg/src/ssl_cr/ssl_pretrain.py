"""Resolution sequence prediction pretraining with SGD-Nesterov wrapped in Lookahead."""

import copy
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from ssl_cr.augment import AugPolicy, apply_plan, pretrain_policy
from ssl_cr.configuration import ExperimentConfig, PretrainConfig, PretrainMethod, SelectionRule
from ssl_cr.errors import ArgumentError, ConfigurationError, NumericError
from ssl_cr.nets import SEQUENCE_DIM, RspNetwork
from ssl_cr.pyramid_data import PERMUTATIONS, PatchTuple, permute_tuple
from ssl_cr.seeding import RngStreams
from ssl_cr.storage.checkpoint_store import Checkpoint
from ssl_cr.utils import MetricsLog, is_improvement, select_best, to_float_image

logger = logging.getLogger(__name__)


def rsp_loss(logits: torch.Tensor, y: torch.Tensor | int) -> torch.Tensor:
    """Cross-entropy of permutation logits against labels in 0..5."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if not torch.isfinite(logits).all():
        raise NumericError("Non-finite permutation logits")
    if logits.shape[-1] != len(PERMUTATIONS) or ((y < 0) | (y >= len(PERMUTATIONS))).any():
        raise ArgumentError("Permutation labels must lie in 0..5 with 6 logits")
    return F.cross_entropy(logits, y)


###################
# Lookahead
###################
@dataclass
class LookaheadState:
    """Slow weights and the inner step counter."""

    slow: list[torch.Tensor]
    step: int = 0


def lookahead_init(params: Iterable[torch.Tensor]) -> LookaheadState:
    """Start slow weights at the current fast weights."""
    return LookaheadState(slow=[p.detach().clone() for p in params])


def lookahead_step(
    params: Sequence[torch.Tensor],
    state: LookaheadState,
    inner_step: Callable[[], object],
    k: int,
    alpha: float,
) -> LookaheadState:
    """Take one inner step; every k-th step pull slow weights toward fast ones and reset fast to slow."""
    inner_step()
    state.step += 1
    if state.step % k == 0:
        with torch.no_grad():
            for param, slow in zip(params, state.slow):
                if alpha == 1.0:
                    slow.copy_(param)
                else:
                    slow.add_(param - slow, alpha=alpha)
                param.copy_(slow)
    return state


class Lookahead:
    """Optimizer wrapper around an inner optimizer."""

    def __init__(self, optimizer: torch.optim.Optimizer, k: int = 5, alpha: float = 0.5):
        if k < 1 or not 0 < alpha <= 1:
            raise ConfigurationError("Lookahead needs k >= 1 and alpha in (0, 1]")
        self.optimizer = optimizer
        self.k = k
        self.alpha = alpha
        self.params = [p for group in optimizer.param_groups for p in group["params"]]
        self.state = lookahead_init(self.params)

    @property
    def param_groups(self):
        return self.optimizer.param_groups

    def zero_grad(self, set_to_none: bool = True) -> None:
        self.optimizer.zero_grad(set_to_none=set_to_none)

    def step(self) -> None:
        lookahead_step(self.params, self.state, self.optimizer.step, self.k, self.alpha)

    def state_dict(self) -> dict:
        return {"optimizer": self.optimizer.state_dict(), "slow": self.state.slow, "step": self.state.step}


def build_lookahead(params: Iterable[torch.Tensor], cfg: PretrainConfig) -> Lookahead:
    """SGD with Nesterov momentum wrapped in Lookahead, per the pretraining config."""
    inner = torch.optim.SGD(
        list(params), lr=cfg.lr, momentum=cfg.momentum, nesterov=True, weight_decay=cfg.weight_decay
    )
    return Lookahead(inner, k=cfg.lookahead_k, alpha=cfg.lookahead_alpha)


###################
# Data
###################
class RspTupleDataset(Dataset):
    """Permuted sequences with one uniformly drawn label per tuple per epoch.

    One augmentation plan is sampled per tuple and applied to all three patches.
    """

    def __init__(
        self,
        tuples: Sequence[PatchTuple],
        streams: RngStreams,
        policy: Optional[AugPolicy] = None,
        label_stream: str = "labels",
    ):
        self.tuples = list(tuples)
        self.streams = streams
        self.policy = policy
        self.label_stream = label_stream
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.tuples)

    def label(self, index: int) -> int:
        return int(self.streams.child(self.label_stream, self.epoch, index).integers(len(PERMUTATIONS)))

    def __getitem__(self, index: int) -> tuple[torch.Tensor, int]:
        label = self.label(index)
        sequence = permute_tuple(self.tuples[index], label)
        if self.policy is not None:
            rng = self.streams.child("aug_pretrain", self.epoch, index)
            plan = self.policy.sample(rng)
            patches = [apply_plan(p, plan, rng) for p in sequence.patches]
        else:
            patches = [to_float_image(p) for p in sequence.patches]
        stacked = np.stack(patches).transpose(0, 3, 1, 2)
        return torch.from_numpy(np.ascontiguousarray(stacked, dtype=np.float32)), label


@torch.no_grad()
def evaluate_rsp(model: RspNetwork, loader: DataLoader) -> tuple[float, float]:
    """Mean loss and accuracy of the pretext task."""
    model.eval()
    total, correct, count = 0.0, 0, 0
    for x, y in loader:
        logits = model(x)
        total += rsp_loss(logits, y).item() * len(y)
        correct += int((logits.argmax(dim=1) == y).sum())
        count += len(y)
    return total / count, correct / count


def pretrain(
    config: ExperimentConfig,
    train_tuples: Sequence[PatchTuple],
    val_tuples: Sequence[PatchTuple],
    streams: RngStreams,
    metrics: Optional[MetricsLog] = None,
) -> Checkpoint:
    """Train the RSP network and keep the epoch with the lowest validation loss.

    Args:
        config: Experiment config; `pretrain` and `augment` sections are used.
        train_tuples: Pretraining tuples.
        val_tuples: Held-out tuples from the same pyramids.
        streams: Named random streams of the run.
        metrics: Optional metrics log receiving per-epoch records.

    Returns:
        Checkpoint with encoder and RSP head weights of the selected epoch.
    """
    cfg = config.pretrain
    if not train_tuples or not val_tuples:
        raise ConfigurationError("Pretraining needs non-empty training and validation tuples")

    torch.manual_seed(streams.seed_for("init"))
    model = RspNetwork(cfg.arch)
    optimizer = build_lookahead(model.parameters(), cfg)

    train_set = RspTupleDataset(train_tuples, streams, pretrain_policy(config.augment))
    val_set = RspTupleDataset(val_tuples, streams, None, label_stream="labels_val")
    train_loader = DataLoader(
        train_set, batch_size=cfg.batch_size, shuffle=True, generator=streams.torch("shuffle"), num_workers=cfg.num_workers
    )
    val_loader = DataLoader(val_set, batch_size=cfg.batch_size, shuffle=False, num_workers=cfg.num_workers)

    history: list[dict] = []
    best_state, best_loss = None, None
    for epoch in tqdm(range(cfg.epochs), desc="[pretrain] rsp", disable=not config.progress):
        train_set.set_epoch(epoch)
        model.train()
        total, correct, count = 0.0, 0, 0
        for x, y in train_loader:
            optimizer.zero_grad()
            logits = model(x)
            loss = rsp_loss(logits, y)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(y)
            correct += int((logits.argmax(dim=1) == y).sum())
            count += len(y)
        val_loss, val_acc = evaluate_rsp(model, val_loader)
        record = {
            "epoch": epoch,
            "train_loss": total / count,
            "train_accuracy": correct / count,
            "val_loss": val_loss,
            "val_accuracy": val_acc,
        }
        history.append(record)
        if metrics is not None:
            metrics.log_many(epoch, "train", {"loss": record["train_loss"], "accuracy": record["train_accuracy"]})
            metrics.log_many(epoch, "val", {"loss": val_loss, "accuracy": val_acc})
        if is_improvement(val_loss, best_loss, "min"):
            best_loss, best_state = val_loss, copy.deepcopy(model.state_dict())
        logger.info(
            "[pretrain] epoch=%d train_loss=%.4f val_loss=%.4f val_acc=%.3f", epoch, record["train_loss"], val_loss, val_acc
        )

    best_epoch = select_best(history, SelectionRule.MIN_VAL_LOSS)
    model.load_state_dict(best_state)
    logger.info("[pretrain] selected epoch %d (val_loss=%.4f)", best_epoch, history[best_epoch]["val_loss"])
    return Checkpoint(
        method=PretrainMethod.RSP.value,
        arch=cfg.arch,
        feature_dim=SEQUENCE_DIM,
        modules={"encoder": model.encoder.state_dict(), "rsp_head": model.head.state_dict()},
        rng_streams=streams.describe(),
        history=history,
        best_epoch=best_epoch,
    )
