"""Encoders, the resolution-sequence head, task heads and parameter freezing."""

import copy
import logging
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import resnet18

from ssl_cr.configuration import TaskMode
from ssl_cr.errors import ArgumentError, ConfigurationError

logger = logging.getLogger(__name__)

FEATURE_DIM = 512
PAIR_DIM = 2 * FEATURE_DIM
PAIR_HIDDEN = 512
PAIR_OUT = 256
SEQUENCE_DIM = 3 * PAIR_OUT
SEQUENCE_HIDDEN = 256
N_PERMUTATIONS = 6


def _conv_block(c_in: int, c_out: int, pool: bool) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU(inplace=True)]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    """Image encoder ending in global average pooling to a 512-d feature."""

    def __init__(self, arch: str = "small_conv"):
        super().__init__()
        self.arch = arch
        self.out_dim = FEATURE_DIM
        if arch == "small_conv":
            self.body = nn.Sequential(
                _conv_block(3, 32, pool=True),
                _conv_block(32, 64, pool=True),
                _conv_block(64, 128, pool=True),
                nn.Conv2d(128, FEATURE_DIM, 1),
                nn.BatchNorm2d(FEATURE_DIM),
                nn.ReLU(inplace=True),
                nn.AdaptiveAvgPool2d(1),
                nn.Flatten(),
            )
        elif arch == "resnet18":
            backbone = resnet18(weights=None)
            backbone.fc = nn.Identity()
            self.body = backbone
        else:
            raise ConfigurationError(f"Unknown encoder architecture '{arch}'")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def encode(encoder: Encoder, img: torch.Tensor, patch_size: Optional[int] = None) -> torch.Tensor:
    """Encode an NCHW (or CHW) batch into (N, 512) features."""
    if img.dim() == 3:
        img = img.unsqueeze(0)
    if img.dim() != 4 or img.shape[1] != 3 or img.shape[2] != img.shape[3]:
        raise ArgumentError(f"Expected square RGB patches (N, 3, P, P), got {tuple(img.shape)}")
    if patch_size is not None and img.shape[2] != patch_size:
        raise ArgumentError(f"Expected patch size {patch_size}, got {img.shape[2]}")
    return encoder(img)


class PairwiseMLP(nn.Module):
    """Shared projection of a concatenated feature pair, 1024 -> 512 -> 256."""

    def __init__(self):
        super().__init__()
        self.fc1 = nn.Linear(PAIR_DIM, PAIR_HIDDEN)
        self.fc2 = nn.Linear(PAIR_HIDDEN, PAIR_OUT)

    def forward(self, pair: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(pair)))


def _expect(tensor: torch.Tensor, width: int, stage: str) -> None:
    if tensor.shape[-1] != width:
        raise ArgumentError(f"{stage}: expected width {width}, got {tensor.shape[-1]}")


class RspHead(nn.Module):
    """Pairwise MLP over (h1,h2), (h1,h3), (h2,h3) followed by the 6-way sequence MLP."""

    def __init__(self):
        super().__init__()
        self.pairwise = PairwiseMLP()
        self.sequence = nn.Sequential(
            nn.Linear(SEQUENCE_DIM, SEQUENCE_HIDDEN), nn.ReLU(inplace=True), nn.Linear(SEQUENCE_HIDDEN, N_PERMUTATIONS)
        )

    def pair_features(self, h1: torch.Tensor, h2: torch.Tensor, h3: torch.Tensor) -> torch.Tensor:
        """Concatenated pair projections, (N, 768)."""
        for h in (h1, h2, h3):
            _expect(h, FEATURE_DIM, "feature")
        projected = []
        for a, b in ((h1, h2), (h1, h3), (h2, h3)):
            pair = torch.cat([a, b], dim=-1)
            _expect(pair, PAIR_DIM, "pair")
            z = self.pairwise(pair)
            _expect(z, PAIR_OUT, "pairwise")
            projected.append(z)
        joined = torch.cat(projected, dim=-1)
        _expect(joined, SEQUENCE_DIM, "sequence input")
        return joined

    def forward(self, h1: torch.Tensor, h2: torch.Tensor, h3: torch.Tensor) -> torch.Tensor:
        logits = self.sequence(self.pair_features(h1, h2, h3))
        _expect(logits, N_PERMUTATIONS, "logits")
        return logits


class RspNetwork(nn.Module):
    """Siamese encoder plus RSP head."""

    def __init__(self, arch: str = "small_conv"):
        super().__init__()
        self.encoder = Encoder(arch)
        self.head = RspHead()

    def forward(self, sequences: torch.Tensor) -> torch.Tensor:
        """Map (N, 3, C, P, P) permuted sequences to (N, 6) logits."""
        if sequences.dim() != 5 or sequences.shape[1] != 3:
            raise ArgumentError(f"Expected (N, 3, C, P, P) sequences, got {tuple(sequences.shape)}")
        n = sequences.shape[0]
        features = encode(self.encoder, sequences.flatten(0, 1)).view(n, 3, -1)
        return self.head(features[:, 0], features[:, 1], features[:, 2])


def rsp_forward(model: RspNetwork, patches: tuple[torch.Tensor, torch.Tensor, torch.Tensor]) -> torch.Tensor:
    """Logits for one permuted sequence given as three CHW (or NCHW) tensors."""
    shapes = {tuple(p.shape) for p in patches}
    if len(shapes) != 1:
        raise ArgumentError(f"Sequence patches differ in size: {sorted(shapes)}")
    batch = torch.stack([p if p.dim() == 4 else p.unsqueeze(0) for p in patches], dim=1)
    return model(batch)


class RspAdapter(nn.Module):
    """Fine-tune pathway for RSP weights: one patch fills all three sequence slots."""

    def __init__(self, head: Optional[RspHead] = None):
        super().__init__()
        self.pairwise = head.pairwise if head is not None else PairwiseMLP()
        self.out_dim = SEQUENCE_DIM

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        pair = torch.cat([h, h], dim=-1)
        z = self.pairwise(pair)
        return torch.cat([z, z, z], dim=-1)


class TaskHead(nn.Module):
    """Two-layer MLP (Fc1, ReLU, Fc2) and a final linear layer."""

    def __init__(self, mode: TaskMode, in_dim: int, n_outputs: int, hidden: tuple[int, int] = (256, 128)):
        super().__init__()
        if mode is TaskMode.REGRESSION and n_outputs != 1:
            raise ConfigurationError("A regressor has exactly one output")
        self.mode = mode
        self.in_dim = in_dim
        self.n_outputs = n_outputs
        self.mlp = nn.Sequential(nn.Linear(in_dim, hidden[0]), nn.ReLU(inplace=True), nn.Linear(hidden[0], hidden[1]))
        self.fc = nn.Linear(hidden[1], n_outputs)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.in_dim:
            raise ConfigurationError(f"Head expects {self.in_dim}-d features, got {features.shape[-1]}")
        out = self.fc(self.mlp(features))
        if self.mode is TaskMode.REGRESSION:
            return torch.sigmoid(out.squeeze(-1))
        return out


class TaskModel(nn.Module):
    """Encoder, optional RSP adapter and task head.

    Regressors return predictions in [0, 1]; classifiers return logits.
    """

    def __init__(self, encoder: Encoder, head: TaskHead, adapter: Optional[RspAdapter] = None):
        super().__init__()
        self.encoder = encoder
        self.adapter = adapter
        self.head = head

    @property
    def feature_dim(self) -> int:
        return self.adapter.out_dim if self.adapter is not None else self.encoder.out_dim

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = encode(self.encoder, x)
        return self.adapter(h) if self.adapter is not None else h

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def task_forward(model: TaskModel, img: torch.Tensor) -> torch.Tensor:
    """Class probabilities or regression predictions in [0, 1]."""
    if model.head.in_dim != model.feature_dim:
        raise ConfigurationError(f"Head input {model.head.in_dim} does not match feature pathway {model.feature_dim}")
    out = model(img)
    if model.head.mode is TaskMode.CLASSIFICATION:
        return torch.softmax(out, dim=-1)
    return out


###################
# Freezing
###################
@dataclass
class FreezeSpec:
    """Per-parameter trainable flags keyed by parameter name."""

    trainable: dict[str, bool]

    @classmethod
    def all_trainable(cls, model: nn.Module) -> "FreezeSpec":
        return cls({name: True for name, _ in model.named_parameters()})

    @classmethod
    def frozen(cls, model: nn.Module) -> "FreezeSpec":
        return cls({name: False for name, _ in model.named_parameters()})

    @classmethod
    def student_consistency(cls, model: TaskModel) -> "FreezeSpec":
        """Train only the head's Fc1/Fc2 MLP and final layer."""
        return cls({name: name.startswith("head.") for name, _ in model.named_parameters()})


def apply_freeze(model: nn.Module, spec: FreezeSpec) -> nn.Module:
    """Set requires_grad in place from a spec covering every parameter."""
    names = {name for name, _ in model.named_parameters()}
    missing = sorted(names - set(spec.trainable))
    if missing:
        raise ConfigurationError(f"Freeze spec misses parameters: {missing[:5]}")
    for name, param in model.named_parameters():
        param.requires_grad_(spec.trainable[name])
    return model


def clone_and_freeze(model: nn.Module, spec: FreezeSpec) -> nn.Module:
    """Deep-copy `model` and apply `spec` to the copy."""
    return apply_freeze(copy.deepcopy(model), spec)


def set_train_mode(model: nn.Module) -> nn.Module:
    """Train mode for modules with trainable parameters; fully frozen modules stay in eval."""
    model.train()
    for module in model.modules():
        params = list(module.parameters(recurse=False))
        if params and not any(p.requires_grad for p in params):
            module.eval()
    return model


def build_task_model(
    encoder: Encoder,
    mode: TaskMode,
    n_outputs: int,
    rsp_head: Optional[RspHead] = None,
    hidden: tuple[int, int] = (256, 128),
) -> TaskModel:
    """Assemble a task model; an RSP head switches the pathway to 768-d features."""
    adapter = RspAdapter(rsp_head) if rsp_head is not None else None
    in_dim = adapter.out_dim if adapter is not None else encoder.out_dim
    return TaskModel(encoder, TaskHead(mode, in_dim, n_outputs, hidden), adapter)
