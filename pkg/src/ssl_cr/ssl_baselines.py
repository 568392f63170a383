"""MoCo and VAE pretrainers producing checkpoints interchangeable with RSP ones."""

import copy
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from ssl_cr.augment import AugPolicy, apply_policy, moco_policy
from ssl_cr.configuration import ExperimentConfig, InfoNceMode, PretrainMethod
from ssl_cr.errors import ArgumentError, ConfigurationError, NumericError
from ssl_cr.nets import FEATURE_DIM, Encoder
from ssl_cr.seeding import RngStreams
from ssl_cr.ssl_pretrain import build_lookahead
from ssl_cr.storage.checkpoint_store import Checkpoint
from ssl_cr.utils import MetricsLog, images_to_tensor, to_float_image

logger = logging.getLogger(__name__)


###################
# MoCo
###################
def info_nce(
    q: torch.Tensor,
    k_plus: torch.Tensor,
    negatives: torch.Tensor,
    tau: float,
    mode: InfoNceMode = InfoNceMode.STANDARD,
) -> torch.Tensor:
    """Contrastive loss of queries against their positive key and a set of negatives.

    Args:
        q: (N, d) queries.
        k_plus: (N, d) positive keys.
        negatives: (K, d) shared negatives or (N, K, d) per-query negatives.
        tau: Temperature, > 0.
        mode: STANDARD keeps the positive in the denominator; LITERAL sums negatives only.

    Returns:
        Mean loss over the batch.
    """
    if tau <= 0:
        raise ArgumentError(f"Temperature must be positive, got {tau}")
    if q.dim() == 1:
        q, k_plus = q.unsqueeze(0), k_plus.unsqueeze(0)
    if q.shape != k_plus.shape or negatives.shape[-1] != q.shape[-1]:
        raise ArgumentError("Queries, keys and negatives must share their dimension")
    if negatives.numel() == 0 or negatives.shape[-2] < 1:
        raise ArgumentError("At least one negative is required")

    positive = (q * k_plus).sum(dim=-1) / tau
    if negatives.dim() == 2:
        negative = q @ negatives.T / tau
    else:
        negative = torch.einsum("nd,nkd->nk", q, negatives) / tau
    if mode is InfoNceMode.LITERAL:
        return (torch.logsumexp(negative, dim=1) - positive).mean()
    logits = torch.cat([positive.unsqueeze(1), negative], dim=1)
    labels = torch.zeros(logits.shape[0], dtype=torch.long)
    return F.cross_entropy(logits, labels)


@torch.no_grad()
def momentum_update(
    key: nn.Module | Iterable[torch.Tensor],
    query: nn.Module | Iterable[torch.Tensor],
    m: float,
) -> nn.Module | list[torch.Tensor]:
    """In place: key = m * key + (1 - m) * query."""
    if not 0.0 <= m <= 1.0:
        raise ArgumentError(f"Momentum must lie in [0, 1], got {m}")
    key_params = list(key.parameters()) if isinstance(key, nn.Module) else list(key)
    query_params = list(query.parameters()) if isinstance(query, nn.Module) else list(query)
    if len(key_params) != len(query_params) or any(a.shape != b.shape for a, b in zip(key_params, query_params)):
        raise ArgumentError("Key and query parameters differ in shape")
    for pk, pq in zip(key_params, query_params):
        pk.mul_(m).add_(pq, alpha=1.0 - m)
    return key if isinstance(key, nn.Module) else key_params


class KeyQueue:
    """Fixed-capacity FIFO of encoded keys."""

    def __init__(self, dim: int, capacity: int):
        if capacity < 1:
            raise ConfigurationError("Queue capacity must be positive")
        self.capacity = capacity
        self.keys = torch.zeros(capacity, dim)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def contents(self) -> torch.Tensor:
        """Stored keys from oldest to newest."""
        if self.size < self.capacity:
            return self.keys[: self.size].clone()
        return torch.cat([self.keys[self.ptr:], self.keys[: self.ptr]]).clone()


@torch.no_grad()
def queue_push(queue: KeyQueue, keys: torch.Tensor) -> KeyQueue:
    """Enqueue a batch, evicting the oldest entries beyond capacity."""
    n = keys.shape[0]
    if n > queue.capacity:
        raise ArgumentError(f"Batch of {n} keys exceeds queue capacity {queue.capacity}")
    positions = (queue.ptr + torch.arange(n)) % queue.capacity
    queue.keys[positions] = keys.detach().to(queue.keys.dtype)
    queue.ptr = int((queue.ptr + n) % queue.capacity)
    queue.size = min(queue.size + n, queue.capacity)
    return queue


class ContrastiveEncoder(nn.Module):
    """Encoder plus linear projection used only by the contrastive loss."""

    def __init__(self, arch: str, projection_dim: int):
        super().__init__()
        self.encoder = Encoder(arch)
        self.projection = nn.Linear(FEATURE_DIM, projection_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.projection(self.encoder(x)), dim=1)


@dataclass
class MoCoState:
    """Query encoder, momentum encoder and negative queue."""

    query: ContrastiveEncoder
    key: ContrastiveEncoder
    queue: KeyQueue
    momentum: float
    temperature: float
    mode: InfoNceMode = InfoNceMode.STANDARD

    @classmethod
    def create(cls, config: ExperimentConfig) -> "MoCoState":
        moco = config.moco
        if moco.temperature is None:
            raise ConfigurationError("moco.temperature must be set explicitly")
        query = ContrastiveEncoder(config.pretrain.arch, moco.projection_dim)
        key = copy.deepcopy(query)
        for param in key.parameters():
            param.requires_grad_(False)
        return cls(query, key, KeyQueue(moco.projection_dim, moco.queue_size), moco.momentum, moco.temperature, moco.infonce_mode)


def moco_step(state: MoCoState, x_q: torch.Tensor, x_k: torch.Tensor, optimizer) -> Optional[float]:
    """One training step; returns None while the queue is still empty."""
    q = state.query(x_q)
    with torch.no_grad():
        momentum_update(state.key, state.query, state.momentum)
        k = state.key(x_k)
    if len(state.queue) == 0:
        queue_push(state.queue, k)
        return None
    # negatives are read before this batch's keys are enqueued
    loss = info_nce(q, k, state.queue.contents(), state.temperature, state.mode)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    queue_push(state.queue, k)
    return loss.item()


class ViewPairDataset(Dataset):
    """Two independently augmented views of each patch."""

    def __init__(self, patches: Sequence[np.ndarray], streams: RngStreams, policy: AugPolicy):
        self.patches = list(patches)
        self.streams = streams
        self.policy = policy
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.patches)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        rng = self.streams.child("aug_moco", self.epoch, index)
        views = [apply_policy(self.patches[index], self.policy, rng) for _ in range(2)]
        return images_to_tensor(views[:1])[0], images_to_tensor(views[1:])[0]


def moco_pretrain(
    config: ExperimentConfig,
    patches: Sequence[np.ndarray],
    streams: RngStreams,
    metrics: Optional[MetricsLog] = None,
) -> Checkpoint:
    """Momentum-contrast pretraining on single-magnification patches."""
    cfg = config.pretrain
    if not patches:
        raise ConfigurationError("MoCo pretraining needs a non-empty patch set")
    if cfg.batch_size > config.moco.queue_size:
        raise ConfigurationError("moco.queue_size must be at least the batch size")

    torch.manual_seed(streams.seed_for("init"))
    state = MoCoState.create(config)
    optimizer = build_lookahead(state.query.parameters(), cfg)
    dataset = ViewPairDataset(patches, streams, moco_policy(config.augment))
    loader = DataLoader(
        dataset, batch_size=cfg.batch_size, shuffle=True, drop_last=len(dataset) > cfg.batch_size,
        generator=streams.torch("shuffle"), num_workers=cfg.num_workers,
    )

    history: list[dict] = []
    for epoch in tqdm(range(cfg.epochs), desc="[pretrain] moco", disable=not config.progress):
        dataset.set_epoch(epoch)
        state.query.train()
        state.key.train()
        losses = [loss for x_q, x_k in loader if (loss := moco_step(state, x_q, x_k, optimizer)) is not None]
        train_loss = float(np.mean(losses)) if losses else float("nan")
        history.append({"epoch": epoch, "train_loss": train_loss, "queue": len(state.queue)})
        if metrics is not None:
            metrics.log(epoch, "train", "loss", train_loss)
        logger.info("[pretrain] moco epoch=%d loss=%.4f queue=%d", epoch, train_loss, len(state.queue))

    return Checkpoint(
        method=PretrainMethod.MOCO.value,
        arch=cfg.arch,
        feature_dim=FEATURE_DIM,
        modules={"encoder": state.query.encoder.state_dict(), "projection": state.query.projection.state_dict()},
        rng_streams=streams.describe(),
        history=history,
        best_epoch=len(history) - 1,
    )


###################
# VAE
###################
class VaeDecoder(nn.Module):
    """Small transposed-convolution decoder from a latent vector to a P x P image.

    Upsamples to the next power of two at or above P, then resizes bilinearly to P.
    """

    def __init__(self, latent_dim: int, patch_size: int, base_channels: int = 128):
        super().__init__()
        if patch_size < 8:
            raise ConfigurationError(f"VAE decoder needs a patch size >= 8, got {patch_size}")
        self.patch_size = patch_size
        self.base_channels = base_channels
        self.fc = nn.Linear(latent_dim, base_channels * 4 * 4)
        layers: list[nn.Module] = []
        channels = base_channels
        for _ in range(math.ceil(math.log2(patch_size)) - 2):
            out = max(channels // 2, 16)
            layers += [nn.ConvTranspose2d(channels, out, 4, stride=2, padding=1), nn.BatchNorm2d(out), nn.ReLU(inplace=True)]
            channels = out
        layers += [nn.Conv2d(channels, 3, 3, padding=1), nn.Sigmoid()]
        self.body = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        out = self.body(self.fc(z).view(-1, self.base_channels, 4, 4))
        if out.shape[-1] != self.patch_size:
            out = F.interpolate(out, size=(self.patch_size, self.patch_size), mode="bilinear", align_corners=False)
        return out


class Vae(nn.Module):
    """Encoder with Gaussian posterior heads and a small decoder."""

    def __init__(self, arch: str, latent_dim: int, patch_size: int):
        super().__init__()
        self.encoder = Encoder(arch)
        self.mu = nn.Linear(FEATURE_DIM, latent_dim)
        self.log_var = nn.Linear(FEATURE_DIM, latent_dim)
        self.decoder = VaeDecoder(latent_dim, patch_size)

    def posterior(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Mean and variance of q(z|x); variance is exp of a clamped log-variance."""
        h = self.encoder(x)
        return self.mu(h), torch.exp(self.log_var(h).clamp(-10.0, 10.0))


def kl_divergence(mu: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    """Per-sample KL(N(mu, var) || N(0, I)), summed over latent dimensions."""
    if (var <= 0).any():
        raise NumericError("Posterior variance must be positive")
    return 0.5 * (mu.pow(2) + var - torch.log(var) - 1.0).sum(dim=-1)


def reparameterize(mu: torch.Tensor, var: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """z = mu + sqrt(var) * eps with eps ~ N(0, I)."""
    if (var <= 0).any():
        raise NumericError("Posterior variance must be positive")
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.sqrt(var) * eps


def vae_elbo(
    x: torch.Tensor,
    encoder_out: tuple[torch.Tensor, torch.Tensor],
    decoder: nn.Module,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Negative ELBO: summed squared reconstruction error plus closed-form KL, averaged over the batch."""
    mu, var = encoder_out
    z = reparameterize(mu, var, generator)
    reconstruction = ((decoder(z) - x) ** 2).flatten(1).sum(dim=1)
    return (reconstruction + kl_divergence(mu, var)).mean()


def vae_pretrain(
    config: ExperimentConfig,
    patches: Sequence[np.ndarray],
    streams: RngStreams,
    metrics: Optional[MetricsLog] = None,
) -> Checkpoint:
    """Variational autoencoder pretraining on single-magnification patches."""
    cfg = config.pretrain
    if not patches:
        raise ConfigurationError("VAE pretraining needs a non-empty patch set")

    torch.manual_seed(streams.seed_for("init"))
    model = Vae(cfg.arch, config.vae.latent_dim, config.data.patch_size)
    optimizer = build_lookahead(model.parameters(), cfg)
    images = torch.from_numpy(
        np.ascontiguousarray(np.stack([to_float_image(p) for p in patches]).transpose(0, 3, 1, 2))
    )
    loader = DataLoader(images, batch_size=cfg.batch_size, shuffle=True, generator=streams.torch("shuffle"))
    noise = streams.torch("vae_noise")

    history: list[dict] = []
    for epoch in tqdm(range(cfg.epochs), desc="[pretrain] vae", disable=not config.progress):
        model.train()
        total, count = 0.0, 0
        for x in loader:
            loss = vae_elbo(x, model.posterior(x), model.decoder, noise)
            if not torch.isfinite(loss):
                raise NumericError(f"VAE loss diverged at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(x)
            count += len(x)
        history.append({"epoch": epoch, "train_loss": total / count})
        if metrics is not None:
            metrics.log(epoch, "train", "loss", total / count)
        logger.info("[pretrain] vae epoch=%d loss=%.4f", epoch, total / count)

    return Checkpoint(
        method=PretrainMethod.VAE.value,
        arch=cfg.arch,
        feature_dim=FEATURE_DIM,
        modules={
            "encoder": model.encoder.state_dict(),
            "posterior": {**{f"mu.{k}": v for k, v in model.mu.state_dict().items()},
                          **{f"log_var.{k}": v for k, v in model.log_var.state_dict().items()}},
            "decoder": model.decoder.state_dict(),
        },
        rng_streams=streams.describe(),
        history=history,
        best_epoch=len(history) - 1,
    )
