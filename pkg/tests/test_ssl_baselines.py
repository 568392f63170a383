import math

import numpy as np
import pytest
import torch

from ssl_cr.configuration import InfoNceMode
from ssl_cr.errors import ArgumentError, ConfigurationError, NumericError
from ssl_cr.nets import FEATURE_DIM
from ssl_cr.ssl_baselines import (
    KeyQueue,
    MoCoState,
    Vae,
    info_nce,
    kl_divergence,
    moco_pretrain,
    moco_step,
    momentum_update,
    queue_push,
    reparameterize,
    vae_elbo,
    vae_pretrain,
)


def test_momentum_update_matches_closed_form():
    key = [torch.zeros(4, dtype=torch.float64)]
    query = [torch.ones(4, dtype=torch.float64)]
    m = 0.9
    for _ in range(10):
        momentum_update(key, query, m)
    assert torch.allclose(key[0], torch.full((4,), 1 - m**10, dtype=torch.float64))


def test_momentum_update_validates_arguments():
    with pytest.raises(ArgumentError):
        momentum_update([torch.zeros(2)], [torch.zeros(2)], 1.5)
    with pytest.raises(ArgumentError):
        momentum_update([torch.zeros(2)], [torch.zeros(3)], 0.5)


def test_queue_is_fifo():
    queue = KeyQueue(dim=2, capacity=5)
    oracle: list[float] = []
    value = 0.0
    for n in (2, 3, 1, 4, 2):
        batch = torch.arange(value, value + n).unsqueeze(1).repeat(1, 2)
        value += n
        queue_push(queue, batch)
        oracle = (oracle + batch[:, 0].tolist())[-5:]
        assert queue.contents()[:, 0].tolist() == oracle
        assert len(queue) == len(oracle)


def test_queue_rejects_oversized_batches():
    with pytest.raises(ArgumentError):
        queue_push(KeyQueue(dim=2, capacity=3), torch.zeros(4, 2))


def test_info_nce_with_equal_similarities():
    n = 8
    v = torch.nn.functional.normalize(torch.ones(1, 16), dim=1)
    q, k = v.repeat(3, 1), v.repeat(3, 1)
    negatives = v.repeat(n, 1)
    standard = info_nce(q, k, negatives, tau=0.2)
    literal = info_nce(q, k, negatives, tau=0.2, mode=InfoNceMode.LITERAL)
    assert standard.item() == pytest.approx(math.log(n + 1), abs=1e-5)
    assert literal.item() == pytest.approx(math.log(n), abs=1e-5)


def test_info_nce_accepts_per_query_negatives():
    q = torch.nn.functional.normalize(torch.randn(3, 4), dim=1)
    shared = torch.nn.functional.normalize(torch.randn(5, 4), dim=1)
    a = info_nce(q, q, shared, tau=0.5)
    b = info_nce(q, q, shared.unsqueeze(0).repeat(3, 1, 1), tau=0.5)
    assert torch.allclose(a, b)


def test_info_nce_rejects_bad_temperature():
    v = torch.ones(2, 4)
    with pytest.raises(ArgumentError):
        info_nce(v, v, v, tau=0.0)


def test_kl_of_standard_normal_is_zero():
    kl = kl_divergence(torch.zeros(3, 5), torch.ones(3, 5))
    assert torch.allclose(kl, torch.zeros(3))


def test_kl_matches_monte_carlo():
    mu = torch.tensor([0.5, -0.3], dtype=torch.float64)
    var = torch.tensor([0.8, 1.5], dtype=torch.float64)
    generator = torch.Generator().manual_seed(0)
    z = mu + var.sqrt() * torch.randn(200_000, 2, generator=generator, dtype=torch.float64)
    q = torch.distributions.Normal(mu, var.sqrt())
    p = torch.distributions.Normal(torch.zeros(2, dtype=torch.float64), torch.ones(2, dtype=torch.float64))
    estimate = (q.log_prob(z) - p.log_prob(z)).sum(dim=1).mean()
    assert kl_divergence(mu, var).item() == pytest.approx(estimate.item(), abs=0.01)


def test_nonpositive_variance_is_rejected():
    with pytest.raises(NumericError):
        kl_divergence(torch.zeros(2), torch.tensor([1.0, 0.0]))
    with pytest.raises(NumericError):
        reparameterize(torch.zeros(2), torch.tensor([-1.0, 1.0]))


def test_vae_elbo_is_finite():
    torch.manual_seed(0)
    vae = Vae("small_conv", latent_dim=8, patch_size=32)
    x = torch.rand(4, 3, 32, 32)
    mu, var = vae.posterior(x)
    assert mu.shape == (4, 8) and (var > 0).all()
    loss = vae_elbo(x, (mu, var), vae.decoder, torch.Generator().manual_seed(1))
    assert torch.isfinite(loss)
    loss.backward()


@pytest.mark.parametrize("patch_size", [8, 24, 224])
def test_vae_decodes_any_patch_size(patch_size):
    torch.manual_seed(0)
    vae = Vae("small_conv", latent_dim=8, patch_size=patch_size)
    x = torch.rand(2, 3, patch_size, patch_size)
    mu, var = vae.posterior(x)
    recon = vae.decoder(mu)
    assert recon.shape == x.shape
    assert ((recon >= 0) & (recon <= 1)).all()
    loss = vae_elbo(x, (mu, var), vae.decoder, torch.Generator().manual_seed(1))
    assert torch.isfinite(loss)
    loss.backward()


def test_vae_rejects_tiny_patches():
    with pytest.raises(ConfigurationError):
        Vae("small_conv", latent_dim=8, patch_size=4)


def test_moco_requires_a_temperature(make_config):
    with pytest.raises(ConfigurationError):
        MoCoState.create(make_config(moco__temperature=None))


def test_first_moco_batch_only_fills_the_queue(config):
    torch.manual_seed(0)
    state = MoCoState.create(config)
    optimizer = torch.optim.SGD(state.query.parameters(), lr=0.01)
    x = torch.rand(4, 3, 32, 32)
    assert moco_step(state, x, x, optimizer) is None
    assert len(state.queue) == 4
    loss = moco_step(state, x, x, optimizer)
    assert isinstance(loss, float) and math.isfinite(loss)
    assert len(state.queue) == 8


def test_moco_pretrain_checkpoint(config, regression_corpus, streams):
    patches = regression_corpus.sample_patches(16, np.random.default_rng(0))
    ckpt = moco_pretrain(config, patches, streams)
    assert ckpt.method == "moco"
    assert ckpt.feature_dim == FEATURE_DIM
    assert set(ckpt.modules) == {"encoder", "projection"}
    assert len(ckpt.history) == config.pretrain.epochs


def test_vae_pretrain_checkpoint(make_config, regression_corpus, streams):
    config = make_config(vae__latent_dim=16)
    patches = regression_corpus.sample_patches(16, np.random.default_rng(0))
    ckpt = vae_pretrain(config, patches, streams)
    assert ckpt.method == "vae"
    assert ckpt.feature_dim == FEATURE_DIM
    assert {"encoder", "decoder"} <= set(ckpt.modules)
    assert all(math.isfinite(record["train_loss"]) for record in ckpt.history)
