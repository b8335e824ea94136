"""Shared desk-scale corpus and trained models for the acceptance suite.

Training eight models takes a few minutes; everything is session-scoped so
the cost is paid once per pytest run.
"""

import pytest

from attractorsep.data import CorpusSpec, in_memory_corpus
from attractorsep.model import EmbeddingNetwork, NetConfig
from attractorsep.train import TrainConfig, train

DESK_SEEDS = (0, 1, 2)
DESK_EPOCHS = 30
DESK_SCHEDULE = ((20, 3.0), (26, 10.0))


def desk_net(seed: int) -> EmbeddingNetwork:
    return EmbeddingNetwork(
        NetConfig(input_dim=257, embedding_dim=8, hidden=128,
                  recurrent_layers=2, recurrent_units=64, cell="gru", seed=seed)
    )


def desk_train_config(head: str, seed: int, l_unfold: int = 5) -> TrainConfig:
    return TrainConfig(
        epochs=DESK_EPOCHS,
        batch_size=8,
        lr_schedule=DESK_SCHEDULE,
        L_unfold=l_unfold,
        metric="spherical",
        k=2,
        seed=seed,
        loss_head=head,
        val_every=DESK_EPOCHS,
    )


@pytest.fixture(scope="session")
def desk_corpus():
    spec = CorpusSpec(n_train=200, n_val=8, n_test=50, k_set=(2,), duration_s=0.5,
                      sample_rate=8000, source_family="am_noise", seed=42)
    return in_memory_corpus(spec)


@pytest.fixture(scope="session")
def danet_models(desk_corpus):
    """Ground-truth-attractor head, one model per seed."""
    return {
        seed: train(desk_net(seed), desk_corpus, desk_train_config("danet", seed)).model
        for seed in DESK_SEEDS
    }


@pytest.fixture(scope="session")
def kmeans_models(desk_corpus):
    """Unfolded-clustering head: L=5 per seed, plus the L sweep on seed 0."""
    models = {}
    for seed in DESK_SEEDS:
        cfg = desk_train_config("kmeans_danet", seed, l_unfold=5)
        models[(seed, 5)] = train(desk_net(seed), desk_corpus, cfg).model
    for l_unfold in (1, 10):
        cfg = desk_train_config("kmeans_danet", 0, l_unfold=l_unfold)
        models[(0, l_unfold)] = train(desk_net(0), desk_corpus, cfg).model
    return models
