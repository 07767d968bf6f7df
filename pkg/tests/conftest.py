"""Shared fixtures.

The expensive artifacts (the desk-config overfit pair, the 8-song
autoencoder overfit) are session-scoped so every test that needs a trained
model shares one training run.
"""

import time

import pytest
import torch

from melflow import evalsuite, synth
from melflow.config import RunConfig
from melflow.dcae import latent_stats, train_dcae


@pytest.fixture(scope="session")
def desk_cfg():
    return RunConfig()


@pytest.fixture(scope="session")
def tiny_cfg():
    """Small corpus and short trainings for integration tests."""
    return RunConfig().replace(
        **{
            "data.n_songs": 6,
            "data.seed": 77,
            "dcae.train_steps": 40,
            "dcae.width": 4,
            "train.steps": 10,
            "train.warmup_steps": 3,
            "sampler.steps": 4,
        }
    )


@pytest.fixture(scope="session")
def tiny_corpus(tiny_cfg):
    return synth.build_corpus(tiny_cfg.data, tiny_cfg.dcae)


@pytest.fixture(scope="session")
def tiny_dcae(tiny_cfg, tiny_corpus):
    model, metrics = train_dcae(tiny_corpus, tiny_cfg.dcae)
    return model, latent_stats(model, tiny_corpus), metrics


@pytest.fixture(scope="session")
def overfit_artifacts(desk_cfg):
    """The desk-config training pair: aligned run + alignment-ablated run.

    This is the one long fixture (minutes, not seconds); the acceptance
    gate and every post-training property test share it.
    """
    songs = synth.build_corpus(desk_cfg.data, desk_cfg.dcae)
    t0 = time.perf_counter()
    pair = evalsuite.overfit_pair(desk_cfg, songs)
    elapsed = time.perf_counter() - t0
    return {"cfg": desk_cfg, "songs": songs, "pair": pair, "elapsed_s": elapsed}


@pytest.fixture()
def generator():
    return torch.Generator().manual_seed(0)
