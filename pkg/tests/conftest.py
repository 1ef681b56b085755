import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_model_cfg(feat_dim=6, seg_len=5, latent_dim=2, rnn_units=4):
    from advfhvae.model import ModelConfig, PriorConfig

    return ModelConfig(feat_dim=feat_dim, seg_len=seg_len, latent_dim=latent_dim,
                       rnn_units=rnn_units, rnn_layers=2,
                       priors=PriorConfig(1.0, 0.25, 1.0))
