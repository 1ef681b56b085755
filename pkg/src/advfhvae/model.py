"""Two-scale variational model: encoders, decoder, discriminator.

The segment encoder family is two bidirectional LSTM layers whose final
forward/backward states are concatenated and fed to parallel affine heads
for the posterior mean and log-variance. The content encoder sees the
sequence variable concatenated to every input frame. The decoder runs the
concatenated latents through the same recurrent stack and predicts a
per-frame Gaussian over the observation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ContractViolation

LOGVAR_CLAMP = 10.0  # logvar heads clamped to [-10, 10]


@dataclass(frozen=True)
class PriorConfig:
    var_z1: float = 1.0
    var_z2: float = 0.25
    var_mu2: float = 1.0

    def __post_init__(self):
        if min(self.var_z1, self.var_z2, self.var_mu2) <= 0:
            raise ContractViolation("prior variances must be strictly positive")


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 80
    seg_len: int = 20
    latent_dim: int = 32
    rnn_units: int = 256
    rnn_layers: int = 2
    disc_hidden: int = 32
    priors: PriorConfig = field(default_factory=PriorConfig)


class SegmentEncoder(nn.Module):
    """BiLSTM stack + two affine heads -> diagonal Gaussian posterior."""

    def __init__(self, input_dim: int, latent_dim: int, units: int, layers: int):
        super().__init__()
        self.rnn = nn.LSTM(input_dim, units, num_layers=layers,
                           batch_first=True, bidirectional=True)
        self.head_mean = nn.Linear(2 * units, latent_dim)
        self.head_logvar = nn.Linear(2 * units, latent_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        _, (h, _) = self.rnn(x)
        # h: (layers * 2, B, units); take both directions of the top layer
        summary = torch.cat([h[-2], h[-1]], dim=-1)
        mean = self.head_mean(summary)
        logvar = torch.clamp(self.head_logvar(summary), -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return mean, logvar


class Decoder(nn.Module):
    """Latents broadcast over time -> BiLSTM stack -> per-frame Gaussian."""

    def __init__(self, latent_dim: int, feat_dim: int, seg_len: int, units: int, layers: int):
        super().__init__()
        self.seg_len = seg_len
        self.rnn = nn.LSTM(2 * latent_dim, units, num_layers=layers,
                           batch_first=True, bidirectional=True)
        self.head_mean = nn.Linear(2 * units, feat_dim)
        self.head_logvar = nn.Linear(2 * units, feat_dim)

    def forward(self, z1: torch.Tensor, z2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = torch.cat([z1, z2], dim=-1).unsqueeze(1).expand(-1, self.seg_len, -1)
        out, _ = self.rnn(z)
        mean = self.head_mean(out)
        logvar = torch.clamp(self.head_logvar(out), -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return mean, logvar


class Discriminator(nn.Module):
    """Domain probe on the content posterior mean: P(segment is dysarthric)."""

    def __init__(self, latent_dim: int, hidden: int = 32):
        super().__init__()
        self.fc1 = nn.Linear(latent_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, mu_z1: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logit(mu_z1))

    def logit(self, mu_z1: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(mu_z1))).squeeze(-1)


class Fhvae(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder_z2 = SegmentEncoder(cfg.feat_dim, cfg.latent_dim, cfg.rnn_units, cfg.rnn_layers)
        self.encoder_z1 = SegmentEncoder(cfg.feat_dim + cfg.latent_dim, cfg.latent_dim,
                                         cfg.rnn_units, cfg.rnn_layers)
        self.decoder = Decoder(cfg.latent_dim, cfg.feat_dim, cfg.seg_len,
                               cfg.rnn_units, cfg.rnn_layers)

    def _check_x(self, x: torch.Tensor):
        if x.shape[-2:] != (self.cfg.seg_len, self.cfg.feat_dim):
            raise ContractViolation(
                f"segment shape {tuple(x.shape[-2:])} != ({self.cfg.seg_len}, {self.cfg.feat_dim})"
            )

    def encode_z2(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check_x(x)
        return self.encoder_z2(x)

    def encode_z1(self, x: torch.Tensor, z2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check_x(x)
        if z2.shape != (x.shape[0], self.cfg.latent_dim):
            raise ContractViolation(f"z2 shape {tuple(z2.shape)} mismatch")
        z2_tiled = z2.unsqueeze(1).expand(-1, self.cfg.seg_len, -1)
        return self.encoder_z1(torch.cat([x, z2_tiled], dim=-1))

    def decode(self, z1: torch.Tensor, z2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.decoder(z1, z2)


def reparam_sample(mean: torch.Tensor, logvar: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """mean + exp(logvar / 2) * noise."""
    if noise.shape != mean.shape:
        raise ContractViolation(f"noise shape {tuple(noise.shape)} != {tuple(mean.shape)}")
    return mean + torch.exp(0.5 * logvar) * noise


def infer_seq_mean(enc_means: torch.Tensor, priors: PriorConfig) -> torch.Tensor:
    """Shrinkage estimate of a sequence's prior mean from its segments'
    encoder means: sum(means) / (N + var_z2 / var_mu2)."""
    if enc_means.ndim != 2 or enc_means.shape[0] == 0:
        raise ContractViolation("enc_means must be a non-empty (N, latent) matrix")
    n = enc_means.shape[0]
    return enc_means.sum(dim=0) / (n + priors.var_z2 / priors.var_mu2)
