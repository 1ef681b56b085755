"""Loss terms of the adversarially finetuned two-scale VAE.

All per-segment losses reduce by arithmetic mean over the batch. Loss
probabilities entering a cross-entropy are clamped to [1e-7, 1 - 1e-7];
clamp events are counted in CLAMP_COUNTER.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch

from .errors import ConfigurationError, ContractViolation
from .model import PriorConfig

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


class ClampCounter:
    def __init__(self):
        self.count = 0

    def add(self, n: int):
        self.count += int(n)
        if n:
            log.warning("clamped %d out-of-range probabilities", n)


CLAMP_COUNTER = ClampCounter()


@dataclass(frozen=True)
class LossWeights:
    w_z2_disc: float = 10.0
    w_gen: float = 500.0
    w_ref: float = 0.1
    w_dstg: float = 1.0

    def __post_init__(self):
        if min(self.w_z2_disc, self.w_gen, self.w_ref, self.w_dstg) < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossFlags:
    adversarial: bool = False
    reference: bool = False
    gen_dys_only: bool = False
    disentangle: bool = False


@dataclass
class LossReport:
    lb_loss: float
    z2_disc_loss: float
    gen_loss: float
    ref_loss: float
    dstg_loss: float
    total: float
    disc_loss: float = 0.0

    FIELDS = ("lb_loss", "z2_disc_loss", "gen_loss", "ref_loss", "dstg_loss", "disc_loss", "total")

    def as_line(self) -> str:
        return "\t".join(repr(getattr(self, f)) for f in self.FIELDS)


def _clamp_prob(p: torch.Tensor) -> torch.Tensor:
    out_of_range = ((p < PROB_EPS) | (p > 1.0 - PROB_EPS)).sum().item()
    CLAMP_COUNTER.add(out_of_range)
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def kl_diag_gauss(q_mean: torch.Tensor, q_logvar: torch.Tensor,
                  p_mean: torch.Tensor, p_var: torch.Tensor) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last dim."""
    p_var = torch.as_tensor(p_var, dtype=q_mean.dtype, device=q_mean.device)
    if (p_var <= 0).any():
        raise ContractViolation("p_var must be strictly positive")
    q_var = torch.exp(q_logvar)
    term = torch.log(p_var) - q_logvar + (q_var + (q_mean - p_mean) ** 2) / p_var - 1.0
    return 0.5 * term.sum(dim=-1)


def gauss_log_prob(x: torch.Tensor, mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Diagonal-Gaussian log density, summed over all non-batch dims."""
    elem = -0.5 * (math.log(2.0 * math.pi) + logvar + (x - mean) ** 2 / torch.exp(logvar))
    return elem.reshape(elem.shape[0], -1).sum(dim=-1)


def lower_bound_loss(
    x: torch.Tensor,
    recon_mean: torch.Tensor,
    recon_logvar: torch.Tensor,
    q_z1: tuple[torch.Tensor, torch.Tensor],
    q_z2: tuple[torch.Tensor, torch.Tensor],
    mu2_tilde: torch.Tensor,
    priors: PriorConfig,
    n_segments: torch.Tensor | float,
) -> torch.Tensor:
    """Negative per-segment variational bound, averaged over the batch.

    -[ log p(x|z1,z2) - KL(q_z1 || N(0, var_z1 I)) - KL(q_z2 || N(mu2_tilde, var_z2 I))
       + (1/N_i) log N(mu2_tilde; 0, var_mu2 I) ]
    """
    mu1, lv1 = q_z1
    mu2, lv2 = q_z2
    loglik = gauss_log_prob(x, recon_mean, recon_logvar)
    kl1 = kl_diag_gauss(mu1, lv1, torch.zeros_like(mu1), torch.full_like(mu1, priors.var_z1))
    kl2 = kl_diag_gauss(mu2, lv2, mu2_tilde, torch.full_like(mu2, priors.var_z2))
    d = mu2_tilde.shape[-1]
    log_pmu2 = -0.5 * (
        d * math.log(2.0 * math.pi * priors.var_mu2)
        + (mu2_tilde ** 2).sum(dim=-1) / priors.var_mu2
    )
    n_segments = torch.as_tensor(n_segments, dtype=x.dtype, device=x.device)
    bound = loglik - kl1 - kl2 + log_pmu2 / n_segments
    return -bound.mean()


def z2_disc_loss(z2: torch.Tensor, own_index: torch.Tensor,
                 mu2_table: torch.Tensor, priors: PriorConfig) -> torch.Tensor:
    """Sequence-discriminative softmax over cached sequence means.

    Logit for cached sequence j is -||z2 - mu2_j||^2 / (2 var_z2); returns
    the mean cross-entropy at each segment's own sequence.
    """
    k = mu2_table.shape[0]
    if k < 2:
        log.warning("sequence cache has %d entries; z2 discriminative loss skipped", k)
        return z2.new_zeros(())
    d2 = torch.cdist(z2, mu2_table) ** 2
    logits = -d2 / (2.0 * priors.var_z2)
    return torch.nn.functional.cross_entropy(logits, own_index)


def disc_loss(p_d: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of the domain discriminator, label 1 = dysarthric."""
    p = _clamp_prob(p_d)
    labels = labels.to(p.dtype)
    return -(labels * torch.log(p) + (1.0 - labels) * torch.log(1.0 - p)).mean()


def gen_loss(p_d: torch.Tensor, labels: torch.Tensor, mode: str = "both") -> torch.Tensor:
    """Adversarial generator loss: cross-entropy against the flipped label.

    mode="both": every segment scored against 1 - label. mode="dys_only":
    dysarthric segments scored against label 0, control segments contribute 0.
    """
    p = _clamp_prob(p_d)
    labels = labels.to(p.dtype)
    if mode == "both":
        flipped = 1.0 - labels
        per = -(flipped * torch.log(p) + (1.0 - flipped) * torch.log(1.0 - p))
    elif mode == "dys_only":
        per = -labels * torch.log(1.0 - p)
    else:
        raise ConfigurationError(f"unknown gen_loss mode {mode!r}")
    return per.mean()


def reference_loss(
    q_now: tuple[torch.Tensor, torch.Tensor],
    q_frozen: tuple[torch.Tensor, torch.Tensor],
    labels: torch.Tensor,
    reverse: bool = False,
) -> torch.Tensor:
    """KL tether of the content posterior to a frozen pretrained encoder,
    active on control segments only. Default direction KL(frozen || now)."""
    mu_n, lv_n = q_now
    mu_f, lv_f = q_frozen
    if reverse:
        kl = kl_diag_gauss(mu_n, lv_n, mu_f, torch.exp(lv_f))
    else:
        kl = kl_diag_gauss(mu_f, lv_f, mu_n, torch.exp(lv_n))
    control = (labels == 0).to(kl.dtype)
    return (kl * control).mean()


def disentangle_loss(mu_z1: torch.Tensor, mu_z2: torch.Tensor) -> torch.Tensor:
    """Sum of squared Pearson cross-correlations between the two latents' columns."""
    b = mu_z1.shape[0]
    if b < 3:
        raise ContractViolation(f"need batch size >= 3, got {b}")
    c1 = mu_z1 - mu_z1.mean(dim=0)
    c2 = mu_z2 - mu_z2.mean(dim=0)
    s1 = c1.pow(2).sum(dim=0).sqrt()
    s2 = c2.pow(2).sum(dim=0).sqrt()
    keep1 = s1 > 0
    keep2 = s2 > 0
    if not keep1.all() or not keep2.all():
        log.warning("zero-variance columns excluded from disentanglement loss")
    c1 = c1[:, keep1] / s1[keep1]
    c2 = c2[:, keep2] / s2[keep2]
    corr = c1.T @ c2
    return corr.pow(2).sum()


def total_fhvae_loss(
    lb: torch.Tensor,
    z2_disc: torch.Tensor,
    gen: torch.Tensor,
    ref: torch.Tensor,
    dstg: torch.Tensor,
    weights: LossWeights,
    flags: LossFlags,
    disc: float = 0.0,
) -> tuple[torch.Tensor, LossReport]:
    """Weighted training objective; disabled terms contribute exactly 0."""
    zero = lb.new_zeros(())
    gen = gen if flags.adversarial else zero
    ref = ref if flags.reference else zero
    dstg = dstg if flags.disentangle else zero
    total = (
        lb
        + weights.w_z2_disc * z2_disc
        + weights.w_gen * gen
        + weights.w_ref * ref
        + weights.w_dstg * dstg
    )
    components = [float(t.detach()) for t in (lb, z2_disc, gen, ref, dstg)]
    # Recombine the reported total from the reported components so the
    # weighted-sum identity holds exactly in the log, independent of the
    # tensor dtype used for backprop.
    report_total = (
        components[0]
        + weights.w_z2_disc * components[1]
        + weights.w_gen * components[2]
        + weights.w_ref * components[3]
        + weights.w_dstg * components[4]
    )
    report = LossReport(
        lb_loss=components[0],
        z2_disc_loss=components[1],
        gen_loss=components[2],
        ref_loss=components[3],
        dstg_loss=components[4],
        total=report_total,
        disc_loss=float(disc),
    )
    assert abs(report_total - float(total.detach())) <= 1e-4 * max(1.0, abs(report_total)) + 1e-4, \
        "loss identity broken"
    return total, report
