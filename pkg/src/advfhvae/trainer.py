"""Training orchestration: hierarchical sampling, pretraining, finetuning.

All stochasticity is keyed on (root seed, purpose counter, epoch), so a
run resumed from a checkpoint continues the exact trajectory of an
uninterrupted run.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import seeding
from .arrayio import load_blob, save_blob
from .corpus import Corpus, segment_utterance
from .errors import ConfigurationError, DataError
from .losses import (
    LossFlags,
    LossReport,
    LossWeights,
    disc_loss,
    disentangle_loss,
    gen_loss,
    lower_bound_loss,
    reference_loss,
    total_fhvae_loss,
    z2_disc_loss,
)
from .model import Discriminator, Fhvae, ModelConfig, PriorConfig, infer_seq_mean, reparam_sample

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    lr_fhvae: float = 0.001
    lr_disc: float = 0.0002
    batch_size: int = 500
    hier_sample_size: int = 5000
    max_epochs: int = 50
    patience: int = 10
    seg_shift: int = 8
    n_disc_steps: int = 1
    val_fraction: float = 0.1
    recompute_mu2_per_step: bool = False
    reverse_reference_kl: bool = False
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    flags: LossFlags = field(default_factory=LossFlags)

    def __post_init__(self):
        if self.lr_fhvae <= 0 or self.lr_disc <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.hier_sample_size < self.batch_size:
            raise ConfigurationError("hier_sample_size must be >= batch_size")
        if self.patience > self.max_epochs:
            raise ConfigurationError("patience must be <= max_epochs")


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------


@dataclass
class SeqData:
    seq_index: int
    utterance_id: str
    segments: np.ndarray  # (N, seg_len, D) float32
    domain_label: int


def build_training_set(corpus: Corpus, seg_len: int, shift: int) -> list[SeqData]:
    seqs = []
    for i, utt in enumerate(corpus):
        recs = segment_utterance(utt.features, seg_len, shift, i, utt.speaker.domain_label)
        if not recs:
            continue
        seqs.append(SeqData(i, utt.utterance_id,
                            np.stack([r.x for r in recs]).astype(np.float32),
                            utt.speaker.domain_label))
    if not seqs:
        raise DataError("no usable sequences (all shorter than one segment?)")
    return seqs


def split_train_val(seqs: list[SeqData], val_fraction: float, seed: int) -> tuple[list, list]:
    rng = seeding.derive_rng(seed, seeding.STREAM_SPLIT)
    order = rng.permutation(len(seqs))
    n_val = min(max(1, int(round(val_fraction * len(seqs)))), len(seqs) - 1) if len(seqs) > 1 else 0
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(seqs) if i not in val_idx]
    vals = [s for i, s in enumerate(seqs) if i in val_idx]
    return train, vals


# ---------------------------------------------------------------------------
# Hierarchical sampling
# ---------------------------------------------------------------------------


@dataclass
class SequenceCache:
    seqs: list[SeqData]
    mu2: torch.Tensor  # (K, latent)
    counts: torch.Tensor  # (K,)


def build_cache(seqs: list[SeqData], model: Fhvae, dtype=torch.float32) -> SequenceCache:
    """Posterior-mean table for a cache of sequences, current encoder, no grad."""
    mu2_rows = []
    counts = []
    with torch.no_grad():
        for s in seqs:
            x = torch.as_tensor(s.segments, dtype=dtype)
            means, _ = model.encode_z2(x)
            mu2_rows.append(infer_seq_mean(means, model.cfg.priors))
            counts.append(s.segments.shape[0])
    return SequenceCache(list(seqs), torch.stack(mu2_rows), torch.tensor(counts, dtype=dtype))


def hierarchical_batches(
    seqs: list[SeqData],
    model: Fhvae,
    hier_sample_size: int,
    batch_size: int,
    rng: np.random.Generator,
    dtype=torch.float32,
):
    """One epoch of cache-then-batch iteration.

    Sequences are sampled without replacement into caches of size <= K;
    each cache is exhausted in shuffled batches before the next is drawn.
    Yields (cache, batch) with batch = dict(x, seq_pos, domain, n_segments).
    """
    order = rng.permutation(len(seqs))
    for start in range(0, len(order), hier_sample_size):
        chunk = [seqs[i] for i in order[start : start + hier_sample_size]]
        cache = build_cache(chunk, model, dtype)
        pairs = [(pos, n) for pos, s in enumerate(chunk) for n in range(s.segments.shape[0])]
        perm = rng.permutation(len(pairs))
        for bstart in range(0, len(perm), batch_size):
            sel = [pairs[i] for i in perm[bstart : bstart + batch_size]]
            x = torch.as_tensor(
                np.stack([chunk[pos].segments[n] for pos, n in sel]), dtype=dtype
            )
            seq_pos = torch.tensor([pos for pos, _ in sel], dtype=torch.long)
            domain = torch.tensor([chunk[pos].domain_label for pos, _ in sel], dtype=torch.long)
            yield cache, {
                "x": x,
                "seq_pos": seq_pos,
                "domain": domain,
                "n_segments": cache.counts[seq_pos],
            }


# ---------------------------------------------------------------------------
# Loss evaluation (shared by training steps, validation and gradient checks)
# ---------------------------------------------------------------------------


def training_loss(
    model: Fhvae,
    batch: dict,
    mu2_table: torch.Tensor,
    weights: LossWeights,
    flags: LossFlags,
    disc: Discriminator | None = None,
    frozen: Fhvae | None = None,
    noise_z1: torch.Tensor | None = None,
    noise_z2: torch.Tensor | None = None,
    reverse_reference_kl: bool = False,
) -> tuple[torch.Tensor, LossReport, torch.Tensor]:
    """Total FHVAE objective on one batch with mu2_table held constant.

    Returns (total, report, mu_z1) where mu_z1 is the content posterior
    mean for discriminator updates.
    """
    x, seq_pos, domain = batch["x"], batch["seq_pos"], batch["domain"]
    priors = model.cfg.priors

    mu_z2, lv_z2 = model.encode_z2(x)
    z2 = mu_z2 if noise_z2 is None else reparam_sample(mu_z2, lv_z2, noise_z2)
    mu_z1, lv_z1 = model.encode_z1(x, z2)
    z1 = mu_z1 if noise_z1 is None else reparam_sample(mu_z1, lv_z1, noise_z1)
    recon_mean, recon_logvar = model.decode(z1, z2)

    mu2_tilde = mu2_table[seq_pos].detach()
    lb = lower_bound_loss(x, recon_mean, recon_logvar, (mu_z1, lv_z1), (mu_z2, lv_z2),
                          mu2_tilde, priors, batch["n_segments"])
    z2d = z2_disc_loss(z2, seq_pos, mu2_table.detach(), priors)

    zero = lb.new_zeros(())
    g = zero
    if flags.adversarial:
        if disc is None:
            raise ConfigurationError("adversarial flag set but no discriminator supplied")
        p_d = disc(mu_z1)
        g = gen_loss(p_d, domain, "dys_only" if flags.gen_dys_only else "both")
    r = zero
    if flags.reference:
        if frozen is None:
            raise ConfigurationError("reference flag set but no frozen encoder supplied")
        mu_z2_f, _ = frozen.encode_z2(x)
        q1f = frozen.encode_z1(x, mu_z2_f)
        r = reference_loss((mu_z1, lv_z1), q1f, domain, reverse=reverse_reference_kl)
    d = disentangle_loss(mu_z1, mu_z2) if flags.disentangle else zero

    total, report = total_fhvae_loss(lb, z2d, g, r, d, weights, flags)
    return total, report, mu_z1


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    model_state: dict
    train_cfg: dict
    epoch: int
    best_val: float
    best_state: dict | None = None
    disc_state: dict | None = None
    frozen_state: dict | None = None
    opt_state: dict | None = None
    opt_disc_state: dict | None = None
    epochs_since_improve: int = 0
    norm_stats_ref: str | None = None

    def build_model(self, dtype=torch.float32, best: bool = False) -> Fhvae:
        model = Fhvae(self.model_cfg).to(dtype)
        state = self.best_state if (best and self.best_state is not None) else self.model_state
        model.load_state_dict({k: torch.as_tensor(v).to(dtype) for k, v in state.items()})
        model.eval()
        return model

    def build_discriminator(self, dtype=torch.float32) -> Discriminator | None:
        if self.disc_state is None:
            return None
        disc = Discriminator(self.model_cfg.latent_dim, self.model_cfg.disc_hidden).to(dtype)
        disc.load_state_dict({k: torch.as_tensor(v).to(dtype) for k, v in self.disc_state.items()})
        return disc


def _state_to_arrays(prefix: str, state: dict) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in state.items()}


def _arrays_to_state(prefix: str, arrays: dict) -> dict:
    plen = len(prefix) + 1
    return {k[plen:]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith(prefix + ".")}


def _opt_to_arrays(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"{prefix}.{idx}.{key}"] = (
                val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
            )
    return arrays, {"param_groups": sd["param_groups"]}


def _arrays_to_opt(prefix: str, arrays: dict, meta: dict, opt: torch.optim.Optimizer):
    state: dict = {}
    plen = len(prefix) + 1
    for k, v in arrays.items():
        if not k.startswith(prefix + "."):
            continue
        idx_s, key = k[plen:].split(".", 1)
        state.setdefault(int(idx_s), {})[key] = torch.as_tensor(v)
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = _state_to_arrays("model", ckpt.model_state)
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "model_cfg": {**asdict(ckpt.model_cfg), "priors": asdict(ckpt.model_cfg.priors)},
        "train_cfg": ckpt.train_cfg,
        "epoch": ckpt.epoch,
        "best_val": ckpt.best_val,
        "epochs_since_improve": ckpt.epochs_since_improve,
        "norm_stats_ref": ckpt.norm_stats_ref,
    }
    if ckpt.best_state is not None:
        arrays.update(_state_to_arrays("best", ckpt.best_state))
    if ckpt.disc_state is not None:
        arrays.update(_state_to_arrays("disc", ckpt.disc_state))
    if ckpt.frozen_state is not None:
        arrays.update(_state_to_arrays("frozen", ckpt.frozen_state))
    for name, st in (("opt", ckpt.opt_state), ("opt_disc", ckpt.opt_disc_state)):
        if st is not None:
            meta[f"{name}_meta"] = st["meta"]
            arrays.update({k: v for k, v in st["arrays"].items()})
    meta["array_groups"] = sorted({k.split(".", 1)[0] for k in arrays})
    save_blob(path, meta, arrays)


def load_checkpoint(path) -> Checkpoint:
    meta, arrays = load_blob(path)
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise DataError(
            f"{path}: checkpoint version {meta.get('checkpoint_version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    mc = dict(meta["model_cfg"])
    mc["priors"] = PriorConfig(**mc["priors"])
    groups = set(meta["array_groups"])
    opt_state = None
    if "opt_meta" in meta:
        opt_state = {"meta": meta["opt_meta"],
                     "arrays": {k: v for k, v in arrays.items()
                                if k.startswith("opt.") }}
    opt_disc_state = None
    if "opt_disc_meta" in meta:
        opt_disc_state = {"meta": meta["opt_disc_meta"],
                          "arrays": {k: v for k, v in arrays.items() if k.startswith("opt_disc.")}}
    return Checkpoint(
        model_cfg=ModelConfig(**mc),
        model_state=_arrays_to_state("model", arrays),
        train_cfg=meta["train_cfg"],
        epoch=meta["epoch"],
        best_val=meta["best_val"],
        best_state=_arrays_to_state("best", arrays) if "best" in groups else None,
        disc_state=_arrays_to_state("disc", arrays) if "disc" in groups else None,
        frozen_state=_arrays_to_state("frozen", arrays) if "frozen" in groups else None,
        opt_state=opt_state,
        opt_disc_state=opt_disc_state,
        epochs_since_improve=meta.get("epochs_since_improve", 0),
        norm_stats_ref=meta.get("norm_stats_ref"),
    )


# ---------------------------------------------------------------------------
# Train loops
# ---------------------------------------------------------------------------


class MetricsLog:
    """Line-oriented TSV metrics log; float repr keeps lines bit-reproducible."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.write_text("")

    def step(self, step: int, epoch: int, report: LossReport):
        self._write(f"step\t{step}\t{epoch}\t{report.as_line()}")

    def epoch(self, epoch: int, val_loss: float):
        self._write(f"epoch\t{epoch}\tval\t{repr(val_loss)}")

    def _write(self, line: str):
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(line + "\n")


def _validation_loss(model: Fhvae, val_seqs: list[SeqData], cfg: TrainingConfig,
                     dtype=torch.float32) -> float:
    """Deterministic (noise-free) lb + w*z2disc objective over the validation set."""
    if not val_seqs:
        return float("nan")
    total = 0.0
    count = 0
    with torch.no_grad():
        cache = build_cache(val_seqs, model, dtype)
        for pos, s in enumerate(val_seqs):
            x = torch.as_tensor(s.segments, dtype=dtype)
            b = x.shape[0]
            batch = {
                "x": x,
                "seq_pos": torch.full((b,), pos, dtype=torch.long),
                "domain": torch.full((b,), s.domain_label, dtype=torch.long),
                "n_segments": cache.counts[torch.full((b,), pos, dtype=torch.long)],
            }
            loss, _, _ = training_loss(model, batch, cache.mu2, cfg.weights, LossFlags())
            total += float(loss) * b
            count += b
    return total / count


def _check_finite(loss: torch.Tensor, batch: dict, run_dir):
    if torch.isfinite(loss):
        return
    if run_dir is not None:
        dump = Path(run_dir) / "diverged_batch.blob"
        save_blob(dump, {"reason": "non-finite loss"},
                  {"x": batch["x"].detach().numpy(),
                   "seq_pos": batch["seq_pos"].numpy(),
                   "domain": batch["domain"].numpy()})
        raise TrainingDiverged(f"non-finite training loss; offending batch dumped to {dump}")
    raise TrainingDiverged("non-finite training loss")


def _train(
    corpus: Corpus,
    cfg: TrainingConfig,
    model_cfg: ModelConfig,
    start_ckpt: Checkpoint | None = None,
    adversarial_stage: bool = False,
    run_dir=None,
    metrics: MetricsLog | None = None,
    dtype=torch.float32,
) -> Checkpoint:
    metrics = metrics or MetricsLog()
    seqs = build_training_set(corpus, model_cfg.seg_len, cfg.seg_shift)
    train_seqs, val_seqs = split_train_val(seqs, cfg.val_fraction, cfg.seed)

    torch.manual_seed(seeding.derive_seed(cfg.seed, seeding.STREAM_INIT))
    if start_ckpt is not None:
        model = start_ckpt.build_model(dtype)
        model.train()
    else:
        model = Fhvae(model_cfg).to(dtype)

    disc = frozen = None
    if adversarial_stage and cfg.flags.adversarial:
        domains = {s.domain_label for s in seqs}
        if len(domains) < 2:
            raise ConfigurationError("adversarial training needs both domain labels in the corpus")
        torch.manual_seed(seeding.derive_seed(cfg.seed, seeding.STREAM_INIT, 1))
        disc = Discriminator(model_cfg.latent_dim, model_cfg.disc_hidden).to(dtype)
    if adversarial_stage and cfg.flags.reference:
        ref_source = start_ckpt.build_model(dtype, best=True) if start_ckpt is not None else copy.deepcopy(model)
        frozen = ref_source
        for p in frozen.parameters():
            p.requires_grad_(False)
        frozen.eval()

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_fhvae)
    opt_disc = torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc) if disc is not None else None

    start_epoch = 0
    best_val = float("inf")
    best_state = copy.deepcopy(model.state_dict())
    since_improve = 0
    resumed = start_ckpt is not None and start_ckpt.train_cfg.get("stage") == ("finetune" if adversarial_stage else "pretrain")
    if resumed:
        start_epoch = start_ckpt.epoch + 1
        best_val = start_ckpt.best_val
        since_improve = start_ckpt.epochs_since_improve
        if start_ckpt.best_state is not None:
            best_state = {k: v.to(dtype) for k, v in start_ckpt.best_state.items()}
        if start_ckpt.opt_state is not None:
            _arrays_to_opt("opt", start_ckpt.opt_state["arrays"], start_ckpt.opt_state["meta"], opt)
        if disc is not None and start_ckpt.disc_state is not None:
            disc.load_state_dict({k: v.to(dtype) for k, v in start_ckpt.disc_state.items()})
        if opt_disc is not None and start_ckpt.opt_disc_state is not None:
            _arrays_to_opt("opt_disc", start_ckpt.opt_disc_state["arrays"],
                           start_ckpt.opt_disc_state["meta"], opt_disc)
        if frozen is not None and start_ckpt.frozen_state is not None:
            frozen.load_state_dict({k: v.to(dtype) for k, v in start_ckpt.frozen_state.items()})

    use_early_stop = not (adversarial_stage and cfg.flags.adversarial)
    flags = cfg.flags if adversarial_stage else LossFlags()
    step = start_epoch * max(1, sum(s.segments.shape[0] for s in train_seqs) // cfg.batch_size)

    def make_ckpt(epoch: int) -> Checkpoint:
        opt_arrays, opt_meta = _opt_to_arrays("opt", opt)
        ck = Checkpoint(
            model_cfg=model_cfg,
            model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
            train_cfg={**_cfg_dict(cfg), "stage": "finetune" if adversarial_stage else "pretrain"},
            epoch=epoch,
            best_val=best_val,
            best_state={k: v.detach().clone() for k, v in best_state.items()},
            epochs_since_improve=since_improve,
            opt_state={"arrays": opt_arrays, "meta": opt_meta},
        )
        if disc is not None:
            ck.disc_state = {k: v.detach().clone() for k, v in disc.state_dict().items()}
            da, dm = _opt_to_arrays("opt_disc", opt_disc)
            ck.opt_disc_state = {"arrays": da, "meta": dm}
        if frozen is not None:
            ck.frozen_state = {k: v.detach().clone() for k, v in frozen.state_dict().items()}
        return ck

    for epoch in range(start_epoch, cfg.max_epochs):
        rng = seeding.derive_rng(cfg.seed, seeding.STREAM_EPOCH, epoch)
        gen = torch.Generator().manual_seed(seeding.derive_seed(cfg.seed, seeding.STREAM_NOISE, epoch))
        model.train()
        for cache, batch in hierarchical_batches(
            train_seqs, model, cfg.hier_sample_size, cfg.batch_size, rng, dtype
        ):
            if cfg.recompute_mu2_per_step:
                present = torch.unique(batch["seq_pos"]).tolist()
                sub = build_cache([cache.seqs[i] for i in present], model, dtype)
                cache.mu2[present] = sub.mu2

            b = batch["x"].shape[0]
            latent = model_cfg.latent_dim
            noise_z2 = torch.randn(b, latent, generator=gen, dtype=dtype)
            noise_z1 = torch.randn(b, latent, generator=gen, dtype=dtype)

            d_val = 0.0
            if disc is not None:
                for _ in range(cfg.n_disc_steps):
                    with torch.no_grad():
                        mu_z2, lv_z2 = model.encode_z2(batch["x"])
                        z2 = reparam_sample(mu_z2, lv_z2, noise_z2)
                        mu_z1, _ = model.encode_z1(batch["x"], z2)
                    opt_disc.zero_grad()
                    d = disc_loss(disc(mu_z1), batch["domain"])
                    d.backward()
                    opt_disc.step()
                    d_val = float(d.detach())

            opt.zero_grad()
            if opt_disc is not None:
                opt_disc.zero_grad()
            total, report, _ = training_loss(
                model, batch, cache.mu2, cfg.weights, flags,
                disc=disc, frozen=frozen, noise_z1=noise_z1, noise_z2=noise_z2,
                reverse_reference_kl=cfg.reverse_reference_kl,
            )
            _check_finite(total, batch, run_dir)
            total.backward()
            opt.step()
            report.disc_loss = d_val
            metrics.step(step, epoch, report)
            step += 1

        model.eval()
        val = _validation_loss(model, val_seqs, cfg, dtype)
        metrics.epoch(epoch, val)
        if val == val and val < best_val:  # NaN-safe improvement test
            best_val = val
            best_state = copy.deepcopy(model.state_dict())
            since_improve = 0
        else:
            since_improve += 1
        if run_dir is not None:
            save_checkpoint(Path(run_dir) / "latest.ckpt", make_ckpt(epoch))
        if use_early_stop and since_improve > cfg.patience:
            log.info("early stop at epoch %d (no improvement for %d epochs)", epoch, since_improve)
            break

    final = make_ckpt(epoch if cfg.max_epochs > start_epoch else start_epoch - 1)
    if use_early_stop:
        final.model_state = final.best_state
    return final


def _cfg_dict(cfg: TrainingConfig) -> dict:
    d = asdict(cfg)
    return d


def pretrain(
    corpus: Corpus,
    cfg: TrainingConfig,
    model_cfg: ModelConfig,
    run_dir=None,
    metrics: MetricsLog | None = None,
    resume_from: Checkpoint | None = None,
) -> Checkpoint:
    """Control-data pretraining: bound + sequence-discriminative terms only."""
    return _train(corpus, cfg, model_cfg, start_ckpt=resume_from,
                  adversarial_stage=False, run_dir=run_dir, metrics=metrics)


def finetune(
    ckpt: Checkpoint,
    corpus: Corpus,
    cfg: TrainingConfig,
    run_dir=None,
    metrics: MetricsLog | None = None,
    resume_from: Checkpoint | None = None,
) -> Checkpoint:
    """Finetune a pretrained model; adversarial/extension terms per cfg.flags.

    Plain finetuning (all flags off) keeps early stopping; adversarial
    runs always train to max_epochs.
    """
    return _train(corpus, cfg, ckpt.model_cfg, start_ckpt=resume_from or ckpt,
                  adversarial_stage=True, run_dir=run_dir, metrics=metrics)
