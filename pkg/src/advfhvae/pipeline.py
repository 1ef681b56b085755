"""End-to-end synthetic experiments: pretrain, finetune variants, evaluate.

Desk-scale mirror of the full-corpus experimental design: everything runs
on the synthetic two-factor corpus, with one root seed steering corpus
generation, training and evaluation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import seeding
from .corpus import (
    Corpus,
    SynthConfig,
    Utterance,
    fit_norm_stats,
    load_corpus,
    normalize_corpus,
    synth_generate,
)
from .evalharness import (
    IntentConfig,
    ProbeConfig,
    build_feature_table,
    intent_f1_for_split,
    probe_accuracy_for_split,
    split_in_domain,
    split_out_of_domain,
    train_probe,
)
from .extract import extract_corpus
from .losses import LossFlags, LossWeights, disentangle_loss
from .model import ModelConfig, PriorConfig
from .trainer import Checkpoint, MetricsLog, TrainingConfig, finetune, pretrain

log = logging.getLogger(__name__)

# Finetune variants in grid order; flags = (adversarial, reference, dys_only, disentangle)
VARIANT_FLAGS = {
    "pretrained": None,
    "finetuned": LossFlags(),
    "adversarial": LossFlags(adversarial=True),
    "adv_ref": LossFlags(adversarial=True, reference=True),
    "adv_ref_dys": LossFlags(adversarial=True, reference=True, gen_dys_only=True),
    "adv_ref_dys_dstg": LossFlags(adversarial=True, reference=True,
                                  gen_dys_only=True, disentangle=True),
}

GRID_COLUMNS = ("ood_f1", "indomain_f1", "probe_z1", "probe_z2", "probe_z12")


@dataclass
class SynthExperimentConfig:
    """Desk-scale sizes; paper-scale values stay in ModelConfig/TrainingConfig defaults."""

    synth: SynthConfig = field(default_factory=lambda: SynthConfig(
        n_sequences=280, segments_per_sequence=8, n_speakers=40,
        dysarthric_fraction=0.45, obs_dim=32, n_labels=5,
        domain_shift_strength=4.0, noise_std=0.4,
    ))
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        feat_dim=32, seg_len=20, latent_dim=16, rnn_units=48, rnn_layers=2,
        priors=PriorConfig(1.0, 0.25, 1.0),
    ))
    pretrain_cfg: TrainingConfig = field(default_factory=lambda: TrainingConfig(
        batch_size=128, hier_sample_size=5000, max_epochs=12, patience=4,
        seg_shift=20,
    ))
    finetune_epochs: int = 24
    # Desk-scale adversarial balance: with only a few hundred finetune steps
    # the discriminator needs a higher learning rate (and the generator term a
    # smaller weight) than the full-scale defaults to give a meaningful
    # invariance gradient instead of arbitrary displacement.
    finetune_lr_disc: float = 0.001
    finetune_n_disc_steps: int = 1
    finetune_w_gen: float = 8.0
    finetune_w_dstg: float = 1.0
    probe_cfg: ProbeConfig = field(default_factory=lambda: ProbeConfig(epochs=40))
    intent_cfg: IntentConfig = field(default_factory=lambda: IntentConfig(epochs=30))
    # desk-scale measurements are noisy; average the intent micro-F1 over
    # several intent-model initializations and the domain probes over
    # several speaker splits / probe initializations
    intent_eval_repeats: int = 5
    probe_eval_repeats: int = 3
    seq_probe_sequences: int = 24
    probe_test_fraction: float = 0.3


@dataclass
class VariantResult:
    probe_acc: dict[str, float] = field(default_factory=dict)  # kind -> accuracy
    ood_f1: float = float("nan")
    indomain_f1: float = float("nan")
    crosscorr: float = float("nan")


@dataclass
class SynthRunResult:
    seed: int
    seq_probe_z1: float
    seq_probe_z2: float
    variants: dict[str, VariantResult]


def make_synth_corpus(cfg: SynthExperimentConfig, seed: int) -> Corpus:
    synth_cfg = replace(cfg.synth, seed=seeding.derive_seed(seed, seeding.STREAM_SYNTH))
    manifest, feats = synth_generate(synth_cfg)
    corpus = load_corpus(manifest, inline_features=feats)
    control_feats = [u.features for u in corpus.control_only()]
    stats = fit_norm_stats(control_feats)
    normed, _ = normalize_corpus([u.features for u in corpus], stats)
    return Corpus([Utterance(u.utterance_id, f, u.speaker, u.labels)
                   for u, f in zip(corpus, normed)])


def sequence_identity_probe(
    ckpt: Checkpoint, corpus: Corpus, cfg: SynthExperimentConfig, seed: int
) -> tuple[float, float]:
    """Accuracy of a sequence-id probe from per-segment mu_z1 vs mu_z2.

    Control sequences only; segments of each sequence are split into
    probe-train and probe-test so the label is always seen in training.
    """
    control = corpus.control_only()
    utts = control.utterances[: cfg.seq_probe_sequences]
    extracted = extract_corpus(ckpt, Corpus(utts), shift=cfg.model.seg_len)
    rng = seeding.derive_rng(seed, seeding.STREAM_EVAL, 100)
    accs = {}
    for kind in ("z1", "z2"):
        xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
        for label, uf in enumerate(extracted):
            vecs = uf.mu_z1 if kind == "z1" else uf.mu_z2
            order = rng.permutation(len(vecs))
            n_test = max(1, int(round(cfg.probe_test_fraction * len(vecs))))
            for j in order[n_test:]:
                xs_tr.append(vecs[j])
                ys_tr.append(label)
            for j in order[:n_test]:
                xs_te.append(vecs[j])
                ys_te.append(label)
        probe_cfg = replace(cfg.probe_cfg, n_classes=len(extracted))
        _, acc = train_probe(np.stack(xs_tr), np.array(ys_tr),
                             np.stack(xs_te), np.array(ys_te), probe_cfg,
                             seeding.derive_seed(seed, seeding.STREAM_PROBE, 100))
        accs[kind] = acc
    return accs["z1"], accs["z2"]


def domain_probe_split(corpus: Corpus, seed: int, test_fraction: float = 0.3):
    """Speaker-disjoint domain-probe split, stratified by domain label."""
    rng = seeding.derive_rng(seed, seeding.STREAM_SPLIT, 50)
    train_ids, test_ids = [], []
    speakers = corpus.speakers()
    for dom in (0, 1):
        ids = sorted(sid for sid, s in speakers.items() if s.domain_label == dom)
        order = rng.permutation(len(ids))
        n_test = max(1, int(round(test_fraction * len(ids))))
        test_ids += [ids[i] for i in order[:n_test]]
        train_ids += [ids[i] for i in order[n_test:]]
    return train_ids, test_ids


def segment_crosscorr(ckpt: Checkpoint, corpus: Corpus, seg_len: int) -> float:
    """Summed squared cross-correlation between mu_z1 and mu_z2 over segments."""
    extracted = extract_corpus(ckpt, corpus, shift=seg_len)
    mu1 = np.concatenate([uf.mu_z1 for uf in extracted])
    mu2 = np.concatenate([uf.mu_z2 for uf in extracted])
    return float(disentangle_loss(torch.as_tensor(mu1, dtype=torch.float64),
                                  torch.as_tensor(mu2, dtype=torch.float64)))


def evaluate_checkpoint(
    ckpt: Checkpoint, corpus: Corpus, cfg: SynthExperimentConfig, seed: int
) -> VariantResult:
    extracted = extract_corpus(ckpt, corpus, shift=cfg.model.seg_len)
    rows = build_feature_table(corpus, extracted)
    res = VariantResult()

    probe_scores: dict[str, list[float]] = {k: [] for k in ("z1", "z2", "z12")}
    for rep in range(cfg.probe_eval_repeats):
        train_ids, test_ids = domain_probe_split(
            corpus, seeding.derive_seed(seed, seeding.STREAM_PROBE, 100, rep))
        for kind in probe_scores:
            probe_scores[kind].append(probe_accuracy_for_split(
                rows, kind, train_ids, test_ids, cfg.probe_cfg,
                seeding.derive_seed(seed, seeding.STREAM_PROBE, 200, rep)))
    for kind, scores in probe_scores.items():
        res.probe_acc[kind] = float(np.mean(scores))

    dys_rows = [r for r in rows if r.speaker.domain_label == 1]
    dys_speakers = sorted({r.speaker.speaker_id: r.speaker for r in dys_rows}.values(),
                          key=lambda s: s.speaker_id)
    ood_train, ood_test = split_out_of_domain(dys_speakers)
    ind_train, ind_test = split_in_domain(dys_speakers)
    n_labels = cfg.synth.n_labels
    ood_scores, ind_scores = [], []
    for rep in range(cfg.intent_eval_repeats):
        eval_seed = seeding.derive_seed(seed, seeding.STREAM_INTENT, 200, rep)
        ood_scores.append(intent_f1_for_split(dys_rows, "z1", ood_train, ood_test,
                                              n_labels, cfg.intent_cfg, eval_seed))
        ind_scores.append(intent_f1_for_split(dys_rows, "z1", ind_train, ind_test,
                                              n_labels, cfg.intent_cfg, eval_seed))
    res.ood_f1 = float(np.mean(ood_scores))
    res.indomain_f1 = float(np.mean(ind_scores))
    res.crosscorr = segment_crosscorr(ckpt, corpus, cfg.model.seg_len)
    return res


def run_synth_experiment(
    seed: int,
    cfg: SynthExperimentConfig | None = None,
    variants: tuple[str, ...] = ("finetuned", "adv_ref_dys", "adv_ref_dys_dstg"),
    run_dir=None,
) -> SynthRunResult:
    """Pretrain once, finetune each requested variant, evaluate everything."""
    cfg = cfg or SynthExperimentConfig()
    torch.set_num_threads(max(1, torch.get_num_threads()))
    corpus = make_synth_corpus(cfg, seed)
    base_train = pretrain_cfg_for_seed(cfg, seed)

    log.info("seed %d: pretraining on %d control sequences", seed, len(corpus.control_only()))
    pre_ckpt = pretrain(corpus.control_only(), base_train, cfg.model,
                        metrics=_metrics(run_dir, "pretrain"))
    z1_acc, z2_acc = sequence_identity_probe(pre_ckpt, corpus, cfg, seed)

    results: dict[str, VariantResult] = {}
    if "pretrained" in variants:
        results["pretrained"] = evaluate_checkpoint(pre_ckpt, corpus, cfg, seed)
    for name in variants:
        if VARIANT_FLAGS[name] is None:
            continue
        log.info("seed %d: finetuning variant %s", seed, name)
        ckpt = finetune_variant(pre_ckpt, corpus, cfg, name, seed,
                                metrics=_metrics(run_dir, f"finetune_{name}"))
        results[name] = evaluate_checkpoint(ckpt, corpus, cfg, seed)
    return SynthRunResult(seed, z1_acc, z2_acc, results)


def pretrain_cfg_for_seed(cfg: SynthExperimentConfig, seed: int) -> TrainingConfig:
    return replace(cfg.pretrain_cfg, seed=seeding.derive_seed(seed, 10))


def finetune_variant(
    pre_ckpt: Checkpoint,
    corpus: Corpus,
    cfg: SynthExperimentConfig,
    name: str,
    seed: int,
    metrics: MetricsLog | None = None,
) -> Checkpoint:
    """Finetune one named variant with the experiment's desk-scale balance."""
    base_train = pretrain_cfg_for_seed(cfg, seed)
    ft_cfg = replace(
        base_train,
        flags=VARIANT_FLAGS[name],
        max_epochs=cfg.finetune_epochs,
        patience=min(cfg.pretrain_cfg.patience, cfg.finetune_epochs),
        lr_disc=cfg.finetune_lr_disc,
        n_disc_steps=cfg.finetune_n_disc_steps,
        weights=replace(base_train.weights, w_gen=cfg.finetune_w_gen,
                        w_dstg=cfg.finetune_w_dstg),
        seed=seeding.derive_seed(seed, 11),
    )
    return finetune(pre_ckpt, corpus, ft_cfg, metrics=metrics)


def _metrics(run_dir, name):
    if run_dir is None:
        return None
    from pathlib import Path

    return MetricsLog(Path(run_dir) / f"{name}.metrics.tsv")


def format_grid(results: list[SynthRunResult], variants: tuple[str, ...]) -> str:
    """Comparison grid: one method row per variant, per-seed values and means."""
    lines = []
    seeds = [r.seed for r in results]
    header = "method\tcolumn\t" + "\t".join(f"seed{s}" for s in seeds)
    if len(seeds) > 1:
        header += "\tmean"
    lines.append(header)
    for name in variants:
        for col in GRID_COLUMNS:
            vals = []
            for r in results:
                v = r.variants[name]
                vals.append({"ood_f1": v.ood_f1, "indomain_f1": v.indomain_f1,
                             "probe_z1": v.probe_acc.get("z1", float("nan")),
                             "probe_z2": v.probe_acc.get("z2", float("nan")),
                             "probe_z12": v.probe_acc.get("z12", float("nan"))}[col])
            row = f"{name}\t{col}\t" + "\t".join(f"{v:.4f}" for v in vals)
            if len(seeds) > 1:
                row += f"\t{np.mean(vals):.4f}"
            lines.append(row)
    return "\n".join(lines) + "\n"


def reproduce_synthetic_table(out_dir, seeds: list[int],
                              cfg: SynthExperimentConfig | None = None) -> str:
    """Full method-comparison grid over the requested seeds; returns the grid text."""
    from pathlib import Path

    variants = tuple(VARIANT_FLAGS)
    results = [run_synth_experiment(s, cfg, variants) for s in seeds]
    grid = format_grid(results, variants)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "synthetic_table.tsv").write_text(grid)
    return grid
