"""Evaluation protocols: severity splits, k-fold probe CV, intent micro-F1.

The intent model is a deliberately small stand-in (GRU + per-label
logistic outputs) so different feature front-ends can be compared under a
fixed downstream model; absolute scores are not comparable to any
full-scale SLU system.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import seeding
from .corpus import CONTROL, DYSARTHRIC, Corpus, SpeakerMeta
from .errors import ConfigurationError, ContractViolation
from .extract import UtteranceFeatures, extract_corpus
from .trainer import Checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "out_of_domain"  # out_of_domain | in_domain | kfold
    threshold: float = 70.0
    n_folds: int = 6
    repeats: int = 5

    def __post_init__(self):
        if not 0.0 < self.threshold < 100.0:
            raise ConfigurationError("threshold must lie in (0, 100)")
        if self.n_folds < 2:
            raise ConfigurationError("n_folds must be >= 2")


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 100
    n_classes: int = 2
    batch_size: int = 128
    epochs: int = 30
    lr: float = 0.001


@dataclass(frozen=True)
class IntentConfig:
    hidden: int = 64
    batch_size: int = 16
    epochs: int = 50
    lr: float = 0.001
    threshold: float = 0.5


@dataclass
class EvalReport:
    protocol: str
    input_kind: str
    per_repeat: list[float]
    per_speaker: dict[str, float] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_repeat))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def split_out_of_domain(speakers: list[SpeakerMeta], threshold: float = 70.0):
    """Train on mild speakers (intelligibility >= threshold), test on the rest."""
    for s in speakers:
        if s.intelligibility is None:
            raise ContractViolation(f"speaker {s.speaker_id} has no intelligibility score")
    train = [s.speaker_id for s in speakers if s.intelligibility >= threshold]
    test = [s.speaker_id for s in speakers if s.intelligibility < threshold]
    if not train or not test:
        raise ConfigurationError(
            f"out-of-domain split at threshold {threshold} leaves an empty side "
            f"({len(train)} train / {len(test)} test)"
        )
    return train, test


def split_in_domain(speakers: list[SpeakerMeta]):
    """Rank by intelligibility (desc, speaker_id tie-break); odd ranks train."""
    for s in speakers:
        if s.intelligibility is None:
            raise ContractViolation(f"speaker {s.speaker_id} has no intelligibility score")
    ranked = sorted(speakers, key=lambda s: (-s.intelligibility, s.speaker_id))
    train = [s.speaker_id for i, s in enumerate(ranked) if i % 2 == 0]
    test = [s.speaker_id for i, s in enumerate(ranked) if i % 2 == 1]
    if not test:
        log.warning("in-domain split has an empty test side (%d speakers)", len(speakers))
    return train, test


def kfold_blocks(
    utterance_speakers: list[SpeakerMeta],
    n_folds: int = 6,
    rng: np.random.Generator | None = None,
):
    """Speaker-disjoint blocks, balanced in per-domain utterance counts.

    ``utterance_speakers`` has one SpeakerMeta per utterance. Greedy
    packing: per domain, speakers in decreasing utterance count go to the
    currently lightest block. Returns (blocks, folds) where folds[f] =
    (train_ids, val_ids, test_ids) with test block f, validation block
    (f+1) mod n_folds.
    """
    rng = rng or np.random.default_rng(0)
    counts: dict[str, int] = {}
    domain: dict[str, int] = {}
    for s in utterance_speakers:
        counts[s.speaker_id] = counts.get(s.speaker_id, 0) + 1
        domain[s.speaker_id] = s.domain_label
    for dom in (CONTROL, DYSARTHRIC):
        n_dom = sum(1 for sid in counts if domain[sid] == dom)
        if n_dom < n_folds:
            raise ConfigurationError(
                f"domain {dom} has {n_dom} speakers, fewer than {n_folds} folds"
            )
    blocks: list[set[str]] = [set() for _ in range(n_folds)]
    load = np.zeros((n_folds, 2))
    for dom in (CONTROL, DYSARTHRIC):
        ids = [sid for sid in counts if domain[sid] == dom]
        perm = rng.permutation(len(ids))
        ids = [ids[i] for i in perm]
        ids.sort(key=lambda sid: -counts[sid])
        for sid in ids:
            b = int(np.argmin(load[:, dom]))
            blocks[b].add(sid)
            load[b, dom] += counts[sid]
    folds = []
    for f in range(n_folds):
        test = blocks[f]
        val = blocks[(f + 1) % n_folds]
        train = set().union(*(blocks[g] for g in range(n_folds) if g not in (f, (f + 1) % n_folds)))
        folds.append((sorted(train), sorted(val), sorted(test)))
    return blocks, folds


# ---------------------------------------------------------------------------
# Probe classifier
# ---------------------------------------------------------------------------


class _Probe(nn.Module):
    def __init__(self, dim: int, hidden: int, n_classes: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, n_classes))

    def forward(self, x):
        return self.net(x)


def train_probe(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_test: np.ndarray,
    y_test: np.ndarray,
    cfg: ProbeConfig = ProbeConfig(),
    seed: int = 0,
) -> tuple[_Probe, float]:
    """Dense probe on pooled vectors; returns (model, test correct-rate)."""
    if len(np.unique(y_train)) < 2:
        raise ConfigurationError("probe training set contains a single class")
    torch.manual_seed(seeding.derive_seed(seed, seeding.STREAM_PROBE))
    rng = seeding.derive_rng(seed, seeding.STREAM_PROBE, 1)
    model = _Probe(x_train.shape[1], cfg.hidden, cfg.n_classes)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    xt = torch.as_tensor(np.asarray(x_train, dtype=np.float32))
    yt = torch.as_tensor(np.asarray(y_train, dtype=np.int64))
    for _ in range(cfg.epochs):
        order = rng.permutation(len(xt))
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start : start + cfg.batch_size])
            opt.zero_grad()
            loss = nn.functional.cross_entropy(model(xt[idx]), yt[idx])
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        pred = model(torch.as_tensor(np.asarray(x_test, dtype=np.float32))).argmax(dim=1).numpy()
    return model, float((pred == np.asarray(y_test)).mean())


# ---------------------------------------------------------------------------
# Intent stand-in model
# ---------------------------------------------------------------------------


class _IntentModel(nn.Module):
    def __init__(self, dim: int, hidden: int, n_labels: int):
        super().__init__()
        self.rnn = nn.GRU(dim, hidden, batch_first=True)
        self.out = nn.Linear(hidden, n_labels)

    def forward(self, padded, lengths):
        packed = nn.utils.rnn.pack_padded_sequence(
            padded, lengths, batch_first=True, enforce_sorted=False
        )
        _, h = self.rnn(packed)
        return self.out(h[-1])


def _pad(seqs: list[np.ndarray]):
    lengths = [s.shape[0] for s in seqs]
    padded = torch.zeros(len(seqs), max(lengths), seqs[0].shape[1])
    for i, s in enumerate(seqs):
        padded[i, : s.shape[0]] = torch.as_tensor(np.asarray(s, dtype=np.float32))
    return padded, torch.tensor(lengths)


def train_intent_model(
    train_seqs: list[np.ndarray],
    train_labels: list[frozenset[int]],
    n_labels: int,
    cfg: IntentConfig = IntentConfig(),
    seed: int = 0,
) -> _IntentModel:
    """Multi-label intent classifier over per-segment feature sequences."""
    if n_labels < 1:
        raise ConfigurationError("empty label universe")
    torch.manual_seed(seeding.derive_seed(seed, seeding.STREAM_INTENT))
    rng = seeding.derive_rng(seed, seeding.STREAM_INTENT, 1)
    model = _IntentModel(train_seqs[0].shape[1], cfg.hidden, n_labels)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    targets = torch.zeros(len(train_seqs), n_labels)
    for i, labels in enumerate(train_labels):
        for l in labels:
            targets[i, l] = 1.0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train_seqs))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            padded, lengths = _pad([train_seqs[i] for i in idx])
            opt.zero_grad()
            logits = model(padded, lengths)
            loss = nn.functional.binary_cross_entropy_with_logits(logits, targets[idx])
            loss.backward()
            opt.step()
    model.eval()
    return model


def predict_intents(
    model: _IntentModel, seqs: list[np.ndarray], threshold: float = 0.5, batch_size: int = 64
) -> list[frozenset[int]]:
    preds = []
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            padded, lengths = _pad(seqs[start : start + batch_size])
            probs = torch.sigmoid(model(padded, lengths)).numpy()
            for row in probs:
                preds.append(frozenset(int(i) for i in np.nonzero(row > threshold)[0]))
    return preds


def micro_f1(predicted: list[frozenset[int]], truth: list[frozenset[int]]) -> float:
    """TP/FP/FN pooled over all labels and utterances; 2TP / (2TP + FP + FN)."""
    if len(predicted) != len(truth):
        raise ContractViolation("prediction/truth lists are not aligned")
    tp = fp = fn = 0
    for p, t in zip(predicted, truth):
        tp += len(p & t)
        fp += len(p - t)
        fn += len(t - p)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


# ---------------------------------------------------------------------------
# Feature table and suite orchestration
# ---------------------------------------------------------------------------

INPUT_KINDS = ("fbank", "z1", "z2", "z12")
FBANK_SUBSAMPLE = 4  # frame step when feeding raw filterbanks to the intent model


@dataclass
class FeatureRow:
    utterance_id: str
    speaker: SpeakerMeta
    labels: frozenset[int]
    seqs: dict[str, np.ndarray]
    pooled: dict[str, np.ndarray]


def build_feature_table(corpus: Corpus, extracted: list[UtteranceFeatures] | None) -> list[FeatureRow]:
    ext = {uf.utterance_id: uf for uf in extracted} if extracted is not None else {}
    rows = []
    for utt in corpus:
        seqs = {"fbank": utt.features[::FBANK_SUBSAMPLE]}
        pooled = {"fbank": utt.features.mean(axis=0)}
        uf = ext.get(utt.utterance_id)
        if uf is not None:
            seqs["z1"] = uf.mu_z1
            seqs["z2"] = uf.mu_z2
            seqs["z12"] = np.concatenate([uf.mu_z1, uf.mu_z2], axis=1)
            pooled["z1"] = uf.pooled_z1
            pooled["z2"] = uf.pooled_z2
            pooled["z12"] = np.concatenate([uf.pooled_z1, uf.pooled_z2])
        rows.append(FeatureRow(utt.utterance_id, utt.speaker, utt.labels, seqs, pooled))
    return rows


def _assert_disjoint(train_ids, test_ids):
    if set(train_ids) & set(test_ids):
        raise ContractViolation("train/test speaker sets overlap")


def intent_f1_for_split(
    rows: list[FeatureRow], kind: str, train_ids, test_ids,
    n_labels: int, cfg: IntentConfig = IntentConfig(), seed: int = 0,
) -> float:
    _assert_disjoint(train_ids, test_ids)
    tr = [r for r in rows if r.speaker.speaker_id in set(train_ids)]
    te = [r for r in rows if r.speaker.speaker_id in set(test_ids)]
    model = train_intent_model([r.seqs[kind] for r in tr], [r.labels for r in tr],
                               n_labels, cfg, seed)
    preds = predict_intents(model, [r.seqs[kind] for r in te], cfg.threshold)
    return micro_f1(preds, [r.labels for r in te])


def probe_accuracy_for_split(
    rows: list[FeatureRow], kind: str, train_ids, test_ids,
    cfg: ProbeConfig = ProbeConfig(), seed: int = 0,
) -> float:
    _assert_disjoint(train_ids, test_ids)
    tr = [r for r in rows if r.speaker.speaker_id in set(train_ids)]
    te = [r for r in rows if r.speaker.speaker_id in set(test_ids)]
    _, acc = train_probe(
        np.stack([r.pooled[kind] for r in tr]),
        np.array([r.speaker.domain_label for r in tr]),
        np.stack([r.pooled[kind] for r in te]),
        np.array([r.speaker.domain_label for r in te]),
        cfg, seed,
    )
    return acc


def run_eval_suite(
    corpus: Corpus,
    spec: SplitSpec,
    input_kinds=INPUT_KINDS,
    ckpt: Checkpoint | None = None,
    n_labels: int | None = None,
    repeats: int | None = None,
    intent_cfg: IntentConfig = IntentConfig(),
    probe_cfg: ProbeConfig = ProbeConfig(),
    seed: int = 0,
) -> list[EvalReport]:
    """Run the requested protocol for each input kind over repeated seeds."""
    repeats = repeats if repeats is not None else spec.repeats
    extracted = extract_corpus(ckpt, corpus) if ckpt is not None else None
    rows = build_feature_table(corpus, extracted)
    if any(k != "fbank" for k in input_kinds) and extracted is None:
        raise ConfigurationError("latent input kinds require a checkpoint")
    reports = []
    for kind in input_kinds:
        scores = []
        per_speaker: dict[str, float] = {}
        for rep in range(repeats):
            rep_seed = seeding.derive_seed(seed, seeding.STREAM_EVAL, rep)
            if spec.mode in ("out_of_domain", "in_domain"):
                speakers = sorted(
                    {r.speaker.speaker_id: r.speaker for r in rows}.values(),
                    key=lambda s: s.speaker_id,
                )
                if spec.mode == "out_of_domain":
                    train_ids, test_ids = split_out_of_domain(speakers, spec.threshold)
                else:
                    train_ids, test_ids = split_in_domain(speakers)
                if n_labels is None:
                    raise ConfigurationError("intent protocols need n_labels")
                scores.append(intent_f1_for_split(rows, kind, train_ids, test_ids,
                                                  n_labels, intent_cfg, rep_seed))
            elif spec.mode == "kfold":
                metas = [r.speaker for r in rows]
                rng = seeding.derive_rng(seed, seeding.STREAM_EVAL, rep, 1)
                _, folds = kfold_blocks(metas, spec.n_folds, rng)
                fold_accs = []
                for train_ids, _val, test_ids in folds:
                    fold_accs.append(probe_accuracy_for_split(rows, kind, train_ids, test_ids,
                                                              probe_cfg, rep_seed))
                scores.append(float(np.mean(fold_accs)))
            else:
                raise ConfigurationError(f"unknown protocol {spec.mode!r}")
        reports.append(EvalReport(spec.mode, kind, scores, per_speaker))
    return reports


def format_report_grid(reports: list[EvalReport]) -> str:
    """Human-readable grid: one row per input kind, per-repeat columns + mean."""
    lines = ["input\tprotocol\t" + "\t".join(
        f"rep{r}" for r in range(max(len(r.per_repeat) for r in reports))) + "\tmean"]
    for r in reports:
        vals = "\t".join(f"{v:.4f}" for v in r.per_repeat)
        lines.append(f"{r.input_kind}\t{r.protocol}\t{vals}\t{r.mean:.4f}")
    return "\n".join(lines) + "\n"
