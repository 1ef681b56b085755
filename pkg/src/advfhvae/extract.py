"""Run trained encoders over utterances to produce downstream features."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .arrayio import write_feature_file
from .corpus import Corpus
from .errors import DataError
from .model import Fhvae
from .trainer import Checkpoint

log = logging.getLogger(__name__)


@dataclass
class UtteranceFeatures:
    utterance_id: str
    mu_z1: np.ndarray  # (S, latent)
    mu_z2: np.ndarray  # (S, latent)
    pooled_z1: np.ndarray
    pooled_z2: np.ndarray
    pooled_fbank: np.ndarray


def extract_features(model: Fhvae, features: np.ndarray, utterance_id: str = "",
                     shift: int = 1, batch_size: int = 512) -> UtteranceFeatures | None:
    """Posterior-mean features per segment; z1 conditioned on the z2 mean.

    Returns None (with a warning) for utterances shorter than one segment.
    """
    seg_len = model.cfg.seg_len
    t = features.shape[0]
    if t < seg_len:
        log.warning("utterance %s has %d frames < %d; skipped", utterance_id, t, seg_len)
        return None
    offsets = range(0, t - seg_len + 1, shift)
    segs = np.stack([features[o : o + seg_len] for o in offsets]).astype(np.float32)
    dtype = next(model.parameters()).dtype
    mu1_rows, mu2_rows = [], []
    with torch.no_grad():
        for start in range(0, segs.shape[0], batch_size):
            x = torch.as_tensor(segs[start : start + batch_size], dtype=dtype)
            mu2, _ = model.encode_z2(x)
            mu1, _ = model.encode_z1(x, mu2)
            mu1_rows.append(mu1.numpy())
            mu2_rows.append(mu2.numpy())
    mu1 = np.concatenate(mu1_rows).astype(np.float32)
    mu2 = np.concatenate(mu2_rows).astype(np.float32)
    return UtteranceFeatures(
        utterance_id=utterance_id,
        mu_z1=mu1,
        mu_z2=mu2,
        pooled_z1=mu1.mean(axis=0),
        pooled_z2=mu2.mean(axis=0),
        pooled_fbank=features.mean(axis=0).astype(np.float32),
    )


def extract_corpus(ckpt: Checkpoint, corpus: Corpus, shift: int = 1) -> list[UtteranceFeatures]:
    model = ckpt.build_model()
    out = []
    for utt in corpus:
        feats = extract_features(model, utt.features, utt.utterance_id, shift)
        if feats is not None:
            out.append(feats)
    return out


def export_features(features: list[UtteranceFeatures], out_dir, which: str = "both") -> Path:
    """Write per-utterance feature files plus a produced-files manifest.

    ``which`` selects z1, z2, both or fbank. Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kinds = {"z1": ["mu_z1"], "z2": ["mu_z2"], "both": ["mu_z1", "mu_z2"], "fbank": []}
    if which not in kinds:
        raise DataError(f"unknown feature selection {which!r}")
    rows = []
    for uf in features:
        names = []
        for attr in kinds[which]:
            name = f"{uf.utterance_id}.{attr.removeprefix('mu_')}.fea"
            write_feature_file(out_dir / name, getattr(uf, attr))
            names.append(name)
        if which == "fbank":
            name = f"{uf.utterance_id}.fbank.fea"
            write_feature_file(out_dir / name, uf.pooled_fbank[None, :])
            names.append(name)
        rows.append(uf.utterance_id + "\t" + "\t".join(names))
    manifest = out_dir / "extracted.tsv"
    manifest.write_text("\n".join(rows) + ("\n" if rows else ""))
    return manifest
