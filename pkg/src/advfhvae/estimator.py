"""Scikit-learn estimator facade over the training and extraction pipeline.

``DisentangledSpeechEncoder`` is a Transformer: ``fit`` pretrains on the
control portion of the data (and optionally finetunes adversarially when
both domains are present), ``transform`` maps utterances to pooled
content/sequence vectors. X is a list of (T, D) float arrays; y is the
per-utterance domain label (0 control / 1 dysarthric) or None for
unlabeled control-only data.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import CONTROL, Corpus, SpeakerMeta, Utterance
from .errors import ConfigurationError
from .extract import extract_features
from .losses import LossFlags, LossWeights
from .model import ModelConfig, PriorConfig
from .trainer import TrainingConfig, finetune, pretrain


def _as_corpus(X, y) -> Corpus:
    utts = []
    for i, feats in enumerate(X):
        feats = np.asarray(feats, dtype=np.float32)
        if feats.ndim != 2:
            raise ConfigurationError("each X element must be a (T, D) array")
        label = int(y[i]) if y is not None else CONTROL
        spk = SpeakerMeta(f"spk{i:05d}", label, None)
        utts.append(Utterance(f"utt{i:05d}", feats, spk))
    return Corpus(utts)


class DisentangledSpeechEncoder(BaseEstimator, TransformerMixin):
    """Two-scale VAE feature extractor with optional adversarial finetuning."""

    def __init__(
        self,
        latent_dim: int = 32,
        seg_len: int = 20,
        rnn_units: int = 256,
        var_z1: float = 1.0,
        var_z2: float = 0.25,
        var_mu2: float = 1.0,
        adversarial: bool = False,
        reference: bool = False,
        gen_dys_only: bool = False,
        disentangle: bool = False,
        lr_fhvae: float = 0.001,
        lr_disc: float = 0.0002,
        batch_size: int = 500,
        max_epochs: int = 50,
        patience: int = 10,
        seg_shift: int = 8,
        hier_sample_size: int = 5000,
        w_gen: float = 500.0,
        pooled: bool = True,
        output: str = "z12",
        seed: int = 0,
    ):
        self.latent_dim = latent_dim
        self.seg_len = seg_len
        self.rnn_units = rnn_units
        self.var_z1 = var_z1
        self.var_z2 = var_z2
        self.var_mu2 = var_mu2
        self.adversarial = adversarial
        self.reference = reference
        self.gen_dys_only = gen_dys_only
        self.disentangle = disentangle
        self.lr_fhvae = lr_fhvae
        self.lr_disc = lr_disc
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seg_shift = seg_shift
        self.hier_sample_size = hier_sample_size
        self.w_gen = w_gen
        self.pooled = pooled
        self.output = output
        self.seed = seed

    def _configs(self, feat_dim: int):
        model_cfg = ModelConfig(
            feat_dim=feat_dim,
            seg_len=self.seg_len,
            latent_dim=self.latent_dim,
            rnn_units=self.rnn_units,
            priors=PriorConfig(self.var_z1, self.var_z2, self.var_mu2),
        )
        train_cfg = TrainingConfig(
            lr_fhvae=self.lr_fhvae,
            lr_disc=self.lr_disc,
            batch_size=self.batch_size,
            hier_sample_size=self.hier_sample_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seg_shift=self.seg_shift,
            seed=self.seed,
            weights=LossWeights(w_gen=self.w_gen),
            flags=LossFlags(self.adversarial, self.reference,
                            self.gen_dys_only, self.disentangle),
        )
        return model_cfg, train_cfg

    def fit(self, X, y=None):
        if self.output not in ("z1", "z2", "z12"):
            raise ConfigurationError(f"output must be z1, z2 or z12, got {self.output!r}")
        corpus = _as_corpus(X, y)
        model_cfg, train_cfg = self._configs(corpus.feat_dim)
        ckpt = pretrain(corpus.control_only(), train_cfg, model_cfg)
        if self.adversarial:
            ckpt = finetune(ckpt, corpus, train_cfg)
        self.checkpoint_ = ckpt
        self.n_features_in_ = corpus.feat_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "checkpoint_")
        model = self.checkpoint_.build_model()
        out = []
        for i, feats in enumerate(X):
            uf = extract_features(model, np.asarray(feats, dtype=np.float32), f"utt{i}")
            if uf is None:
                raise ConfigurationError(f"utterance {i} shorter than one segment")
            parts = {"z1": [uf.pooled_z1], "z2": [uf.pooled_z2],
                     "z12": [uf.pooled_z1, uf.pooled_z2]}[self.output]
            out.append(np.concatenate(parts))
        return np.stack(out)
