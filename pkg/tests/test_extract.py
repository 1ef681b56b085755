import numpy as np
import pytest
import torch

from advfhvae.arrayio import read_feature_file
from advfhvae.errors import DataError
from advfhvae.extract import extract_corpus, extract_features, export_features
from advfhvae.model import Fhvae, ModelConfig

TINY = ModelConfig(feat_dim=6, seg_len=5, latent_dim=2, rnn_units=4, rnn_layers=1)


@pytest.fixture
def model():
    torch.manual_seed(3)
    m = Fhvae(TINY)
    m.eval()
    return m


class TestExtractFeatures:
    def test_segment_count_shift_one(self, model, rng):
        feats = rng.normal(size=(21, 6)).astype(np.float32)
        uf = extract_features(model, feats, "u0", shift=1)
        assert uf.mu_z1.shape == (17, 2) and uf.mu_z2.shape == (17, 2)
        assert uf.pooled_z1.shape == (2,) and uf.pooled_fbank.shape == (6,)

    def test_single_segment_pooled_equals_segment(self, model, rng):
        feats = rng.normal(size=(5, 6)).astype(np.float32)
        uf = extract_features(model, feats, "u0")
        assert uf.mu_z1.shape[0] == 1
        np.testing.assert_array_equal(uf.pooled_z1, uf.mu_z1[0])
        np.testing.assert_array_equal(uf.pooled_z2, uf.mu_z2[0])

    def test_pooled_is_mean(self, model, rng):
        feats = rng.normal(size=(12, 6)).astype(np.float32)
        uf = extract_features(model, feats, "u0")
        np.testing.assert_allclose(uf.pooled_z1, uf.mu_z1.mean(axis=0), atol=1e-6)
        np.testing.assert_allclose(uf.pooled_z2, uf.mu_z2.mean(axis=0), atol=1e-6)
        np.testing.assert_allclose(uf.pooled_fbank, feats.mean(axis=0), atol=1e-6)

    def test_too_short_returns_none(self, model, rng):
        assert extract_features(model, rng.normal(size=(4, 6)).astype(np.float32)) is None

    def test_deterministic(self, model, rng):
        feats = rng.normal(size=(15, 6)).astype(np.float32)
        a = extract_features(model, feats, "u0")
        b = extract_features(model, feats, "u0")
        np.testing.assert_array_equal(a.mu_z1, b.mu_z1)
        np.testing.assert_array_equal(a.mu_z2, b.mu_z2)

    def test_shift_subsets_shift_one(self, model, rng):
        feats = rng.normal(size=(29, 6)).astype(np.float32)
        dense = extract_features(model, feats, "u0", shift=1)
        strided = extract_features(model, feats, "u0", shift=8)
        np.testing.assert_allclose(strided.mu_z1, dense.mu_z1[::8], atol=1e-6)
        np.testing.assert_allclose(strided.mu_z2, dense.mu_z2[::8], atol=1e-6)

    def test_batching_invariance(self, model, rng):
        feats = rng.normal(size=(40, 6)).astype(np.float32)
        a = extract_features(model, feats, "u0", batch_size=3)
        b = extract_features(model, feats, "u0", batch_size=512)
        np.testing.assert_allclose(a.mu_z1, b.mu_z1, atol=1e-6)


class TestExtractCorpusAndExport:
    def _corpus(self, rng, frames=(12, 4, 9)):
        from advfhvae.corpus import Corpus, SpeakerMeta, Utterance

        spk = SpeakerMeta("s0", 0, 100.0)
        return Corpus([
            Utterance(f"u{i}", rng.normal(size=(t, 6)).astype(np.float32), spk)
            for i, t in enumerate(frames)
        ])

    def _ckpt(self, model):
        from advfhvae.trainer import Checkpoint

        return Checkpoint(TINY, {k: v.detach().clone() for k, v in model.state_dict().items()},
                          {"stage": "pretrain"}, 0, 0.0)

    def test_short_utterances_skipped(self, model, rng):
        out = extract_corpus(self._ckpt(model), self._corpus(rng))
        assert [uf.utterance_id for uf in out] == ["u0", "u2"]

    def test_export_round_trip(self, model, rng, tmp_path):
        out = extract_corpus(self._ckpt(model), self._corpus(rng))
        manifest = export_features(out, tmp_path, which="both")
        lines = manifest.read_text().splitlines()
        assert len(lines) == 2
        uid, z1_name, z2_name = lines[0].split("\t")
        assert uid == "u0"
        np.testing.assert_array_equal(read_feature_file(tmp_path / z1_name), out[0].mu_z1)
        np.testing.assert_array_equal(read_feature_file(tmp_path / z2_name), out[0].mu_z2)

    def test_export_fbank_and_single_kind(self, model, rng, tmp_path):
        out = extract_corpus(self._ckpt(model), self._corpus(rng))
        m = export_features(out, tmp_path / "fb", which="fbank")
        row = m.read_text().splitlines()[0].split("\t")
        fb = read_feature_file(tmp_path / "fb" / row[1])
        np.testing.assert_array_equal(fb[0], out[0].pooled_fbank)
        m = export_features(out, tmp_path / "z2", which="z2")
        assert all(len(l.split("\t")) == 2 for l in m.read_text().splitlines())

    def test_export_empty_and_bad_kind(self, model, tmp_path):
        manifest = export_features([], tmp_path, "both")
        assert manifest.read_text() == ""
        with pytest.raises(DataError):
            export_features([], tmp_path, "z3")
