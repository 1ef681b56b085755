import numpy as np
import pytest
from sklearn.base import clone

from advfhvae.errors import ConfigurationError
from advfhvae.estimator import DisentangledSpeechEncoder


def make_data(rng, n=8, frames=22, dim=6):
    X = [rng.normal(size=(frames, dim)).astype(np.float32) for _ in range(n)]
    y = np.array([i % 2 for i in range(n)])
    return X, y


def tiny_encoder(**kw):
    base = dict(latent_dim=2, seg_len=5, rnn_units=4, batch_size=8,
                hier_sample_size=16, max_epochs=1, patience=1, seg_shift=5, seed=0)
    base.update(kw)
    return DisentangledSpeechEncoder(**base)


class TestSklearnContract:
    def test_get_params_round_trip(self):
        enc = tiny_encoder(adversarial=True, w_gen=7.0)
        params = enc.get_params()
        again = DisentangledSpeechEncoder(**params)
        assert again.get_params() == params

    def test_clone(self):
        enc = tiny_encoder(output="z2")
        c = clone(enc)
        assert c.get_params() == enc.get_params()

    def test_set_params(self):
        enc = tiny_encoder()
        enc.set_params(latent_dim=3, adversarial=True)
        assert enc.latent_dim == 3 and enc.adversarial is True


class TestFitTransform:
    def test_control_only_fit_and_output_shapes(self, rng):
        X, _ = make_data(rng)
        enc = tiny_encoder().fit(X)
        z = enc.transform(X)
        assert z.shape == (8, 4)  # z12 = 2 + 2
        assert enc.n_features_in_ == 6

    def test_output_selection(self, rng):
        X, y = make_data(rng)
        for output, dim in (("z1", 2), ("z2", 2), ("z12", 4)):
            z = tiny_encoder(output=output).fit(X, y).transform(X)
            assert z.shape == (8, dim)

    def test_adversarial_fit(self, rng):
        X, y = make_data(rng)
        enc = tiny_encoder(adversarial=True, reference=True, gen_dys_only=True)
        z = enc.fit(X, y).transform(X)
        assert np.isfinite(z).all()
        assert enc.checkpoint_.disc_state is not None

    def test_transform_before_fit(self, rng):
        from sklearn.exceptions import NotFittedError

        X, _ = make_data(rng)
        with pytest.raises(NotFittedError):
            tiny_encoder().transform(X)

    def test_bad_output_kind(self, rng):
        X, _ = make_data(rng)
        with pytest.raises(ConfigurationError):
            tiny_encoder(output="z3").fit(X)

    def test_short_utterance_rejected_at_transform(self, rng):
        X, _ = make_data(rng)
        enc = tiny_encoder().fit(X)
        with pytest.raises(ConfigurationError):
            enc.transform([np.zeros((3, 6), dtype=np.float32)])

    def test_deterministic(self, rng):
        X, y = make_data(rng)
        a = tiny_encoder(seed=4).fit(X, y).transform(X)
        b = tiny_encoder(seed=4).fit(X, y).transform(X)
        np.testing.assert_array_equal(a, b)
