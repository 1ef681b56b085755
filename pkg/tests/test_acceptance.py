"""End-to-end acceptance suite.

Each test prints one machine-readable line:
    ACCEPTANCE <n> <name>: PASS|FAIL
Criteria 4-7 share one session-scoped fixture that runs the synthetic
experiment (pretrain + three finetune variants) for five seeds.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from advfhvae.corpus import SpeakerMeta
from advfhvae.losses import (
    LossFlags,
    LossWeights,
    disc_loss,
    disentangle_loss,
    gen_loss,
    kl_diag_gauss,
    lower_bound_loss,
    reference_loss,
    z2_disc_loss,
)
from advfhvae.model import Discriminator, Fhvae, ModelConfig, PriorConfig, infer_seq_mean
from advfhvae.pipeline import (
    SynthExperimentConfig,
    evaluate_checkpoint,
    finetune_variant,
    make_synth_corpus,
    pretrain_cfg_for_seed,
    sequence_identity_probe,
)
from advfhvae.trainer import (
    MetricsLog,
    build_cache,
    build_training_set,
    hierarchical_batches,
    pretrain,
    training_loss,
)

N_SEEDS = 5
MAJORITY = 4


def report(n, name, ok):
    print(f"\nACCEPTANCE {n} {name}: {'PASS' if ok else 'FAIL'}")
    assert ok, f"acceptance criterion {n} ({name}) failed"


# ---------------------------------------------------------------------------
# Criterion 1: loss terms match independent oracles within 1e-6
# ---------------------------------------------------------------------------


class TestCriterion1Losses:
    def test_loss_oracles(self):
        t0 = time.time()
        rng = np.random.default_rng(202)
        ok = True

        # hand values
        kl = float(kl_diag_gauss(torch.tensor([1.0]), torch.tensor([0.0]),
                                 torch.tensor([0.0]), torch.tensor([1.0])))
        ok &= abs(kl - 0.5) < 1e-6
        ok &= abs(float(disc_loss(torch.tensor([0.5]), torch.tensor([1.0])))
                  - math.log(2.0)) < 1e-6
        a = torch.tensor([[1.0], [2.0], [3.0]])
        ok &= abs(float(disentangle_loss(a, a.clone())) - 1.0) < 1e-6

        # straight-line oracles on random instances
        def o_kl(mq, lvq, mp, vp):
            vq = np.exp(lvq)
            return 0.5 * np.sum(np.log(vp) - lvq + (vq + (mq - mp) ** 2) / vp - 1.0, -1)

        for _ in range(20):
            mq, lvq, mp = (rng.normal(size=4) for _ in range(3))
            vp = np.exp(rng.normal(size=4))
            got = float(kl_diag_gauss(*(torch.as_tensor(v) for v in (mq, lvq, mp, vp))))
            ok &= abs(got - o_kl(mq, lvq, mp, vp)) < 1e-6

            p = rng.uniform(1e-3, 1 - 1e-3, size=6)
            lbl = rng.integers(0, 2, size=6).astype(float)
            bce = np.mean(-(lbl * np.log(p) + (1 - lbl) * np.log(1 - p)))
            ok &= abs(float(disc_loss(torch.as_tensor(p), torch.as_tensor(lbl))) - bce) < 1e-6
            gd = np.mean(-lbl * np.log(1 - p))
            ok &= abs(float(gen_loss(torch.as_tensor(p), torch.as_tensor(lbl),
                                     "dys_only")) - gd) < 1e-6

            mu_n, lv_n, mu_f, lv_f = (rng.normal(size=(5, 3)) for _ in range(4))
            lbls = rng.integers(0, 2, size=5)
            want = np.mean(o_kl(mu_f, lv_f, mu_n, np.exp(lv_n)) * (lbls == 0))
            got = float(reference_loss(
                (torch.as_tensor(mu_n), torch.as_tensor(lv_n)),
                (torch.as_tensor(mu_f), torch.as_tensor(lv_f)), torch.as_tensor(lbls)))
            ok &= abs(got - want) < 1e-6

            x, rm, rl = (rng.normal(size=(3, 4, 5)) for _ in range(3))
            mu1, lv1, mu2, lv2, mu2t = (rng.normal(size=(3, 2)) for _ in range(5))
            n = rng.integers(1, 10, size=3).astype(float)
            priors = PriorConfig(1.0, 0.25, 1.0)
            want = 0.0
            for b in range(3):
                ll = np.sum(-0.5 * (np.log(2 * np.pi) + rl[b] + (x[b] - rm[b]) ** 2 / np.exp(rl[b])))
                kl1 = o_kl(mu1[b], lv1[b], np.zeros(2), np.full(2, priors.var_z1))
                kl2 = o_kl(mu2[b], lv2[b], mu2t[b], np.full(2, priors.var_z2))
                lpm = -0.5 * (2 * np.log(2 * np.pi * priors.var_mu2)
                              + np.sum(mu2t[b] ** 2) / priors.var_mu2)
                want += -(ll - kl1 - kl2 + lpm / n[b]) / 3
            got = float(lower_bound_loss(
                torch.as_tensor(x), torch.as_tensor(rm), torch.as_tensor(rl),
                (torch.as_tensor(mu1), torch.as_tensor(lv1)),
                (torch.as_tensor(mu2), torch.as_tensor(lv2)),
                torch.as_tensor(mu2t), priors, torch.as_tensor(n)))
            ok &= abs(got - want) < 1e-6 * max(1.0, abs(want))

            table = rng.normal(size=(4, 2))
            z2 = rng.normal(size=(3, 2))
            own = rng.integers(0, 4, size=3)
            logits = -((z2[:, None, :] - table[None]) ** 2).sum(-1) / (2 * priors.var_z2)
            shifted = logits - logits.max(axis=1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            want = float(np.mean([-logp[i, own[i]] for i in range(3)]))
            got = float(z2_disc_loss(torch.as_tensor(z2), torch.as_tensor(own),
                                     torch.as_tensor(table), priors))
            ok &= abs(got - want) < 1e-6

            m1 = rng.normal(size=(8, 3))
            m2 = rng.normal(size=(8, 3))
            c1 = m1 - m1.mean(0)
            c2 = m2 - m2.mean(0)
            corr = (c1.T @ c2) / np.outer(np.sqrt((c1**2).sum(0)), np.sqrt((c2**2).sum(0)))
            got = float(disentangle_loss(torch.as_tensor(m1), torch.as_tensor(m2)))
            ok &= abs(got - float((corr**2).sum())) < 1e-6

        ok &= (time.time() - t0) < 10.0
        report(1, "loss_oracles", ok)


# ---------------------------------------------------------------------------
# Criterion 2: sequence-mean inference oracle
# ---------------------------------------------------------------------------


class TestCriterion2SeqMean:
    def test_seq_mean_oracle(self):
        priors = PriorConfig(var_z1=1.0, var_z2=0.25, var_mu2=1.0)
        means = torch.tensor([[1.0], [3.0]], dtype=torch.float64)
        got = float(infer_seq_mean(means, priors))
        want = (1.0 + 3.0) / (2 + 0.25 / 1.0)  # = 1.7778
        ok = abs(got - want) < 1e-6 and abs(want - 1.7778) < 1e-4

        # random instances vs the same closed form computed independently
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(1, 12))
            m = rng.normal(size=(n, 3))
            v2, vm = np.exp(rng.normal(size=2))
            p = PriorConfig(1.0, float(v2), float(vm))
            got = infer_seq_mean(torch.as_tensor(m), p).numpy()
            want = m.sum(axis=0) / (n + v2 / vm)
            ok &= np.allclose(got, want, atol=1e-9)
        report(2, "sequence_mean_inference", ok)


# ---------------------------------------------------------------------------
# Criterion 3: gradient check of the full objective on a miniature model
# ---------------------------------------------------------------------------


class TestCriterion3Gradients:
    def test_total_objective_gradients(self):
        t0 = time.time()
        torch.manual_seed(5)
        cfg = ModelConfig(feat_dim=4, seg_len=5, latent_dim=2, rnn_units=4,
                          rnn_layers=1, disc_hidden=4)
        model = Fhvae(cfg).to(torch.float64)
        disc = Discriminator(cfg.latent_dim, cfg.disc_hidden).to(torch.float64)
        frozen = Fhvae(cfg).to(torch.float64)
        for p in frozen.parameters():
            p.requires_grad_(False)

        rng = np.random.default_rng(12)
        b = 4
        batch = {
            "x": torch.as_tensor(rng.normal(size=(b, cfg.seg_len, cfg.feat_dim))),
            "seq_pos": torch.tensor([0, 1, 0, 1]),
            "domain": torch.tensor([0, 1, 0, 1]),
            "n_segments": torch.tensor([2.0, 2.0, 2.0, 2.0], dtype=torch.float64),
        }
        mu2_table = torch.as_tensor(rng.normal(size=(2, cfg.latent_dim)))
        noise_z1 = torch.as_tensor(rng.normal(size=(b, cfg.latent_dim)))
        noise_z2 = torch.as_tensor(rng.normal(size=(b, cfg.latent_dim)))
        weights = LossWeights()
        flags = LossFlags(adversarial=True, reference=True,
                          gen_dys_only=True, disentangle=True)

        def objective():
            total, _, _ = training_loss(model, batch, mu2_table, weights, flags,
                                        disc=disc, frozen=frozen,
                                        noise_z1=noise_z1, noise_z2=noise_z2)
            return total

        params = [p for p in model.parameters() if p.requires_grad]
        total = objective()
        grads = torch.autograd.grad(total, params, allow_unused=True)

        ok = True
        checked = 0
        prng = np.random.default_rng(99)
        for p, g in zip(params, grads):
            if g is None:
                continue
            flat = p.data.view(-1)
            gflat = g.view(-1)
            for i in prng.choice(flat.numel(), size=min(4, flat.numel()), replace=False):
                eps = 1e-5 * max(1.0, abs(float(flat[i])))
                orig = float(flat[i])
                flat[i] = orig + eps
                hi = float(objective().detach())
                flat[i] = orig - eps
                lo = float(objective().detach())
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                an = float(gflat[i])
                ok &= abs(fd - an) <= 1e-3 * max(1.0, abs(fd), abs(an))
                checked += 1
        ok &= checked >= 50
        ok &= (time.time() - t0) < 120.0
        report(3, "full_objective_gradients", ok)


# ---------------------------------------------------------------------------
# Criteria 4-7: synthetic experiment over five seeds (shared fixture)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def synth_results():
    cfg = SynthExperimentConfig()
    out = {"runs": [], "t_pretrain": 0.0, "t_finetune": 0.0}
    for seed in range(N_SEEDS):
        corpus = make_synth_corpus(cfg, seed)
        t0 = time.time()
        pre = pretrain(corpus.control_only(), pretrain_cfg_for_seed(cfg, seed), cfg.model)
        out["t_pretrain"] += time.time() - t0
        seq_z1, seq_z2 = sequence_identity_probe(pre, corpus, cfg, seed)
        run = {"seq_z1": seq_z1, "seq_z2": seq_z2}
        for name in ("finetuned", "adv_ref_dys", "adv_ref_dys_dstg"):
            t0 = time.time()
            ckpt = finetune_variant(pre, corpus, cfg, name, seed)
            out["t_finetune"] += time.time() - t0
            run[name] = evaluate_checkpoint(ckpt, corpus, cfg, seed)
        out["runs"].append(run)
    return out


def majority(runs, cond):
    return sum(1 for r in runs if cond(r)) >= MAJORITY


class TestCriterion4SequenceProbe:
    def test_z2_encodes_sequence_identity(self, synth_results):
        runs = synth_results["runs"]
        ok = majority(runs, lambda r: r["seq_z2"] - r["seq_z1"] >= 0.10)
        ok &= synth_results["t_pretrain"] < 600.0
        for r in runs:
            print(f"  seq probe z1={r['seq_z1']:.3f} z2={r['seq_z2']:.3f}")
        report(4, "sequence_probe_gap", ok)


class TestCriterion5DomainInvariance:
    def test_adversarial_reduces_z1_domain_probe(self, synth_results):
        runs = synth_results["runs"]

        def cond(r):
            z1_drop = r["finetuned"].probe_acc["z1"] - r["adv_ref_dys"].probe_acc["z1"]
            z2_keeps = r["adv_ref_dys"].probe_acc["z2"] >= r["finetuned"].probe_acc["z2"]
            return z1_drop >= 0.05 and z2_keeps

        for r in runs:
            print(f"  z1 plain={r['finetuned'].probe_acc['z1']:.3f} "
                  f"adv={r['adv_ref_dys'].probe_acc['z1']:.3f} | "
                  f"z2 plain={r['finetuned'].probe_acc['z2']:.3f} "
                  f"adv={r['adv_ref_dys'].probe_acc['z2']:.3f}")
        ok = majority(runs, cond)
        ok &= synth_results["t_finetune"] < 900.0
        report(5, "adversarial_domain_invariance", ok)


class TestCriterion6OodIntent:
    def test_ood_f1_improves_without_indomain_collapse(self, synth_results):
        runs = synth_results["runs"]

        def cond(r):
            ood_gain = r["adv_ref_dys"].ood_f1 > r["finetuned"].ood_f1
            ind_ok = r["finetuned"].indomain_f1 - r["adv_ref_dys"].indomain_f1 <= 0.02
            return ood_gain and ind_ok

        for r in runs:
            print(f"  ood plain={r['finetuned'].ood_f1:.3f} adv={r['adv_ref_dys'].ood_f1:.3f} | "
                  f"ind plain={r['finetuned'].indomain_f1:.3f} adv={r['adv_ref_dys'].indomain_f1:.3f}")
        report(6, "ood_intent_f1", majority(runs, cond))


class TestCriterion7Disentangle:
    def test_disentangle_halves_crosscorr(self, synth_results):
        runs = synth_results["runs"]

        def cond(r):
            halved = r["adv_ref_dys_dstg"].crosscorr <= 0.5 * r["adv_ref_dys"].crosscorr
            probe_down = (r["adv_ref_dys_dstg"].probe_acc["z1"]
                          < r["adv_ref_dys"].probe_acc["z1"])
            return halved and probe_down

        for r in runs:
            print(f"  xcorr adv={r['adv_ref_dys'].crosscorr:.2f} "
                  f"dstg={r['adv_ref_dys_dstg'].crosscorr:.2f} | "
                  f"z1 adv={r['adv_ref_dys'].probe_acc['z1']:.3f} "
                  f"dstg={r['adv_ref_dys_dstg'].probe_acc['z1']:.3f}")
        report(7, "disentangle_crosscorr", majority(runs, cond))


# ---------------------------------------------------------------------------
# Criterion 8: evaluation-harness property suites
# ---------------------------------------------------------------------------


class TestCriterion8EvalProperties:
    def test_eval_harness_properties(self):
        from advfhvae.evalharness import kfold_blocks, micro_f1, split_in_domain, split_out_of_domain
        from advfhvae.errors import ConfigurationError

        t0 = time.time()
        ok = True

        # hand value: TP=2 FP=0 FN=1 -> F1 = 0.8
        ok &= abs(micro_f1([frozenset({0}), frozenset({1})],
                           [frozenset({0}), frozenset({1, 2})]) - 0.8) < 1e-12

        @given(st.lists(st.floats(0.0, 100.0), min_size=2, max_size=50),
               st.floats(10.0, 90.0))
        @settings(max_examples=60, deadline=None)
        def split_props(intels, threshold):
            speakers = [SpeakerMeta(f"s{i:02d}", 1, v) for i, v in enumerate(intels)]
            try:
                train, test = split_out_of_domain(speakers, threshold)
            except ConfigurationError:
                assert all(v >= threshold for v in intels) or all(v < threshold for v in intels)
            else:
                assert sorted(train + test) == sorted(s.speaker_id for s in speakers)
                ids = {s.speaker_id: s for s in speakers}
                assert all(ids[t].intelligibility >= threshold for t in train)
                assert all(ids[t].intelligibility < threshold for t in test)
            train, test = split_in_domain(speakers)
            assert sorted(train + test) == sorted(s.speaker_id for s in speakers)
            assert abs(len(train) - len(test)) <= 1

        @given(st.integers(6, 25), st.integers(6, 25), st.integers(1, 4),
               st.integers(0, 10_000))
        @settings(max_examples=40, deadline=None)
        def kfold_props(n_control, n_dys, utts_per, rseed):
            metas = []
            for i in range(n_control):
                metas += [SpeakerMeta(f"c{i}", 0, 100.0)] * utts_per
            for i in range(n_dys):
                metas += [SpeakerMeta(f"d{i}", 1, 40.0)] * utts_per
            blocks, folds = kfold_blocks(metas, 6, np.random.default_rng(rseed))
            all_ids = {m.speaker_id for m in metas}
            assert set().union(*blocks) == all_ids
            assert sum(len(b) for b in blocks) == len(all_ids)
            tested = [sid for _, _, test in folds for sid in test]
            assert sorted(tested) == sorted(all_ids)
            for train, val, test in folds:
                assert not (set(train) & set(test)) and not (set(val) & set(test))

        @given(st.lists(st.tuples(st.frozensets(st.integers(0, 9), max_size=5),
                                  st.frozensets(st.integers(0, 9), max_size=5)),
                        min_size=1, max_size=50))
        @settings(max_examples=60, deadline=None)
        def f1_props(pairs):
            pred = [p for p, _ in pairs]
            truth = [t for _, t in pairs]
            v = micro_f1(pred, truth)
            assert 0.0 <= v <= 1.0
            assert micro_f1(truth, truth) == 1.0
            assert micro_f1(list(reversed(pred)), list(reversed(truth))) == v

        split_props()
        kfold_props()
        f1_props()
        ok &= (time.time() - t0) < 30.0
        report(8, "eval_harness_properties", ok)


# ---------------------------------------------------------------------------
# Criterion 9: bitwise-reproducible metrics logs
# ---------------------------------------------------------------------------


class TestCriterion9Determinism:
    def test_metrics_logs_bitwise_identical(self, tmp_path):
        torch.set_num_threads(1)
        cfg = SynthExperimentConfig(
            synth=replace(SynthExperimentConfig().synth, n_sequences=24,
                          segments_per_sequence=2, n_speakers=8),
            pretrain_cfg=replace(SynthExperimentConfig().pretrain_cfg,
                                 max_epochs=2, patience=2, batch_size=32,
                                 hier_sample_size=64),
        )
        corpus = make_synth_corpus(cfg, 0)
        logs = []
        for tag in ("a", "b"):
            path = tmp_path / f"metrics_{tag}.tsv"
            pretrain(corpus.control_only(), pretrain_cfg_for_seed(cfg, 0),
                     cfg.model, metrics=MetricsLog(path))
            logs.append(path.read_bytes())
        ok = logs[0] == logs[1] and len(logs[0]) > 0
        report(9, "bitwise_metrics_logs", ok)
