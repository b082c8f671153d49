"""Acceptance suite.

Each test prints one ``ACCEPTANCE <name>: PASS`` line on success; a failure
shows up as a normal pytest failure. Full-corpus benchmark figures are out
of scope here (they require training on a large speech corpus for days);
this suite replaces them with exact property checks plus a toy-scale
decoupling study whose direction, not magnitude, is asserted.
"""

import math
import time
from collections import Counter

import numpy as np
import pytest
import torch

from crossage import evaluation as ev
from crossage import losses
from crossage import metadata as md
from crossage import protocol as pr
from crossage import training as tr
from crossage.model import AttentiveStatsPool, ModelConfig, \
    extract_embedding
from crossage.protocol import ProtocolSpec
from crossage.training import TrainConfig

from test_evaluation import bruteforce_eer, bruteforce_min_dcf

CA_GAPS = (5, 10, 15, 20)


def ok(name):
    print(f"ACCEPTANCE {name}: PASS")


class TestScopeAcknowledgment:
    def test_full_corpus_figures_replaced_by_property_suite(self):
        """Absolute benchmark EERs from full-corpus training runs are not
        reproducible at desk scale and are deliberately not asserted
        anywhere. The stand-ins are the protocol replay and stats-trend
        checks, the metric and layer contracts, and the toy decoupling
        study below."""
        stand_ins = [n for n in globals() if n.startswith("Test")]
        assert {"TestProtocolReplay", "TestStatsTrend", "TestMetricOracles",
                "TestToyDecoupling"} <= set(stand_ins)
        ok("scope-acknowledgment")


@pytest.fixture(scope="module")
def synth_corpus():
    records = md.generate_synthetic_metadata(11, n_speakers=60)
    segment_ages = md.compute_segment_ages(records)
    return records, segment_ages


class TestProtocolReplay:
    def test_cross_age_presets_replay(self, synth_corpus):
        records, segment_ages = synth_corpus
        speaker_meta = {r.speaker_id: (r.nationality, r.gender)
                        for r in records}
        cohort_sizes = Counter(speaker_meta.values())
        t0 = time.monotonic()
        for gap in CA_GAPS:
            protocol = pr.build_preset(records, segment_ages,
                                       f"vox-ca{gap}", seed=7)
            assert len(protocol.trials) > 0
            for t in protocol.trials:
                spk_e, seg_e = t.enroll.split("/")[:2]
                spk_t, seg_t = t.test.split("/")[:2]
                if t.is_target:
                    assert spk_e == spk_t
                    assert seg_e != seg_t
                    age_gap = abs(segment_ages[(spk_e, seg_e)]
                                  - segment_ages[(spk_t, seg_t)])
                    assert age_gap >= gap
                else:
                    assert spk_e != spk_t
                    assert speaker_meta[spk_e] == speaker_meta[spk_t]
                    assert cohort_sizes[speaker_meta[spk_e]] >= 5
        elapsed = time.monotonic() - t0
        assert elapsed < 10.0
        ok(f"protocol-replay ({elapsed:.1f}s)")


class TestStatsTrend:
    def test_gap_and_speaker_count_trends(self, synth_corpus):
        records, segment_ages = synth_corpus
        gap_means, speaker_counts = [], []
        for gap in CA_GAPS:
            protocol = pr.build_preset(records, segment_ages,
                                       f"vox-ca{gap}", seed=7)
            stats = pr.protocol_stats(protocol)
            assert stats.positive_gap_mean >= gap
            gap_means.append(stats.positive_gap_mean)
            speaker_counts.append(stats.n_speakers)
        assert all(a < b for a, b in zip(gap_means, gap_means[1:]))
        assert all(a > b for a, b in zip(speaker_counts, speaker_counts[1:]))
        ok("stats-trend")


class TestMetricOracles:
    def test_eer_and_min_dcf_match_bruteforce(self):
        rng = np.random.default_rng(19)
        labels = rng.random(1000) < 0.3
        scores = rng.normal(size=1000) + labels.astype(float)
        eer, _ = ev.compute_eer(scores, labels)
        dcf, _ = ev.compute_min_dcf(scores, labels)
        assert eer == pytest.approx(bruteforce_eer(scores, labels), abs=1e-9)
        assert dcf == pytest.approx(bruteforce_min_dcf(scores, labels),
                                    abs=1e-9)
        ok("metric-oracle")

    def test_eer_invariant_under_increasing_transforms(self):
        rng = np.random.default_rng(23)
        labels = rng.random(400) < 0.4
        scores = rng.normal(size=400) + labels.astype(float)
        eer, _ = ev.compute_eer(scores, labels)
        for _ in range(100):
            a = rng.uniform(0.1, 5.0)
            b = rng.normal()
            c = rng.uniform(0.1, 2.0)
            transformed = (a * scores + b) ** 3 + c * (a * scores + b)
            assert len(np.unique(transformed)) == len(np.unique(scores))
            eer_t, _ = ev.compute_eer(transformed, labels)
            assert eer_t == pytest.approx(eer, abs=1e-9)
        ok("eer-rank-invariance")


TINY = dict(block_widths=(4, 8, 16, 32), embedding_dim=32)


class TestEmbeddingDecomposition:
    def test_identity_plus_age_reconstructs_embedding(self):
        cfg = ModelConfig(n_speakers=8, variant="adal", **TINY)
        model = tr.build_model(cfg, seed=0)
        model.eval()
        rng = np.random.default_rng(5)
        x = torch.tensor(rng.normal(size=(100, 80, 20)), dtype=torch.float32)
        with torch.no_grad():
            triple = model.embed(x)
        recon = triple.z_id + triple.z_age
        rel = (torch.norm(recon - triple.z, dim=1)
               / torch.norm(triple.z, dim=1))
        assert torch.all(rel <= 1e-6)
        ok("embedding-decomposition")


class TestAttentionNormalization:
    def test_weights_nonnegative_and_sum_to_one(self):
        torch.manual_seed(3)
        pool = AttentiveStatsPool(24)
        for scale in (0.1, 1.0, 10.0):
            frames = scale * torch.randn(6, 24, 31)
            w = pool.weights(frames)
            assert torch.all(w >= 0)
            assert torch.allclose(w.sum(dim=2), torch.ones(6, 24), atol=1e-6)
        ok("attention-normalization")


class TestGradientReversal:
    def test_reversed_gradient_matches_finite_differences(self):
        for lam in (0.0, 0.1, 1.0):
            v = torch.tensor(np.random.default_rng(7).normal(size=12),
                             requires_grad=True, dtype=torch.float64)

            def f(u):
                return (u ** 3 + 2.0 * u).sum()

            f(losses.grl(v, lam)).backward()
            eps = 1e-6
            fd = np.empty(12)
            with torch.no_grad():
                for i in range(12):
                    up, down = v.clone(), v.clone()
                    up[i] += eps
                    down[i] -= eps
                    fd[i] = (f(up) - f(down)).item() / (2 * eps)
            got = v.grad.numpy()
            assert np.allclose(got, -lam * fd, rtol=1e-4, atol=1e-10)
        ok("gradient-reversal")


class TestMarginSoftmax:
    def test_zero_margin_reduces_to_scaled_cosine(self):
        rng = np.random.default_rng(13)
        emb = torch.tensor(rng.normal(size=(16, 24)), dtype=torch.float64)
        w = torch.tensor(rng.normal(size=(10, 24)), dtype=torch.float64)
        labels = torch.arange(16) % 10
        logits = losses.arcface_logits(emb, w, labels, scale=30.0, margin=0.0)
        cos = (emb / emb.norm(dim=1, keepdim=True)) \
            @ (w / w.norm(dim=1, keepdim=True)).T
        assert torch.allclose(logits, 30.0 * cos, atol=1e-6)

    def test_target_logit_on_constructed_angles(self):
        s, m = 32.0, 0.2
        w = torch.zeros(3, 8, dtype=torch.float64)
        w[0, 0] = 1.0
        w[1, 1] = 1.0
        w[2, 2] = 1.0
        for theta in (0.3, 1.0, 2.0):
            emb = torch.zeros(1, 8, dtype=torch.float64)
            emb[0, 0] = math.cos(theta)
            emb[0, 3] = math.sin(theta)
            logits = losses.arcface_logits(emb, w, torch.tensor([0]),
                                           scale=s, margin=m)
            assert logits[0, 0].item() == pytest.approx(
                s * math.cos(theta + m), abs=1e-6)

    def test_loss_monotone_in_margin(self):
        rng = np.random.default_rng(29)
        emb = torch.tensor(rng.normal(size=(32, 16)), dtype=torch.float64)
        w = torch.tensor(rng.normal(size=(12, 16)), dtype=torch.float64)
        labels = torch.arange(32) % 12
        vals = []
        for m in (0.0, 0.1, 0.2, 0.3, 0.5):
            logits = losses.arcface_logits(emb, w, labels, scale=32.0,
                                           margin=m)
            vals.append(torch.nn.functional.cross_entropy(
                logits, labels).item())
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
        ok("margin-softmax")


class TestLearningRateSchedule:
    def test_pinned_values(self):
        cfg = TrainConfig()
        assert tr.lr_at(1, cfg) == pytest.approx(0.05, rel=1e-12)
        assert tr.lr_at(2, cfg) == pytest.approx(0.1, rel=1e-12)
        assert tr.lr_at(32, cfg) == pytest.approx(1e-4, rel=1e-9)

    def test_halts_when_lr_drops_below_floor(self):
        cfg = TrainConfig()
        assert tr.lr_at(51, cfg) == pytest.approx(1e-5, rel=1e-9)
        assert tr.lr_at(52, cfg) < cfg.stop_lr
        # fast-decay run: lr hits 1e-5 at epoch 4 and the loop must stop
        # before epoch 5 where it would fall below the floor
        fast = TrainConfig(base_lr=0.1, warmup_epochs=0, decay_step=1,
                           batch_size=4, seed=0)
        model = tr.build_model(ModelConfig(n_speakers=2, **TINY), seed=0)
        rng = np.random.default_rng(0)
        samples = [tr.TrainingSample(rng.normal(size=(80, 20)), i % 2, 1)
                   for i in range(4)]
        history = tr.train(model, tr.InMemoryDataset(samples), fast)
        assert len(history) == 5
        ok("lr-schedule")


# ---------------------------------------------------------------------------
# Toy decoupling study: 20 synthetic speakers, four age phases each, with an
# age-proportional spectral tilt injected on top of a fixed speaker template.
# The first 14 speakers are the training set; cross-age and intra-segment
# protocols are built over the 6 held-out speakers.

TOY_SPEAKERS = 20
TOY_TRAIN_SPEAKERS = 14
TOY_AGES = (18.0, 38.0, 58.0, 78.0)
TOY_FRAMES = 32
TOY_TILT = 10.0
TOY_TEMPLATE_SCALE = 1.0
TOY_NOISE = 0.8
TOY_EPOCHS = 30
TOY_SEEDS = (0, 1, 2)
TOY_WIDTHS = (8, 16, 32, 64)
TOY_EMBEDDING = 64


def build_toy_corpus(seed):
    rng = np.random.default_rng(seed)
    tilt = np.linspace(-1.0, 1.0, 80)[:, None]
    records, feats = [], {}
    for s in range(TOY_SPEAKERS):
        template = TOY_TEMPLATE_SCALE * rng.normal(size=(80, 1))
        for phase, age in enumerate(TOY_AGES):
            coef = (age - 48.0) / 30.0
            seg_age = age + rng.uniform(-1, 1)
            for u in range(3):
                rec = md.UtteranceRecord(f"spk{s:02d}", f"p{phase}", f"u{u}",
                                         seg_age, "X", "male")
                records.append(rec)
                feats[rec.key] = (template + coef * TOY_TILT * tilt
                                  + TOY_NOISE * rng.normal(
                                      size=(80, TOY_FRAMES)))
    return records, feats


def toy_embeddings(model, records, feats, which):
    keys = [r.key for r in records]
    x = torch.tensor(np.stack([feats[k] for k in keys]), dtype=torch.float32)
    out = {}
    for i in range(0, len(keys), 64):
        vecs = extract_embedding(model, x[i:i + 64], which).numpy()
        out.update(zip(keys[i:i + 64], vecs))
    return out


def train_toy_model(variant, samples, seed):
    cfg = ModelConfig(n_speakers=TOY_TRAIN_SPEAKERS, variant=variant,
                      block_widths=TOY_WIDTHS, embedding_dim=TOY_EMBEDDING,
                      arcface_scale=16.0)
    model = tr.build_model(cfg, seed=seed)
    # toy-scale settings: lower lr and stronger weight decay keep the
    # adversarial game stable on 168 samples
    tcfg = TrainConfig(base_lr=0.01, weight_decay=1e-3,
                       batch_size=32, max_epochs=TOY_EPOCHS, decay_step=20,
                       lambda_age=0.1, lambda_grl=0.15, seed=seed)
    tr.train(model, tr.InMemoryDataset(samples), tcfg)
    return model


@pytest.fixture(scope="module")
def toy_results():
    results = []
    t0 = time.monotonic()
    for seed in TOY_SEEDS:
        records, feats = build_toy_corpus(seed)
        segment_ages = md.compute_segment_ages(records)
        train_ids = {f"spk{s:02d}" for s in range(TOY_TRAIN_SPEAKERS)}
        train_recs = [r for r in records if r.speaker_id in train_ids]
        eval_recs = [r for r in records if r.speaker_id not in train_ids]
        spk_idx = tr.speaker_index(train_recs)
        samples = [tr.TrainingSample(
            feats[r.key], spk_idx[r.speaker_id],
            md.assign_age_group(segment_ages[r.segment_key]))
            for r in train_recs]
        eval_ages = {k: v for k, v in segment_ages.items()
                     if k[0] not in train_ids}
        cross_age = pr.build_protocol(eval_recs, eval_ages, ProtocolSpec(
            positive_rule="cross_age", min_gap=20.0,
            negative_rule="same_nationality_gender",
            min_speaker_max_gap=22.0, seed=seed))
        intra = pr.build_protocol(eval_recs, eval_ages, ProtocolSpec(
            positive_rule="intra_segment", seed=seed))

        baseline = train_toy_model("baseline-arcface", samples, seed)
        adal = train_toy_model("adal", samples, seed)

        groups = [md.assign_age_group(segment_ages[r.segment_key])
                  for r in records]
        e_z = toy_embeddings(adal, records, feats, "z")
        e_id = toy_embeddings(adal, records, feats, "z_id")
        e_base = toy_embeddings(baseline, records, feats, "z_id")
        probe_z = ev.age_probe(
            np.stack([e_z[r.key] for r in records]), groups, seed)
        probe_id = ev.age_probe(
            np.stack([e_id[r.key] for r in records]), groups, seed)
        held_out = [r.key for r in eval_recs]
        results.append(dict(
            seed=seed,
            probe_z=probe_z,
            probe_id=probe_id,
            eer_ca_base=ev.evaluate_protocol(
                cross_age, {k: e_base[k] for k in held_out}).eer,
            eer_ca_adal=ev.evaluate_protocol(
                cross_age, {k: e_id[k] for k in held_out}).eer,
            eer_intra_base=ev.evaluate_protocol(
                intra, {k: e_base[k] for k in held_out}).eer,
            eer_intra_adal=ev.evaluate_protocol(
                intra, {k: e_id[k] for k in held_out}).eer,
        ))
    return results, time.monotonic() - t0


class TestToyDecoupling:
    def test_runs_within_budget(self, toy_results):
        _, elapsed = toy_results
        assert elapsed < 900.0
        ok(f"toy-budget ({elapsed:.0f}s)")

    def test_age_probe_gap(self, toy_results):
        results, _ = toy_results
        gaps = [100.0 * (r["probe_z"] - r["probe_id"]) for r in results]
        mean_gap = float(np.mean(gaps))
        assert mean_gap >= 5.0, \
            f"mean probe gap {mean_gap:+.1f} points (per seed: {gaps})"
        ok(f"toy-probe-gap ({mean_gap:+.1f} points)")

    def test_cross_age_eer_not_worse_on_majority_of_seeds(self, toy_results):
        results, _ = toy_results
        wins = sum(r["eer_ca_adal"] <= r["eer_ca_base"] for r in results)
        detail = [(round(r["eer_ca_base"], 2), round(r["eer_ca_adal"], 2))
                  for r in results]
        assert wins >= 2, f"(base, adal) EER per seed: {detail}"
        ok(f"toy-eer-comparison ({wins}/3 seeds)")

    def test_intra_segment_easier_than_cross_age(self, toy_results):
        results, _ = toy_results
        for r in results:
            assert r["eer_intra_base"] < r["eer_ca_base"], r
            assert r["eer_intra_adal"] < r["eer_ca_adal"], r
        ok("intra-segment-ease")
