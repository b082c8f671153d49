import numpy as np
import pytest
import torch

from crossage import features as ft
from crossage import metadata as md
from crossage import training as tr
from crossage.model import ModelConfig

TINY_WIDTHS = (4, 8, 16, 32)


def toy_samples(n_speakers=4, per_speaker=4, frames=32, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for spk in range(n_speakers):
        base = rng.normal(size=(80, 1))
        for _ in range(per_speaker):
            feats = base + 0.1 * rng.normal(size=(80, frames))
            samples.append(tr.TrainingSample(feats, spk, spk % 7))
    return samples


def tiny_model(variant="adal", n_speakers=4, seed=0):
    cfg = ModelConfig(n_speakers=n_speakers, variant=variant,
                      block_widths=TINY_WIDTHS, embedding_dim=32)
    return tr.build_model(cfg, seed=seed)


class TestLrSchedule:
    def test_warmup_midpoint(self):
        assert tr.lr_at(1.0, tr.TrainConfig()) == pytest.approx(0.05)

    def test_warmup_endpoint(self):
        assert tr.lr_at(2.0, tr.TrainConfig()) == pytest.approx(0.1)

    def test_decay_at_epoch_32(self):
        assert tr.lr_at(32, tr.TrainConfig()) == pytest.approx(1e-4)

    def test_continuous_at_boundary(self):
        cfg = tr.TrainConfig()
        assert tr.lr_at(2.0 - 1e-9, cfg) == pytest.approx(tr.lr_at(2.0, cfg))

    def test_non_increasing_after_warmup(self):
        cfg = tr.TrainConfig()
        lrs = [tr.lr_at(e, cfg) for e in np.linspace(2, 60, 200)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            tr.lr_at(-1, tr.TrainConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(decay_factor=1.5)
        with pytest.raises(ValueError):
            tr.TrainConfig(stop_lr=0.2)


class TestBatches:
    def test_batch_sizes(self):
        batches = tr.epoch_batches(24, 8, seed=0, epoch=0)
        assert all(len(b) == 8 for b in batches)

    def test_permutation_covers_everything_once(self):
        batches = tr.epoch_batches(17, 4, seed=1, epoch=2)
        flat = [i for b in batches for i in b]
        assert sorted(flat) == list(range(17))

    def test_deterministic_per_epoch(self):
        assert tr.epoch_batches(10, 3, 5, 1) == tr.epoch_batches(10, 3, 5, 1)
        assert tr.epoch_batches(10, 3, 5, 1) != tr.epoch_batches(10, 3, 5, 2)


class TestAudioCropDataset:
    @pytest.fixture
    def audio_tree(self, tmp_path):
        records = []
        rng = np.random.default_rng(0)
        for spk in range(2):
            for seg in range(2):
                rec = md.UtteranceRecord(f"spk{spk}", f"seg{seg}", "utt0",
                                         30.0 + 25.0 * seg, "USA", "male")
                records.append(rec)
                path = tmp_path / "audio" / rec.key
                path.parent.mkdir(parents=True, exist_ok=True)
                w = ft.Waveform(0.1 * rng.standard_normal(3 * ft.SAMPLE_RATE))
                ft.write_wav(str(path) + ".wav", w)
        return records, tmp_path / "audio"

    def test_labels_match_independent_recomputation(self, audio_tree):
        records, root = audio_tree
        segages = md.compute_segment_ages(records)
        ds = tr.AudioCropDataset(records, segages, str(root),
                                 chunk_seconds=2.0, seed=3)
        for i in range(len(ds)):
            sample = ds.get(i, epoch=0)
            rec = ds.records[i]
            assert sample.y_age == md.assign_age_group(segages[rec.segment_key])
            assert sample.y_id == ds.spk_index[rec.speaker_id]
            assert sample.features.shape == (80, 198)

    def test_deterministic_given_seed(self, audio_tree):
        records, root = audio_tree
        segages = md.compute_segment_ages(records)
        ds = tr.AudioCropDataset(records, segages, str(root), seed=3)
        a = ds.get(0, epoch=1)
        b = ds.get(0, epoch=1)
        c = ds.get(0, epoch=2)
        assert np.array_equal(a.features, b.features)
        assert not np.array_equal(a.features, c.features)


class TestTrain:
    def test_two_runs_identical_metrics(self, tmp_path):
        cfg = tr.TrainConfig(batch_size=8, max_epochs=2, seed=11)
        ds = tr.InMemoryDataset(toy_samples())
        tr.train(tiny_model(seed=1), ds, cfg, out_dir=tmp_path / "a")
        tr.train(tiny_model(seed=1), ds, cfg, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
               (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_zero_weights_match_baseline_trainer(self, tmp_path):
        # a model without age branches trains identically whatever the weights
        ds = tr.InMemoryDataset(toy_samples())
        cfg_a = tr.TrainConfig(batch_size=8, max_epochs=2, seed=2,
                               lambda_age=0.0, lambda_grl=0.0)
        cfg_b = tr.TrainConfig(batch_size=8, max_epochs=2, seed=2)
        la = tr.train(tiny_model("baseline-arcface", seed=3), ds, cfg_a)
        lb = tr.train(tiny_model("baseline-arcface", seed=3), ds, cfg_b)
        assert la == lb

    def test_checkpoints_written_per_epoch(self, tmp_path):
        cfg = tr.TrainConfig(batch_size=8, max_epochs=3, seed=0)
        tr.train(tiny_model(), tr.InMemoryDataset(toy_samples()), cfg,
                 out_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.glob("epoch*.pt"))
        assert names == ["epoch000.pt", "epoch001.pt", "epoch002.pt"]

    def test_halts_when_lr_below_floor(self):
        # decay every epoch from 0.1: lr < 1e-3 first at epoch 5
        cfg = tr.TrainConfig(decay_step=1, stop_lr=1e-3, batch_size=16, seed=0)
        losses = tr.train(tiny_model(), tr.InMemoryDataset(toy_samples()), cfg)
        assert len(losses) == 5

    def test_zero_lr_step_keeps_parameters(self):
        model = tiny_model()
        before = {k: v.clone() for k, v in model.state_dict().items()
                  if v.dtype.is_floating_point}
        opt = torch.optim.SGD(model.parameters(), lr=0.0, momentum=0.9,
                              weight_decay=1e-4)
        samples = toy_samples()[:8]
        feats = torch.tensor(np.stack([s.features for s in samples]),
                             dtype=torch.float32)
        y_id = torch.tensor([s.y_id for s in samples])
        y_age = torch.tensor([s.y_age for s in samples])
        model.train()
        from crossage.losses import LossWeights
        tr.train_step(model, opt, feats, y_id, y_age, LossWeights())
        after = model.state_dict()
        for k, v in before.items():
            if "running" in k or "num_batches" in k:
                continue  # batchnorm statistics update in forward, not SGD
            assert torch.equal(v, after[k]), k

    def test_speaker_index_contiguous_sorted(self):
        records = md.generate_synthetic_metadata(1, 8)
        idx = tr.speaker_index(records)
        assert sorted(idx.values()) == list(range(8))
        assert list(idx) == sorted(idx)
