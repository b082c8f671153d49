"""Optimization loop: SGD with linear warmup and multistep decay, stopping
once the learning rate drops below the floor, with per-epoch checkpoints and
fully seeded batch sampling.
"""

import math
import os
import random
from dataclasses import dataclass

import numpy as np
import torch

from . import features as feats_mod
from .losses import LossWeights, MetricsLog, age_group_loss, total_loss
from .metadata import assign_age_group
from .model import AdalNet, ModelConfig, save_checkpoint


@dataclass
class TrainConfig:
    base_lr: float = 0.1
    warmup_epochs: int = 2
    decay_step: int = 10
    decay_factor: float = 0.1
    stop_lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    chunk_seconds: float = 2.0
    lambda_age: float = 0.1
    lambda_grl: float = 0.1
    max_epochs: int = None  # optional cap for toy-scale runs
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.stop_lr >= self.base_lr:
            raise ValueError("stop_lr must be below base_lr")


@dataclass
class TrainingSample:
    features: np.ndarray  # [n_mels, T]
    y_id: int
    y_age: int


def lr_at(epoch, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> base_lr over the warmup epochs, then multistep decay
    by decay_factor every decay_step epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * epoch / cfg.warmup_epochs
    steps = math.floor((epoch - cfg.warmup_epochs) / cfg.decay_step)
    return cfg.base_lr * cfg.decay_factor ** steps


def speaker_index(records):
    """Contiguous speaker id -> index mapping, sorted for stability."""
    return {spk: i for i, spk in
            enumerate(sorted({r.speaker_id for r in records}))}


class InMemoryDataset:
    """Precomputed feature matrices with labels; epoch-independent."""

    def __init__(self, samples):
        if not samples:
            raise ValueError("empty dataset")
        self.samples = list(samples)

    def __len__(self):
        return len(self.samples)

    def get(self, index, epoch):
        return self.samples[index]


class AudioCropDataset:
    """On-the-fly pipeline: WAV -> seeded crop -> optional augmentation ->
    log-Mel features. Crop and augmentation seeds derive from
    (seed, epoch, index) so parallel workers stay reproducible."""

    def __init__(self, records, segment_ages, audio_root, chunk_seconds=2.0,
                 augmentation=None, seed=0):
        if not records:
            raise ValueError("empty metadata table")
        self.records = sorted(records, key=lambda r: r.key)
        self.segment_ages = segment_ages
        self.audio_root = audio_root
        self.chunk_seconds = chunk_seconds
        self.augmentation = augmentation
        self.seed = seed
        self.spk_index = speaker_index(records)

    def __len__(self):
        return len(self.records)

    def get(self, index, epoch):
        rec = self.records[index]
        wav = feats_mod.read_wav(os.path.join(self.audio_root, rec.key + ".wav"))
        sub_seed = f"{self.seed}|{epoch}|{index}"
        wav = feats_mod.sample_training_chunk(wav, self.chunk_seconds, sub_seed)
        if self.augmentation is not None:
            wav = feats_mod.augment(wav, self.augmentation, sub_seed + "|aug")
        return TrainingSample(
            features=feats_mod.compute_logmel(wav),
            y_id=self.spk_index[rec.speaker_id],
            y_age=assign_age_group(self.segment_ages[rec.segment_key]),
        )


def epoch_batches(n_samples, batch_size, seed, epoch):
    """Index batches for one epoch: a seeded permutation covering every
    sample exactly once, sliced into batches (last may be short)."""
    order = list(range(n_samples))
    random.Random(f"{seed}|epoch{epoch}").shuffle(order)
    return [order[i:i + batch_size] for i in range(0, n_samples, batch_size)]


def build_model(config: ModelConfig, seed=0) -> AdalNet:
    torch.manual_seed(seed)
    return AdalNet(config)


def _collate(samples):
    feats = torch.tensor(np.stack([s.features for s in samples]),
                         dtype=torch.float32)
    y_id = torch.tensor([s.y_id for s in samples], dtype=torch.long)
    y_age = torch.tensor([s.y_age for s in samples], dtype=torch.long)
    return feats, y_id, y_age


def train_step(model, optimizer, feats, y_id, y_age, weights: LossWeights):
    triple, heads = model(feats, y_id)
    l_id = torch.nn.functional.cross_entropy(heads.id_logits, y_id)
    zero = torch.zeros((), dtype=l_id.dtype)
    l_age = (age_group_loss(heads.age_logits, y_age)
             if heads.age_logits is not None else zero)
    l_adv = (age_group_loss(heads.adv_age_logits, y_age)
             if heads.adv_age_logits is not None else zero)
    breakdown = total_loss(l_id, l_age, l_adv, weights)
    optimizer.zero_grad()
    breakdown.l_total.backward()
    optimizer.step()
    return breakdown


def train(model: AdalNet, dataset, cfg: TrainConfig, out_dir=None):
    """Run SGD until the scheduled learning rate falls below cfg.stop_lr
    (or max_epochs). Returns the list of per-epoch mean total losses.

    Checkpoints (one per epoch) and the step metrics log are written under
    out_dir when given. A non-finite loss aborts with the offending step."""
    torch.manual_seed(cfg.seed)
    model.train()
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.base_lr,
                                momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    weights = LossWeights(cfg.lambda_age, cfg.lambda_grl)
    log = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log = MetricsLog(os.path.join(out_dir, "metrics.csv"))

    epoch_losses = []
    step = 0
    epoch = 0
    while lr_at(epoch, cfg) >= cfg.stop_lr or epoch < cfg.warmup_epochs:
        if cfg.max_epochs is not None and epoch >= cfg.max_epochs:
            break
        batches = epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch)
        totals = []
        for b, batch in enumerate(batches):
            # warmup interpolated per step for smoothness
            lr = lr_at(epoch + b / len(batches), cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            samples = [dataset.get(i, epoch) for i in batch]
            feats, y_id, y_age = _collate(samples)
            try:
                breakdown = train_step(model, optimizer, feats, y_id, y_age,
                                       weights)
            except FloatingPointError as e:
                raise FloatingPointError(f"step {step}: {e}") from None
            totals.append(breakdown.detached()[3])
            if log is not None:
                log.append(step, breakdown, lr)
            step += 1
        epoch_losses.append(sum(totals) / len(totals))
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, f"epoch{epoch:03d}.pt"),
                            model, optimizer, step)
        epoch += 1
    return epoch_losses
