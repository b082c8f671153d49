"""Speaker embedding network: ResNet34 trunk, global statistics pooling for
the full embedding z, and an attention-based age-related extractor producing
z_age, with the identity residual z_id = z - z_age.

Variants (selected by ``ModelConfig.variant``):
  baseline-softmax / baseline-arcface: trunk + GSP + FC only (z_id == z)
  grl:          adversarial age head on z, no decomposition
  age-residual: z_age predicted from z by a linear layer
  are:          z_age extracted from the feature map, no adversarial head
  adal:         are + adversarial age head on z_id
"""

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import ArcFaceHead, GradientReversal
from .metadata import N_AGE_GROUPS

VARIANTS = ("baseline-softmax", "baseline-arcface", "grl", "age-residual",
            "are", "adal")

MIN_FRAMES = 16


@dataclass
class ModelConfig:
    n_speakers: int
    variant: str = "adal"
    block_widths: tuple = (32, 64, 128, 256)
    embedding_dim: int = 128
    n_age_groups: int = N_AGE_GROUPS
    n_mels: int = 80
    arcface_scale: float = 64.0
    arcface_margin: float = 0.2
    attention_hidden: int = 128
    age_head_hidden: int = 128

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")
        if self.n_age_groups != N_AGE_GROUPS:
            raise ValueError(f"n_age_groups must be {N_AGE_GROUPS}")

    @property
    def uses_margin(self) -> bool:
        return self.variant != "baseline-softmax"

    @property
    def has_age_branch(self) -> bool:
        return self.variant in ("age-residual", "are", "adal")

    @property
    def has_adversarial_head(self) -> bool:
        return self.variant in ("grl", "adal")


@dataclass
class EmbeddingTriple:
    z: torch.Tensor
    z_age: torch.Tensor
    z_id: torch.Tensor


@dataclass
class HeadOutputs:
    id_logits: torch.Tensor
    age_logits: torch.Tensor = None
    adv_age_logits: torch.Tensor = None


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1,
                               bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet34Trunk(nn.Module):
    """ResNet34: initial 3x3 stride-1 conv, stages of [3, 4, 6, 3] blocks,
    stride-2 downsampling at stages 2-4 (stride 8 overall)."""

    def __init__(self, widths=(32, 64, 128, 256)):
        super().__init__()
        self.widths = tuple(widths)
        self.conv1 = nn.Conv2d(1, widths[0], 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(widths[0])
        blocks_per_stage = (3, 4, 6, 3)
        stages = []
        in_ch = widths[0]
        for i, (w, n_blocks) in enumerate(zip(widths, blocks_per_stage)):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(in_ch, w, stride)]
            blocks += [BasicBlock(w, w) for _ in range(n_blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = w
        self.stages = nn.Sequential(*stages)

    def forward(self, feats):
        """feats: [B, n_mels, T] -> feature map [B, c, f, t]."""
        if feats.dim() == 2:
            feats = feats.unsqueeze(0)
        if feats.size(-1) < MIN_FRAMES:
            raise ValueError(f"input needs at least {MIN_FRAMES} frames, "
                             f"got {feats.size(-1)}")
        x = feats.unsqueeze(1)  # [B, 1, F, T]
        x = F.relu(self.bn1(self.conv1(x)))
        return self.stages(x)


def gsp_pool(x):
    """Global statistics pooling: per-channel mean and std over the flattened
    frequency-time axes. [B, c, f, t] -> [B, 2c]."""
    flat = x.flatten(2)  # [B, c, f*t]
    mean = flat.mean(dim=2)
    std = torch.sqrt(flat.var(dim=2, unbiased=False).clamp(min=1e-10))
    return torch.cat([mean, std], dim=1)


class AttentiveStatsPool(nn.Module):
    """Attention over time on channel-flattened frames; weighted mean and
    std concatenated. Weights are softmax-normalized over the time axis."""

    def __init__(self, in_dim, hidden=128):
        super().__init__()
        self.attention = nn.Sequential(
            nn.Conv1d(in_dim, hidden, 1),
            nn.Tanh(),
            nn.Conv1d(hidden, in_dim, 1),
        )

    def weights(self, frames):
        """frames: [B, D, t] -> attention weights [B, D, t], sum to 1 over t."""
        return torch.softmax(self.attention(frames), dim=2)

    def forward(self, frames):
        w = self.weights(frames)
        mean = (frames * w).sum(dim=2)
        var = ((frames ** 2) * w).sum(dim=2) - mean ** 2
        std = torch.sqrt(var.clamp(min=1e-10))
        return torch.cat([mean, std], dim=1)


class AgeRelatedExtractor(nn.Module):
    """Extracts the age component from the trunk's feature map via attentive
    statistics pooling followed by a linear projection."""

    def __init__(self, channels, freq_bins, embedding_dim, hidden=128):
        super().__init__()
        self.in_dim = channels * freq_bins
        self.pool = AttentiveStatsPool(self.in_dim, hidden)
        self.fc = nn.Linear(2 * self.in_dim, embedding_dim)

    def frames(self, x):
        """[B, c, f, t] -> channel-flattened frame vectors [B, c*f, t]."""
        b, c, f, t = x.shape
        return x.reshape(b, c * f, t)

    def forward(self, x):
        return self.fc(self.pool(self.frames(x)))


class AgeGroupHead(nn.Module):
    """FC-ReLU-FC classifier over the 7 age groups."""

    def __init__(self, in_dim, n_groups=N_AGE_GROUPS, hidden=128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, n_groups))

    def forward(self, v):
        return self.net(v)


class AdalNet(nn.Module):
    """Full network: trunk, embedding branches, and classification heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.trunk = ResNet34Trunk(config.block_widths)
        channels = config.block_widths[-1]
        freq_bins = config.n_mels // 8
        self.embed_fc = nn.Linear(2 * channels, config.embedding_dim)
        if config.variant in ("are", "adal"):
            self.are = AgeRelatedExtractor(channels, freq_bins,
                                           config.embedding_dim,
                                           config.attention_hidden)
        elif config.variant == "age-residual":
            self.age_fc = nn.Linear(config.embedding_dim, config.embedding_dim)
        self.id_head = ArcFaceHead(
            config.embedding_dim, config.n_speakers,
            scale=config.arcface_scale,
            margin=config.arcface_margin if config.uses_margin else 0.0)
        if config.has_age_branch:
            self.age_head = AgeGroupHead(config.embedding_dim,
                                         config.n_age_groups,
                                         config.age_head_hidden)
        if config.has_adversarial_head:
            self.grl = GradientReversal(1.0)
            self.adv_head = AgeGroupHead(config.embedding_dim,
                                         config.n_age_groups,
                                         config.age_head_hidden)

    def embed(self, feats) -> EmbeddingTriple:
        """Single trunk pass shared by the z and z_age branches."""
        x = self.trunk(feats)
        z = self.embed_fc(gsp_pool(x))
        if self.config.variant in ("are", "adal"):
            z_age = self.are(x)
        elif self.config.variant == "age-residual":
            z_age = self.age_fc(z)
        else:
            z_age = torch.zeros_like(z)
        return EmbeddingTriple(z=z, z_age=z_age, z_id=z - z_age)

    def heads_forward(self, triple: EmbeddingTriple, labels=None) -> HeadOutputs:
        """Margin is inserted only when identity labels are supplied."""
        adv_input = triple.z if self.config.variant == "grl" else triple.z_id
        return HeadOutputs(
            id_logits=self.id_head(triple.z_id, labels),
            age_logits=(self.age_head(triple.z_age)
                        if self.config.has_age_branch else None),
            adv_age_logits=(self.adv_head(self.grl(adv_input))
                            if self.config.has_adversarial_head else None),
        )

    def forward(self, feats, labels=None):
        triple = self.embed(feats)
        return triple, self.heads_forward(triple, labels)


def extract_embedding(model: AdalNet, feats, which="z_id"):
    """Extract one embedding per input. ``which`` is z, z_id, or z_age;
    z_id is the age-invariant representation used for verification."""
    if which not in ("z", "z_id", "z_age"):
        raise ValueError(f"unknown embedding {which!r}")
    model.eval()
    with torch.no_grad():
        triple = model.embed(feats)
    return getattr(triple, which)


def save_checkpoint(path, model, optimizer=None, step=0):
    """Container: config dict, parameters by name, optimizer state, step."""
    torch.save({
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
    }, path)


def load_checkpoint(path, map_location="cpu"):
    blob = torch.load(path, map_location=map_location, weights_only=False)
    cfg_dict = dict(blob["config"])
    cfg_dict["block_widths"] = tuple(cfg_dict["block_widths"])
    config = ModelConfig(**cfg_dict)
    model = AdalNet(config)
    model.load_state_dict(blob["state_dict"])
    return model, blob


def write_embeddings(path, embeddings):
    """Rows of ``utterance-key`` followed by the embedding values."""
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(embeddings):
            vec = " ".join(f"{v:.8e}" for v in embeddings[key])
            f.write(f"{key} {vec}\n")


def read_embeddings(path):
    import numpy as np
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            out[parts[0]] = np.array([float(v) for v in parts[1:]])
    return out
