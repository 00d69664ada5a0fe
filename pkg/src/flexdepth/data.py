"""Synthetic CTC sequence-labeling task.

Each symbol owns a fixed random template vector; an utterance renders its
label sequence as per-symbol runs of template + Gaussian noise frames.
Splits are disjoint by construction and fully determined by (config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class SynthTaskConfig:
    vocab_size: int = 13          # includes blank at 0
    feature_dim: int = 20
    frames_per_symbol: tuple[int, int] = (2, 4)
    label_len: tuple[int, int] = (3, 12)
    noise_sigma: float = 0.3
    template_seed: int = 1234
    train_size: int = 2000
    dev_size: int = 200
    test_size: int = 200

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ValueError(f"vocab_size must be >= 3, got {self.vocab_size}")
        if self.feature_dim < 4:
            raise ValueError(f"feature_dim must be >= 4, got {self.feature_dim}")
        for name in ("frames_per_symbol", "label_len"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} range ({lo}, {hi}) is empty")

    def split_size(self, split: str) -> int:
        return {"train": self.train_size, "dev": self.dev_size,
                "test": self.test_size}[split]


@dataclass
class Utterance:
    features: np.ndarray      # [T, F]
    labels: list[int]
    uid: str


def make_templates(config: SynthTaskConfig) -> np.ndarray:
    """One fixed template vector per non-blank symbol, [V-1, F]."""
    rng = np.random.default_rng(config.template_seed)
    return rng.standard_normal((config.vocab_size - 1, config.feature_dim))


def _render(rng: np.random.Generator, config: SynthTaskConfig,
            templates: np.ndarray, uid: str) -> Utterance:
    lo, hi = config.label_len
    length = int(rng.integers(lo, hi + 1))
    labels = rng.integers(1, config.vocab_size, size=length)
    flo, fhi = config.frames_per_symbol
    durations = rng.integers(flo, fhi + 1, size=length)
    frames = []
    for sym, dur in zip(labels, durations):
        base = templates[sym - 1]
        noise = rng.standard_normal((dur, config.feature_dim))
        frames.append(base + config.noise_sigma * noise)
    return Utterance(np.concatenate(frames, axis=0),
                     [int(s) for s in labels], uid)


def gen_dataset(config: SynthTaskConfig, seed: int
                ) -> dict[str, list[Utterance]]:
    templates = make_templates(config)
    root = np.random.SeedSequence(seed)
    split_seeds = root.spawn(len(SPLITS))
    out: dict[str, list[Utterance]] = {}
    for split, sseq in zip(SPLITS, split_seeds):
        n = config.split_size(split)
        utts = []
        for i, child in enumerate(sseq.spawn(n)):
            utts.append(_render(np.random.default_rng(child), config,
                                templates, uid=f"{split}-{i}"))
        out[split] = utts
    return out


def nearest_template_decode(features: np.ndarray,
                            templates: np.ndarray) -> np.ndarray:
    """Frame-level oracle classifier: nearest template by L2 distance."""
    d2 = ((features[:, None, :] - templates[None, :, :]) ** 2).sum(-1)
    return d2.argmin(axis=1) + 1


@dataclass
class Batch:
    features: np.ndarray      # [B, T_max, F] zero-padded
    lengths: np.ndarray       # [B]
    labels: list[list[int]]
    uids: list[str] = field(default_factory=list)


def collate(utts: list[Utterance]) -> Batch:
    lengths = np.array([u.features.shape[0] for u in utts], dtype=np.int64)
    t_max = int(lengths.max())
    feats = np.zeros((len(utts), t_max, utts[0].features.shape[1]))
    for i, u in enumerate(utts):
        feats[i, :lengths[i]] = u.features
    return Batch(feats, lengths, [u.labels for u in utts],
                 [u.uid for u in utts])


def epoch_batches(utts: list[Utterance], batch_size: int, seed: int,
                  epoch: int) -> list[Batch]:
    """Seeded per-epoch shuffle, then contiguous batches (last may be short)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(utts))
    return [collate([utts[j] for j in order[i:i + batch_size]])
            for i in range(0, len(utts), batch_size)]


def batch_stream(utts: list[Utterance], batch_size: int, seed: int):
    """Infinite stream cycling over reshuffled epochs."""
    epoch = 0
    while True:
        for batch in epoch_batches(utts, batch_size, seed, epoch):
            yield batch
        epoch += 1


def save_split(path, utts: list[Utterance]) -> None:
    """On-disk cache in the checkpoint tensor format (one file per split)."""
    from . import checkpoint

    tensors = {}
    extras = {"uids": [], "labels": []}
    for i, u in enumerate(utts):
        tensors[f"utt{i}.features"] = u.features
        extras["uids"].append(u.uid)
        extras["labels"].append(u.labels)
    checkpoint.save(path, tensors, extras)


def load_split(path) -> list[Utterance]:
    from . import checkpoint

    tensors, extras = checkpoint.load(path)
    utts = []
    for i, (uid, labels) in enumerate(zip(extras["uids"], extras["labels"])):
        utts.append(Utterance(tensors[f"utt{i}.features"],
                              [int(x) for x in labels], uid))
    return utts
