"""Synthetic corpus with known segment boundaries.

Every character (and silence) owns a Gaussian mean in feature space; an
utterance is a random word sequence whose characters are rendered as runs of
noisy frames around their means, with optional silence between words.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORDS = ("one", "two", "three", "four", "five")


@dataclass
class SynthUtterance:
    utt_id: str
    features: np.ndarray  # T_in x F, float32
    words: list[str]
    word_times: list[tuple[int, int]]  # input frames, end exclusive
    char_segments: list[tuple[str, int, int]]  # "<sil>" or character, input frames


@dataclass
class SynthConfig:
    words: tuple = WORDS
    dim: int = 12
    mean_scale: float = 2.0
    noise: float = 0.6
    char_frames: tuple = (16, 28)
    sil_frames: tuple = (16, 40)
    sil_prob: float = 0.4
    max_words: int = 4
    means_seed: int = 1234


def char_means(cfg: SynthConfig) -> dict[str, np.ndarray]:
    chars = sorted({c for w in cfg.words for c in w})
    rng = np.random.default_rng(cfg.means_seed)
    means = {c: rng.normal(0.0, cfg.mean_scale, cfg.dim) for c in chars}
    means["<sil>"] = np.zeros(cfg.dim)
    return means


def make_corpus(n: int, seed: int, cfg: SynthConfig = SynthConfig(), prefix: str = "utt") -> list[SynthUtterance]:
    means = char_means(cfg)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        nw = int(rng.integers(1, cfg.max_words + 1))
        words = [cfg.words[int(k)] for k in rng.integers(0, len(cfg.words), nw)]
        segs: list[tuple[str, int, int]] = []
        times = []
        t = 0

        def emit(sym: str, lo_hi: tuple) -> None:
            nonlocal t
            d = int(rng.integers(lo_hi[0], lo_hi[1] + 1))
            segs.append((sym, t, t + d))
            t += d

        for j, w in enumerate(words):
            if rng.random() < cfg.sil_prob:
                emit("<sil>", cfg.sil_frames)
            start = t
            for c in w:
                emit(c, cfg.char_frames)
            times.append((start, t))
        if rng.random() < cfg.sil_prob:
            emit("<sil>", cfg.sil_frames)
        feats = np.empty((t, cfg.dim))
        for sym, s, e in segs:
            feats[s:e] = means[sym] + rng.normal(0.0, cfg.noise, (e - s, cfg.dim))
        out.append(SynthUtterance(f"{prefix}{i:04d}", feats.astype(np.float32), words, times, segs))
    return out
