"""Online per-sample augmentation of training batches.

Each sample draws from its own counter-based stream keyed by
``(seed, epoch, sample_id)``, so results do not depend on batch composition,
batch order or the number of worker threads.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError


@dataclass(frozen=True)
class AugmentConfig:
    p_awgn: float = 0.25
    snr_choices_db: tuple = (25.0, 30.0)
    p_scale: float = 0.2
    beta_range: tuple = (0.7, 1.3)
    p_sign: float = 0.5
    p_shift: float = 0.2
    shift_range: tuple = (0.0, 200.0)

    def __post_init__(self):
        for name in ("p_awgn", "p_scale", "p_sign", "p_shift"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.beta_range
        if not lo < hi:
            raise ConfigurationError(f"beta_range must satisfy low < high, got {self.beta_range}")
        lo, hi = self.shift_range
        if not 0 <= lo <= hi:
            raise ConfigurationError(f"invalid shift_range {self.shift_range}")
        if not self.snr_choices_db:
            raise ConfigurationError("snr_choices_db is empty")

    @classmethod
    def disabled(cls):
        return cls(p_awgn=0.0, p_scale=0.0, p_shift=0.0)


def sample_rng(seed, epoch, sample_id):
    """Independent Philox stream for one (seed, epoch, sample) triple."""
    ss = np.random.SeedSequence([int(seed), int(epoch), int(sample_id)])
    return np.random.Generator(np.random.Philox(ss))


def apply_awgn(frame, snr_db, rng):
    """Add white Gaussian noise so that signal/noise power equals ``snr_db``.

    Signal power is the mean square over all channels jointly; one noise level
    is used for the whole frame. Zero-power frames are returned unchanged.
    """
    frame = np.asarray(frame)
    power = float(np.mean(np.square(frame, dtype=np.float64)))
    if power == 0.0 or np.isinf(snr_db):
        return frame.copy()
    sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    noise = rng.standard_normal(frame.shape) * sigma
    return (frame + noise).astype(frame.dtype)


def draw_beta(rng, config=AugmentConfig()):
    beta = rng.uniform(*config.beta_range)
    if rng.random() < config.p_sign:
        beta = -beta
    return beta


def apply_scale(frame, rng, config=AugmentConfig()):
    """Multiply by ``beta ~ U[0.7, 1.3]``, negated with probability 0.5."""
    beta = draw_beta(rng, config)
    return (np.asarray(frame) * beta).astype(np.asarray(frame).dtype)


def circular_shift(frame, kappa):
    """Rotate every channel right: sample ``i`` moves to ``(i + kappa) % L``."""
    frame = np.asarray(frame)
    return np.roll(frame, int(kappa) % frame.shape[-1], axis=-1)


def draw_kappa(rng, length, config=AugmentConfig()):
    lo, hi = config.shift_range
    return int(np.floor(rng.uniform(lo, hi))) % length


def apply_shift(frame, rng, config=AugmentConfig()):
    frame = np.asarray(frame)
    return circular_shift(frame, draw_kappa(rng, frame.shape[-1], config))


@dataclass(frozen=True)
class AugmentEvents:
    """What happened to one sample; handy for statistics and debugging."""

    shift: int | None
    beta: float | None
    snr_db: float | None


def augment_frame(frame, config, rng):
    """Gate and apply shift, then scale, then noise. Returns ``(frame, events)``.

    The three gates are drawn up front from ``rng`` so each one consumes the
    same stream position regardless of the others' outcomes.
    """
    u_shift, u_scale, u_awgn = rng.random(3)
    kappa = beta = snr = None
    out = frame
    if u_shift < config.p_shift:
        kappa = draw_kappa(rng, frame.shape[-1], config)
        out = circular_shift(out, kappa)
    if u_scale < config.p_scale:
        beta = draw_beta(rng, config)
        out = (out * beta).astype(frame.dtype)
    if u_awgn < config.p_awgn:
        snr = float(config.snr_choices_db[rng.integers(len(config.snr_choices_db))])
        out = apply_awgn(out, snr, rng)
    if out is frame:
        out = frame.copy()
    return out, AugmentEvents(kappa, beta, snr)


def augment_batch(frames, config, epoch, seed, sample_ids=None, n_workers=1, return_events=False):
    """Augment a training batch ``[B, C, L]`` on a copy.

    ``sample_ids`` are the global dataset indices of the frames (defaults to
    ``0..B-1``); together with ``seed`` and ``epoch`` they key each sample's
    random stream. The input array is never modified.
    """
    frames = np.asarray(frames)
    if sample_ids is None:
        sample_ids = np.arange(len(frames))
    if len(sample_ids) != len(frames):
        raise ConfigurationError("sample_ids must have one entry per frame")

    def work(i):
        return augment_frame(frames[i], config, sample_rng(seed, epoch, sample_ids[i]))

    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(work, range(len(frames))))
    else:
        results = [work(i) for i in range(len(frames))]
    out = np.stack([r[0] for r in results]) if results else frames.copy()
    if return_events:
        return out, [r[1] for r in results]
    return out
