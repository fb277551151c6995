"""MFCC front-end: framing, mel filterbank, deltas, energy VAD and CMVN."""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct


class FrontendError(ValueError):
    """Raised for unusable audio or configuration."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.sample_rate not in (8000, 16000):
            raise FrontendError(f"unsupported sample rate {self.sample_rate}")


@dataclass
class FeatureMatrix:
    """Per-utterance frames, shape (T, D)."""

    frames: np.ndarray
    id: str = ""
    frame_shift_ms: float = 10.0

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.frames
        return self.frames.astype(dtype)

    def with_frames(self, frames: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(frames, self.id, self.frame_shift_ms)


@dataclass
class FrontendConfig:
    sample_rate: int = 16000
    window_ms: float = 20.0
    shift_ms: float = 10.0
    n_filters: int | None = None  # 26 at 16 kHz, 20 at 8 kHz
    n_ceps: int = 19
    include_c0: bool = False
    preemphasis: float = 0.97
    log_floor: float = 1e-10
    delta_window: int = 2
    vad_margin_db: float = 30.0
    vad_percentile: float = 10.0
    vad_abs_floor: float = 1e-10
    low_freq: float = 0.0
    high_freq: float | None = None

    def __post_init__(self):
        if self.sample_rate not in (8000, 16000):
            raise FrontendError(f"unsupported sample rate {self.sample_rate}")
        if self.n_filters is None:
            self.n_filters = 26 if self.sample_rate == 16000 else 20
        n_dct = self.n_ceps if self.include_c0 else self.n_ceps + 1
        if n_dct > self.n_filters:
            raise FrontendError(
                f"{self.n_ceps} cepstra need at least {n_dct} filters, got {self.n_filters}")

    @property
    def window_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def frame_shift(self) -> int:
        return int(round(self.sample_rate * self.shift_ms / 1000.0))

    @property
    def fft_size(self) -> int:
        return 1 << int(np.ceil(np.log2(self.window_length)))


def read_wav(path, utt_id: str | None = None) -> AudioClip:
    """Load a PCM16 mono RIFF WAV file."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise FrontendError(f"{path}: only mono audio is supported")
            if fh.getsampwidth() != 2:
                raise FrontendError(f"{path}: only 16-bit PCM is supported")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise FrontendError(f"{path}: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.int16)
    return AudioClip(samples, rate, utt_id if utt_id is not None else str(path))


def write_wav(path, clip: AudioClip) -> None:
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(clip.sample_rate)
        fh.writeframes(np.asarray(clip.samples, dtype="<i2").tobytes())


def num_frames(n_samples: int, window: int, shift: int) -> int:
    if n_samples < window:
        raise FrontendError("utterance too short")
    return (n_samples - window) // shift + 1


def frame_signal(signal: np.ndarray, window: int, shift: int) -> np.ndarray:
    n = num_frames(len(signal), window, shift)
    idx = np.arange(window)[None, :] + shift * np.arange(n)[:, None]
    return signal[idx]


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular filters on the mel scale, shape (n_filters, fft_size // 2 + 1)."""
    n_fft = cfg.fft_size
    high = cfg.high_freq if cfg.high_freq is not None else cfg.sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.low_freq), hz_to_mel(high), cfg.n_filters + 2))
    bins = np.arange(n_fft // 2 + 1) * cfg.sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lo) / (mid - lo)
    falling = (hi - bins) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def _windowed_frames(clip: AudioClip, cfg: FrontendConfig) -> np.ndarray:
    if clip.sample_rate != cfg.sample_rate:
        raise FrontendError(
            f"clip rate {clip.sample_rate} does not match configured {cfg.sample_rate}")
    x = np.asarray(clip.samples, dtype=np.float64)
    if len(x) < cfg.window_length:
        raise FrontendError("utterance too short")
    emphasized = np.concatenate([x[:1], x[1:] - cfg.preemphasis * x[:-1]])
    frames = frame_signal(emphasized, cfg.window_length, cfg.frame_shift)
    return frames * np.hamming(cfg.window_length)


def log_mel_energies(clip: AudioClip, cfg: FrontendConfig) -> np.ndarray:
    """Log mel-filterbank energies per frame, shape (T, n_filters)."""
    frames = _windowed_frames(clip, cfg)
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    energies = power @ mel_filterbank(cfg).T
    return np.log(np.maximum(energies, cfg.log_floor))


def extract_mfcc(clip: AudioClip, cfg: FrontendConfig | None = None) -> FeatureMatrix:
    """Static cepstra (T, n_ceps) from the orthonormal DCT-II of log mel energies."""
    cfg = cfg or FrontendConfig(sample_rate=clip.sample_rate)
    ceps = dct(log_mel_energies(clip, cfg), type=2, norm="ortho", axis=1)
    start = 0 if cfg.include_c0 else 1
    return FeatureMatrix(ceps[:, start:start + cfg.n_ceps], clip.id, cfg.shift_ms)


def _delta(x: np.ndarray, k: int) -> np.ndarray:
    T = x.shape[0]
    padded = np.concatenate([np.repeat(x[:1], k, axis=0), x, np.repeat(x[-1:], k, axis=0)])
    num = np.zeros_like(x)
    for n in range(1, k + 1):
        num += n * (padded[k + n:k + n + T] - padded[k - n:k - n + T])
    return num / (2.0 * sum(n * n for n in range(1, k + 1)))


def append_deltas(feat, k: int = 2) -> FeatureMatrix:
    """Stack static, delta and delta-delta coefficients (D -> 3D)."""
    if not isinstance(feat, FeatureMatrix):
        feat = FeatureMatrix(feat)
    d1 = _delta(feat.frames, k)
    d2 = _delta(d1, k)
    return feat.with_frames(np.hstack([feat.frames, d1, d2]))


def frame_log_energy_db(clip: AudioClip, cfg: FrontendConfig):
    """Raw frame energies (dB, linear) using the MFCC framing, without pre-emphasis or window."""
    x = np.asarray(clip.samples, dtype=np.float64)
    frames = frame_signal(x, cfg.window_length, cfg.frame_shift)
    energy = np.sum(frames ** 2, axis=1)
    return 10.0 * np.log10(np.maximum(energy, cfg.log_floor)), energy


def energy_vad(clip: AudioClip, feat, cfg: FrontendConfig | None = None):
    """Keep frames within `vad_margin_db` of the loudest frame and above the
    `vad_percentile` energy percentile.

    Returns ``(kept_features, mask)``; temporal order is preserved.
    """
    cfg = cfg or FrontendConfig(sample_rate=clip.sample_rate)
    if not isinstance(feat, FeatureMatrix):
        feat = FeatureMatrix(feat, clip.id)
    db, energy = frame_log_energy_db(clip, cfg)
    if len(db) != len(feat):
        raise FrontendError(f"{len(db)} energy frames vs {len(feat)} feature frames")
    mask = (db > db.max() - cfg.vad_margin_db) & (db >= np.percentile(db, cfg.vad_percentile))
    mask &= energy > cfg.vad_abs_floor
    if not mask.any():
        raise FrontendError("no speech detected")
    return feat.with_frames(feat.frames[mask]), mask


def cmvn(feat, var_floor: float = 1e-10) -> FeatureMatrix:
    """Utterance-level mean and (population) variance normalization."""
    if not isinstance(feat, FeatureMatrix):
        feat = FeatureMatrix(feat)
    x = feat.frames
    if x.shape[0] < 2:
        raise FrontendError("insufficient frames for normalization")
    centered = x - x.mean(axis=0)
    var = centered.var(axis=0)
    scale = np.where(var < var_floor, 1.0, np.sqrt(np.where(var < var_floor, 1.0, var)))
    return feat.with_frames(centered / scale)


def process_clip(clip: AudioClip, cfg: FrontendConfig | None = None) -> FeatureMatrix:
    """Full chain: MFCC -> VAD mask -> deltas on all frames -> mask -> CMVN."""
    cfg = cfg or FrontendConfig(sample_rate=clip.sample_rate)
    static = extract_mfcc(clip, cfg)
    _, mask = energy_vad(clip, static, cfg)
    full = append_deltas(static, cfg.delta_window)
    return cmvn(full.with_frames(full.frames[mask]))
