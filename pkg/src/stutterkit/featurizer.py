"""Log-Mel featurization for 16 kHz mono speech clips.

Converts fixed-length (padded/truncated) audio into a globally normalized
log-Mel spectrogram: Hann-windowed frames, magnitude-squared FFT, triangular
mel filterbank over [0, 8000] Hz, natural log, then a dynamic-range clamp and
affine rescale. All functions are pure and deterministic.
"""

from __future__ import annotations

import hashlib
import json
import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
PCM_SCALE = 32768.0


class UnsupportedFormat(Exception):
    """Audio is not 16-bit PCM, mono, 16 kHz."""


class CorruptFile(Exception):
    """WAV container is malformed or truncated."""


class EmptyClip(Exception):
    """Clip has zero samples."""


class ConfigMismatch(Exception):
    """Featurizer config is internally inconsistent or incompatible with the clip."""


@dataclass
class AudioClip:
    """Mono PCM samples in [-1, 1] at 16 kHz plus provenance metadata."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    episode_id: str = ""
    speaker_id: str = ""
    clip_id: str = ""

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise UnsupportedFormat("expected mono (1-D) samples")
        if self.sample_rate != SAMPLE_RATE:
            raise UnsupportedFormat(f"expected {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if self.samples.size and float(np.max(np.abs(self.samples))) > 1.0 + 1e-9:
            raise UnsupportedFormat("sample amplitudes exceed [-1, 1]")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FeaturizerConfig:
    window_ms: int = 25
    hop_ms: int = 10
    n_fft: int = 400
    n_mels: int = 80
    chunk_length_s: float = 6.0
    log_floor: float = 1e-10
    clamp_range: float = 8.0
    affine_shift: float = 4.0
    affine_scale: float = 4.0

    def __post_init__(self) -> None:
        if self.n_fft != self.window_ms * SAMPLE_RATE // 1000:
            raise ConfigMismatch(
                f"n_fft={self.n_fft} inconsistent with window_ms={self.window_ms} at {SAMPLE_RATE} Hz"
            )
        if (self.hop_ms * SAMPLE_RATE) % 1000:
            raise ConfigMismatch(f"hop_ms={self.hop_ms} is not a whole sample count")
        if self.n_mels < 1:
            raise ConfigMismatch("n_mels must be >= 1")
        if self.chunk_samples % self.hop:
            raise ConfigMismatch("chunk length must be a whole number of hops")
        if self.log_floor <= 0:
            raise ConfigMismatch("log_floor must be positive")

    @property
    def hop(self) -> int:
        return self.hop_ms * SAMPLE_RATE // 1000

    @property
    def chunk_samples(self) -> int:
        return int(round(self.chunk_length_s * SAMPLE_RATE))

    @property
    def chunk_frames(self) -> int:
        return self.chunk_samples // self.hop

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:12]


@dataclass
class LogMelSpectrogram:
    """[n_mels x n_frames] matrix of (possibly normalized) log-Mel energies."""

    values: np.ndarray
    n_frames: int
    config_hash: str

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != self.n_frames:
            raise ConfigMismatch(
                f"values shape {self.values.shape} inconsistent with n_frames={self.n_frames}"
            )

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(
    path: str | Path,
    *,
    episode_id: str = "",
    speaker_id: str = "",
    clip_id: str | None = None,
) -> AudioClip:
    """Read a RIFF/WAV file (PCM s16le, mono, 16 kHz) into an AudioClip.

    Samples are scaled to [-1, 1] by dividing by 32768. Metadata defaults to
    the filename stem when no manifest side-channel supplies it.
    """
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getcomptype() != "NONE":
                raise UnsupportedFormat(f"{path}: compressed WAV not supported")
            if wf.getnchannels() != 1:
                raise UnsupportedFormat(f"{path}: expected mono, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise UnsupportedFormat(f"{path}: expected 16-bit PCM")
            if wf.getframerate() != SAMPLE_RATE:
                raise UnsupportedFormat(f"{path}: expected {SAMPLE_RATE} Hz, got {wf.getframerate()}")
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except wave.Error as exc:
        # wave reports unrecognized encodings as "unknown format"
        if "unknown format" in str(exc):
            raise UnsupportedFormat(f"{path}: {exc}") from exc
        raise CorruptFile(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise CorruptFile(f"{path}: truncated header") from exc
    if len(raw) != 2 * n_frames:
        raise CorruptFile(f"{path}: data chunk truncated ({len(raw)} bytes for {n_frames} frames)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    return AudioClip(
        samples=samples,
        sample_rate=SAMPLE_RATE,
        episode_id=episode_id,
        speaker_id=speaker_id,
        clip_id=clip_id if clip_id is not None else path.stem,
    )


def save_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write mono float samples in [-1, 1] as PCM s16le."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE), -32768, 32767)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.astype("<i2").tobytes())


# ---------------------------------------------------------------------------
# Mel filterbank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeaturizerConfig) -> np.ndarray:
    """[n_mels x (n_fft//2 + 1)] triangular filters, mel-spaced over [0, 8000] Hz.

    Filters are unnormalized (each peaks at 1 where a bin lands on its center).
    """
    n_bins = cfg.n_fft // 2 + 1
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(SAMPLE_RATE / 2), cfg.n_mels + 2))
    bin_freqs = np.arange(n_bins) * SAMPLE_RATE / cfg.n_fft
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_center_frequencies(cfg: FeaturizerConfig) -> np.ndarray:
    """Center frequency (Hz) of each mel filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(SAMPLE_RATE / 2), cfg.n_mels + 2))
    return edges[1:-1]


# ---------------------------------------------------------------------------
# Featurization


def hann_window(n: int) -> np.ndarray:
    # periodic Hann, the STFT convention
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def pad_or_truncate(samples: np.ndarray, target: int) -> np.ndarray:
    if samples.size >= target:
        return samples[:target]
    return np.concatenate([samples, np.zeros(target - samples.size)])


def log_mel(clip: AudioClip, cfg: FeaturizerConfig) -> LogMelSpectrogram:
    """Raw (pre-normalization) log-Mel spectrogram of a clip.

    The clip is zero-padded or truncated to the configured chunk length, so
    n_frames == chunk_samples // hop regardless of input duration. Frame t
    covers samples [t*hop, t*hop + n_fft), zero-padded past the chunk end.
    """
    if clip.samples.size == 0:
        raise EmptyClip("cannot featurize a clip with zero samples")
    if cfg.n_fft > cfg.chunk_samples:
        raise ConfigMismatch(f"n_fft={cfg.n_fft} exceeds chunk of {cfg.chunk_samples} samples")
    x = pad_or_truncate(clip.samples, cfg.chunk_samples)
    n_frames = cfg.chunk_frames
    tail = np.zeros(cfg.n_fft - cfg.hop)
    padded = np.concatenate([x, tail])
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_fft)[:: cfg.hop][:n_frames]
    power = np.abs(np.fft.rfft(frames * hann_window(cfg.n_fft), axis=1)) ** 2
    mel_energy = power @ mel_filterbank(cfg).T
    values = np.log(np.maximum(mel_energy, cfg.log_floor)).T
    return LogMelSpectrogram(values=values, n_frames=n_frames, config_hash=cfg.digest())


def normalize(spec: LogMelSpectrogram, cfg: FeaturizerConfig) -> LogMelSpectrogram:
    """Clamp below at (global max - clamp_range), then map x -> (x + shift) / scale.

    With the default 8/4/4 parameters the output range never exceeds 2.
    """
    floor = float(spec.values.max()) - cfg.clamp_range
    values = (np.maximum(spec.values, floor) + cfg.affine_shift) / cfg.affine_scale
    return LogMelSpectrogram(values=values, n_frames=spec.n_frames, config_hash=spec.config_hash)


def featurize(clip: AudioClip, cfg: FeaturizerConfig) -> LogMelSpectrogram:
    """log_mel followed by normalize: the encoder-ready representation."""
    return normalize(log_mel(clip, cfg), cfg)


# ---------------------------------------------------------------------------
# Spectrogram dumps: one-line JSON header, then little-endian f32 row-major values


def dump_spectrogram(path: str | Path, spec: LogMelSpectrogram, cfg: FeaturizerConfig) -> None:
    header = {"n_mels": spec.n_mels, "n_frames": spec.n_frames, "config": asdict(cfg)}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode())
        f.write(b"\n")
        f.write(np.ascontiguousarray(spec.values, dtype="<f4").tobytes())


def load_spectrogram(path: str | Path) -> tuple[LogMelSpectrogram, FeaturizerConfig]:
    with open(path, "rb") as f:
        header_line = f.readline()
        blob = f.read()
    header = json.loads(header_line)
    cfg = FeaturizerConfig(**header["config"])
    n_mels, n_frames = header["n_mels"], header["n_frames"]
    expected = 4 * n_mels * n_frames
    if len(blob) != expected:
        raise CorruptFile(f"{path}: expected {expected} value bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(n_mels, n_frames)
    return LogMelSpectrogram(values=values, n_frames=n_frames, config_hash=cfg.digest()), cfg
