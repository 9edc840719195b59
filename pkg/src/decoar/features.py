"""Log-mel filterbank extraction and per-speaker mean/variance normalization."""

from __future__ import annotations

import io
import struct
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

LOG_FLOOR = 1e-10
VARIANCE_FLOOR = 1e-8


class AudioError(ValueError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = 16000
    utterance_id: str = ""
    speaker_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")


@dataclass
class FeatureSequence:
    frames: np.ndarray
    utterance_id: str = ""
    speaker_id: str = ""
    normalized: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be a non-empty T x d matrix, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"non-finite feature values in {self.utterance_id!r}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class SpeakerStats:
    speaker_id: str
    mean: np.ndarray
    variance: np.ndarray
    frame_count: int = 0


# -------------------------------------------------------------- mel filterbank

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = 40, sample_rate: int = 16000) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) matrix of unit-peak triangles, mel-spaced 0 Hz to Nyquist."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def frame_count(n_samples: int, window: int, hop: int) -> int:
    return (n_samples - window) // hop + 1


def compute_logmel(
    audio: AudioBuffer,
    window_ms: float = 25.0,
    hop_ms: float = 10.0,
    n_mels: int = 40,
) -> FeatureSequence:
    """Hann-windowed magnitude spectrum -> triangular mel filters -> natural log.

    Energies are floored at 1e-10 before the log. No pre-emphasis or dither.
    """
    sr = audio.sample_rate
    win = int(round(sr * window_ms / 1000.0))
    hop = int(round(sr * hop_ms / 1000.0))
    x = audio.samples
    if x.ndim != 1:
        raise AudioError(f"expected mono samples, got shape {x.shape}")
    if len(x) < win:
        raise AudioError(
            f"audio {audio.utterance_id!r} has {len(x)} samples, shorter than one "
            f"{win}-sample analysis window"
        )
    n_fft = _next_pow2(win)
    n_frames = frame_count(len(x), win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    mag = np.abs(np.fft.rfft(x[idx] * hann, n=n_fft, axis=1))
    energies = mag @ mel_filterbank(n_mels, n_fft, sr).T
    frames = np.log(np.maximum(energies, LOG_FLOOR))
    return FeatureSequence(frames, audio.utterance_id, audio.speaker_id, normalized=False)


# ------------------------------------------------------------------------ CMVN

def accumulate_speaker_stats(sequences: Iterable[FeatureSequence]) -> dict[str, SpeakerStats]:
    """Pooled per-dimension mean and population variance for each speaker."""
    pools: dict[str, list[np.ndarray]] = {}
    for seq in sequences:
        if seq.normalized:
            raise ValueError(f"{seq.utterance_id!r} is already normalized")
        pools.setdefault(seq.speaker_id, []).append(seq.frames)
    stats = {}
    for spk, chunks in pools.items():
        frames = np.concatenate(chunks, axis=0)
        if frames.shape[0] == 0:
            raise ValueError(f"speaker {spk!r} has no frames")
        mean = frames.mean(axis=0)
        var = ((frames - mean) ** 2).mean(axis=0)
        stats[spk] = SpeakerStats(spk, mean, np.maximum(var, VARIANCE_FLOOR), frames.shape[0])
    return stats


def _check_speaker(seq: FeatureSequence, stats: SpeakerStats) -> None:
    if seq.speaker_id != stats.speaker_id:
        raise ValueError(
            f"speaker mismatch: sequence {seq.utterance_id!r} is from {seq.speaker_id!r}, "
            f"stats are for {stats.speaker_id!r}"
        )


def apply_cmvn(seq: FeatureSequence, stats: SpeakerStats) -> FeatureSequence:
    _check_speaker(seq, stats)
    out = (seq.frames - stats.mean) / np.sqrt(stats.variance)
    return replace(seq, frames=out, normalized=True)


def invert_cmvn(seq: FeatureSequence, stats: SpeakerStats) -> FeatureSequence:
    _check_speaker(seq, stats)
    out = seq.frames * np.sqrt(stats.variance) + stats.mean
    return replace(seq, frames=out, normalized=False)


def normalize_pool(sequences: Sequence[FeatureSequence]) -> tuple[list[FeatureSequence], dict[str, SpeakerStats]]:
    stats = accumulate_speaker_stats(sequences)
    return [apply_cmvn(s, stats[s.speaker_id]) for s in sequences], stats


def stats_to_arrays(stats: Mapping[str, SpeakerStats]) -> dict[str, np.ndarray]:
    out = {}
    for spk, st in stats.items():
        out[f"{spk}.mean"] = st.mean
        out[f"{spk}.variance"] = st.variance
        out[f"{spk}.frame_count"] = np.array([float(st.frame_count)])
    return out


def stats_from_arrays(arrays: Mapping[str, np.ndarray]) -> dict[str, SpeakerStats]:
    speakers = sorted({k.rsplit(".", 1)[0] for k in arrays})
    return {
        s: SpeakerStats(
            s,
            arrays[f"{s}.mean"],
            arrays[f"{s}.variance"],
            int(arrays[f"{s}.frame_count"][0]),
        )
        for s in speakers
    }


# ---------------------------------------------------------------------- WAV IO

def read_wav(path: str | Path, utterance_id: str = "", speaker_id: str = "") -> AudioBuffer:
    """Read 16-bit PCM mono RIFF/WAV; other encodings are rejected."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            if w.getcomptype() != "NONE":
                raise AudioError(f"{path}: compressed WAV ({w.getcomptype()}) not supported")
            if channels != 1:
                raise AudioError(f"{path}: expected mono, got {channels} channels")
            if width != 2:
                raise AudioError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise AudioError(f"{path}: not a PCM WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples, rate, utterance_id or path.stem, speaker_id)


def write_wav(path: str | Path, audio: AudioBuffer) -> None:
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(pcm.tobytes())


# --------------------------------------------------------- feature cache files
#
# A cache file is a sequence of records:
#   magic b"DFEAT001" once at the start, then per utterance
#   uint16 id_len, id (UTF-8), uint16 spk_len, spk (UTF-8),
#   uint32 T, uint32 d, uint8 normalized, T*d float64 little-endian

CACHE_MAGIC = b"DFEAT001"


def encode_features(seqs: Iterable[FeatureSequence]) -> bytes:
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    for s in seqs:
        uid, spk = s.utterance_id.encode(), s.speaker_id.encode()
        t, d = s.frames.shape
        buf.write(struct.pack("<H", len(uid)) + uid + struct.pack("<H", len(spk)) + spk)
        buf.write(struct.pack("<IIB", t, d, int(s.normalized)))
        buf.write(np.ascontiguousarray(s.frames, dtype="<f8").tobytes())
    return buf.getvalue()


def decode_features(blob: bytes) -> list[FeatureSequence]:
    if blob[:8] != CACHE_MAGIC:
        raise ValueError("not a feature cache file (bad magic)")
    pos, out = 8, []
    while pos < len(blob):
        (n,) = struct.unpack_from("<H", blob, pos)
        uid = blob[pos + 2 : pos + 2 + n].decode()
        pos += 2 + n
        (n,) = struct.unpack_from("<H", blob, pos)
        spk = blob[pos + 2 : pos + 2 + n].decode()
        pos += 2 + n
        t, d, norm = struct.unpack_from("<IIB", blob, pos)
        pos += 9
        frames = np.frombuffer(blob, dtype="<f8", count=t * d, offset=pos).reshape(t, d)
        pos += 8 * t * d
        out.append(FeatureSequence(frames.astype(np.float64), uid, spk, bool(norm)))
    return out


def write_feature_cache(path: str | Path, seqs: Iterable[FeatureSequence]) -> None:
    Path(path).write_bytes(encode_features(seqs))


def read_feature_cache(path: str | Path) -> list[FeatureSequence]:
    return decode_features(Path(path).read_bytes())
