"""Corpus manifests and a deterministic synthetic speech-like corpus.

Manifest format: UTF-8 text, one utterance per line, tab-separated::

    split  utterance_id  speaker_id  wav_path  transcript

``transcript`` is space-joined vocabulary symbols, or ``-`` when absent.
Lines starting with ``#`` carry ``key=value`` metadata. The unlabeled pool
never carries transcripts: they are dropped on load even when present.
Relative wav paths are resolved against the manifest's directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .ctc import LabelVocabulary
from .features import AudioBuffer, write_wav

SPLITS = ("unlabeled_pool", "labeled_train", "dev", "test")
SAMPLE_RATE = 16000


@dataclass(frozen=True)
class Utterance:
    utterance_id: str
    speaker_id: str
    wav_path: str | None = None
    transcript: tuple[int, ...] | None = None

    def unlabeled(self) -> "Utterance":
        return replace(self, transcript=None)


@dataclass
class CorpusManifest:
    splits: dict[str, list[Utterance]]
    vocabulary: LabelVocabulary
    metadata: dict[str, str] = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        for name in SPLITS:
            self.splits.setdefault(name, [])
        self.splits["unlabeled_pool"] = [u.unlabeled() for u in self.splits["unlabeled_pool"]]
        for u in self.splits["labeled_train"]:
            if u.transcript is None:
                raise ValueError(f"labeled utterance {u.utterance_id!r} has no transcript")
        seen: dict[str, str] = {}
        for name in ("labeled_train", "dev", "test"):
            for u in self.splits[name]:
                if u.utterance_id in seen and seen[u.utterance_id] != name:
                    raise ValueError(
                        f"utterance {u.utterance_id!r} appears in both {seen[u.utterance_id]} and {name}"
                    )
                seen[u.utterance_id] = name
        pool_ids = {u.utterance_id for u in self.splits["unlabeled_pool"]}
        for name in ("dev", "test"):
            clash = pool_ids & {u.utterance_id for u in self.splits[name]}
            if clash:
                raise ValueError(f"{name} overlaps the unlabeled pool: {sorted(clash)[:3]}")

    def __getitem__(self, split: str) -> list[Utterance]:
        return self.splits[split]

    def all_utterances(self) -> Iterator[Utterance]:
        seen = set()
        for name in SPLITS:
            for u in self.splits[name]:
                if u.utterance_id not in seen:
                    seen.add(u.utterance_id)
                    yield u

    def wav_file(self, utt: Utterance) -> Path:
        p = Path(utt.wav_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    # --------------------------------------------------------------- text io

    def to_text(self) -> str:
        lines = [f"# {k}={v}" for k, v in sorted(self.metadata.items())]
        for name in SPLITS:
            for u in self.splits[name]:
                tr = "-" if u.transcript is None else " ".join(self.vocabulary.decode(u.transcript))
                lines.append("\t".join([name, u.utterance_id, u.speaker_id, u.wav_path or "-", tr]))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path, vocab_path: str | Path | None = None) -> None:
        path = Path(path)
        vocab_path = Path(vocab_path) if vocab_path else path.with_name("vocab.txt")
        self.vocabulary.save(vocab_path)
        self.metadata["vocabulary"] = vocab_path.name if vocab_path.parent == path.parent else str(vocab_path)
        path.write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, vocabulary: LabelVocabulary | None = None) -> "CorpusManifest":
        path = Path(path)
        metadata: dict[str, str] = {}
        rows = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                metadata[key.strip()] = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 5 or parts[0] not in SPLITS:
                raise ValueError(f"{path}:{lineno}: malformed manifest line")
            rows.append(parts)
        if vocabulary is None:
            vpath = Path(metadata.get("vocabulary", "vocab.txt"))
            vocabulary = LabelVocabulary.load(vpath if vpath.is_absolute() else path.parent / vpath)
        splits: dict[str, list[Utterance]] = {s: [] for s in SPLITS}
        for split, uid, spk, wav, tr in rows:
            transcript = None
            if tr != "-" and split != "unlabeled_pool":
                transcript = tuple(vocabulary.encode(tr.split()))
            splits[split].append(Utterance(uid, spk, None if wav == "-" else wav, transcript))
        return cls(splits, vocabulary, metadata, path.parent)


def split_labeled_fraction(manifest: CorpusManifest, fraction: float, seed: int) -> CorpusManifest:
    """Keep a deterministic ``round(fraction * n)`` subset of the labeled train split.

    The unlabeled pool is left untouched.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    labeled = manifest.splits["labeled_train"]
    n_keep = int(round(fraction * len(labeled)))
    if n_keep == 0:
        raise ValueError(f"fraction {fraction} of {len(labeled)} labeled utterances keeps none")
    if n_keep == len(labeled):
        chosen = list(labeled)
    else:
        order = np.random.default_rng(seed).permutation(len(labeled))
        keep = set(order[:n_keep].tolist())
        chosen = [u for k, u in enumerate(labeled) if k in keep]
    splits = {k: list(v) for k, v in manifest.splits.items()}
    splits["labeled_train"] = chosen
    meta = dict(manifest.metadata, labeled_fraction=str(fraction), split_seed=str(seed))
    return CorpusManifest(splits, manifest.vocabulary, meta, manifest.root)


# --------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class SymbolSound:
    voiced: bool
    centers: tuple[float, ...]  # Hz
    widths: tuple[float, ...]  # Hz
    gains: tuple[float, ...]  # linear

    def envelope(self, freqs: np.ndarray) -> np.ndarray:
        env = np.full_like(freqs, 0.02, dtype=np.float64)
        for c, w, g in zip(self.centers, self.widths, self.gains):
            env += g * np.exp(-0.5 * ((freqs - c) / w) ** 2)
        return env


@dataclass(frozen=True)
class SpeakerVoice:
    f0: float  # Hz
    tilt_db_per_octave: float

    def tilt(self, freqs: np.ndarray) -> np.ndarray:
        octaves = np.log2(np.maximum(freqs, 50.0) / 500.0)
        return 10.0 ** (self.tilt_db_per_octave * octaves / 20.0)


def _make_symbols(n: int, rng: np.random.Generator) -> list[SymbolSound]:
    # spread formant centers in mel so envelopes are pairwise distinct
    lo, hi = 2595 * np.log10(1 + 200 / 700), 2595 * np.log10(1 + 6500 / 700)
    out = []
    for k in range(n):
        voiced = k % 3 != 2
        n_peaks = 3 if voiced else 2
        mels = np.sort(rng.uniform(lo, hi, n_peaks))
        centers = 700 * (10 ** (mels / 2595) - 1)
        widths = centers * rng.uniform(0.08, 0.2, n_peaks) + 40.0
        gains = rng.uniform(0.4, 1.0, n_peaks)
        out.append(SymbolSound(voiced, tuple(centers), tuple(widths), tuple(gains)))
    return out


def _make_speakers(n: int, rng: np.random.Generator) -> list[SpeakerVoice]:
    return [SpeakerVoice(float(rng.uniform(90, 240)), float(rng.uniform(-6.0, 3.0))) for _ in range(n)]


def _segment(sym: SymbolSound, voice: SpeakerVoice, n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    if sym.voiced:
        f0 = voice.f0 * rng.uniform(0.95, 1.05)
        harmonics = np.arange(1, int((SAMPLE_RATE / 2 - 100) // f0) + 1) * f0
        amps = sym.envelope(harmonics) * voice.tilt(harmonics)
        phases = rng.uniform(0, 2 * np.pi, len(harmonics))
        # slow pitch drift across the segment
        drift = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(1, 4) * t + rng.uniform(0, 2 * np.pi))
        sig = (amps[:, None] * np.sin(2 * np.pi * harmonics[:, None] * np.cumsum(drift)[None, :] / SAMPLE_RATE + phases[:, None])).sum(0)
    else:
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
        sig = np.fft.irfft(spec * sym.envelope(freqs) * voice.tilt(freqs), n=n) * 4.0
    ramp = min(n // 4, int(0.01 * SAMPLE_RATE))
    win = np.ones(n)
    win[:ramp] = np.linspace(0.0, 1.0, ramp)
    win[n - ramp :] = np.linspace(1.0, 0.0, ramp)
    return sig * win


def synthesize_utterance(
    symbols: list[int],
    sounds: list[SymbolSound],
    voice: SpeakerVoice,
    rng: np.random.Generator,
    noise_level: float = 0.003,
) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """Concatenate per-symbol segments (60-200 ms each) between short silences.

    Returns the samples and (symbol, start, end) sample bounds per segment.
    """
    lead = int(rng.uniform(0.05, 0.15) * SAMPLE_RATE)
    tail = int(rng.uniform(0.05, 0.15) * SAMPLE_RATE)
    pieces, bounds, pos = [np.zeros(lead)], [], lead
    for s in symbols:
        n = int(rng.uniform(0.06, 0.2) * SAMPLE_RATE)
        seg = _segment(sounds[s], voice, n, rng)
        # per-segment amplitude jitter of +-6 dB
        seg = seg / (np.sqrt(np.mean(seg**2)) + 1e-12) * 10.0 ** (rng.uniform(-6, 6) / 20.0)
        pieces.append(seg)
        bounds.append((s, pos, pos + n))
        pos += n
    pieces.append(np.zeros(tail))
    audio = np.concatenate(pieces) * 0.1
    audio += noise_level * rng.standard_normal(len(audio))
    return np.clip(audio, -1.0, 1.0), bounds


@dataclass
class SyntheticCorpus:
    manifest: CorpusManifest
    audio: dict[str, AudioBuffer]
    sounds: list[SymbolSound]
    voices: dict[str, SpeakerVoice]
    segments: dict[str, list[tuple[int, int, int]]]  # uid -> (symbol, start_sample, end_sample)


def generate_synthetic(
    n_utts: int = 200,
    n_speakers: int = 16,
    vocab_size: int = 16,
    seed: int = 0,
    n_dev: int = 30,
    n_test: int = 60,
    min_symbols: int = 4,
    max_symbols: int = 9,
    noise_level: float = 0.03,
    out_dir: str | Path | None = None,
) -> SyntheticCorpus:
    """Generate ``n_utts`` training utterances plus dev/test sets.

    Every training utterance is in both the unlabeled pool (without transcript)
    and the labeled train split; :func:`split_labeled_fraction` then reduces the
    labeled side. Dev and test come from the same speakers (recorded in the
    metadata). Adjacent symbols within an utterance always differ.
    """
    if vocab_size < 2:
        raise ValueError(f"vocab_size must be >= 2, got {vocab_size}")
    if n_speakers < 1:
        raise ValueError(f"n_speakers must be >= 1, got {n_speakers}")
    if n_utts < 1 or n_dev < 0 or n_test < 0:
        raise ValueError("utterance counts must be positive")
    if not 1 <= min_symbols <= max_symbols:
        raise ValueError("need 1 <= min_symbols <= max_symbols")
    root = np.random.SeedSequence(seed)
    s_sym, s_spk, s_utt = (np.random.default_rng(s) for s in root.spawn(3))
    sounds = _make_symbols(vocab_size, s_sym)
    voices = {f"spk{k:02d}": v for k, v in enumerate(_make_speakers(n_speakers, s_spk))}
    speakers = list(voices)
    vocab = LabelVocabulary(tuple(f"p{k:02d}" for k in range(vocab_size)))

    audio: dict[str, AudioBuffer] = {}
    segments: dict[str, list[tuple[int, int, int]]] = {}
    splits: dict[str, list[Utterance]] = {s: [] for s in SPLITS}
    total = n_utts + n_dev + n_test
    for k in range(total):
        split = "labeled_train" if k < n_utts else ("dev" if k < n_utts + n_dev else "test")
        uid = f"utt{k:04d}"
        spk = speakers[k % n_speakers]
        rng = np.random.default_rng(s_utt.integers(0, 2**63))
        n_sym = int(rng.integers(min_symbols, max_symbols + 1))
        seq = [int(rng.integers(vocab_size))]
        while len(seq) < n_sym:
            nxt = int(rng.integers(vocab_size - 1))
            seq.append(nxt if nxt < seq[-1] else nxt + 1)
        samples, bounds = synthesize_utterance(seq, sounds, voices[spk], rng, noise_level)
        audio[uid] = AudioBuffer(samples, SAMPLE_RATE, uid, spk)
        segments[uid] = bounds
        wav = f"wav/{uid}.wav" if out_dir is not None else None
        splits[split].append(Utterance(uid, spk, wav, tuple(seq)))
    splits["unlabeled_pool"] = [u.unlabeled() for u in splits["labeled_train"]]
    meta = {
        "generator": "synthetic",
        "seed": str(seed),
        "n_speakers": str(n_speakers),
        "speaker_overlap": "dev/test speakers overlap train",
    }
    manifest = CorpusManifest(splits, vocab, meta, Path(out_dir) if out_dir is not None else None)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "wav").mkdir(parents=True, exist_ok=True)
        for uid, buf in audio.items():
            write_wav(out / "wav" / f"{uid}.wav", buf)
        manifest.save(out / "manifest.tsv")
    return SyntheticCorpus(manifest, audio, sounds, voices, segments)

