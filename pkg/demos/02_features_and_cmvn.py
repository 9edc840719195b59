"""Synthetic speech, log-mel features and per-speaker normalization."""
# %%
import numpy as np

from decoar import compute_logmel, generate_synthetic, normalize_pool

# %% A small corpus: each symbol is a short segment with its own spectral
# envelope, colored by a per-speaker tilt and pitch offset.
corpus = generate_synthetic(n_utts=12, n_speakers=3, vocab_size=6, seed=4, n_dev=3, n_test=3)
first = corpus.manifest["labeled_train"][0]
audio = corpus.audio[first.utterance_id]
print(f"{first.utterance_id}: speaker {first.speaker_id}, {audio.samples.size / 16000:.2f}s, "
      f"labels {corpus.manifest.vocabulary.decode(first.transcript)}")

# %% 25 ms windows every 10 ms give 40 log-mel energies per frame.
raw = [compute_logmel(buf) for buf in corpus.audio.values()]
print("frames x dims:", raw[0].frames.shape)

# %% Before normalization speakers sit at different offsets.
by_speaker: dict[str, list] = {}
for seq in raw:
    by_speaker.setdefault(seq.speaker_id, []).append(seq.frames)
for spk, chunks in sorted(by_speaker.items()):
    print(spk, "mean energy before CMVN:", round(float(np.concatenate(chunks).mean()), 3))

# %% After per-speaker CMVN every speaker's pooled frames have mean 0, variance 1.
normalized, stats = normalize_pool(raw)
pooled: dict[str, list] = {}
for seq in normalized:
    pooled.setdefault(seq.speaker_id, []).append(seq.frames)
for spk, chunks in sorted(pooled.items()):
    f = np.concatenate(chunks)
    print(spk, f"mean {np.abs(f.mean(0)).max():.1e}  var-1 {np.abs(f.var(0) - 1).max():.1e}  "
               f"frames {stats[spk].frame_count}")
