"""Experiment plumbing: run configs, seed substreams and the stages behind the CLI.

Every stage is a plain function so the demos and tests can drive the same
code paths as the command line without touching the filesystem.

Run config format: UTF-8 text, one ``key=value`` per line, ``#`` starts a
comment. Unknown keys are rejected; missing keys take the defaults of
:class:`RunConfig`.
"""

from __future__ import annotations

import dataclasses
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import CorpusManifest, SyntheticCorpus, generate_synthetic, split_labeled_fraction
from .ctc import (
    CtcHead,
    CtcHeadConfig,
    EditCounts,
    LabelVocabulary,
    edit_distance,
    greedy_decode,
    prefix_beam_decode,
)
from .features import (
    AudioBuffer,
    AudioError,
    FeatureSequence,
    SpeakerStats,
    accumulate_speaker_stats,
    apply_cmvn,
    compute_logmel,
    read_wav,
)
from .model import DecoarConfig, DecoarModel, reconstruct_spectrogram
from .trainer import (
    FinetuneResult,
    NoamSchedule,
    PretrainResult,
    TrainOptions,
    decoar_features,
    train_finetune,
    train_pretrain,
)

log = logging.getLogger(__name__)

MODES = ("pretrain", "finetune-decoar", "finetune-fbank")


@dataclass
class RunConfig:
    """Resolved hyperparameters for one experiment.

    Defaults are the desk-scale recipe used by the acceptance runs.
    """

    mode: str = "pretrain"
    # synthetic corpus
    n_utts: int = 200
    n_speakers: int = 16
    vocab_size: int = 16
    noise_level: float = 0.03
    n_dev: int = 30
    n_test: int = 60
    # encoder
    slice_size: int = 18
    hidden_dim: int = 64
    num_layers: int = 2
    ffn_hidden: int = 128
    bidirectional: bool = True
    # pretraining
    pretrain_epochs: int = 20
    pretrain_lr: float = 0.05
    pretrain_warmup: int = 50
    pretrain_momentum: float = 0.9
    # finetuning
    labeled_fraction: float = 0.25
    head_proj_dim: int = 32
    head_hidden_dim: int = 32
    head_layers: int = 2
    finetune_epochs: int = 60
    finetune_lr: float = 0.05
    finetune_warmup: int = 50
    finetune_momentum: float = 0.9
    # shared
    batch_size: int = 8
    clip_norm: float = 5.0
    decoder: str = "greedy"
    beam_width: int = 8
    seed: int = 0
    manifest: str = ""
    feature_cache: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.decoder not in ("greedy", "beam"):
            raise ValueError(f"decoder must be greedy or beam, got {self.decoder!r}")

    def decoar_config(self) -> DecoarConfig:
        return DecoarConfig(
            slice_size=self.slice_size,
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            ffn_hidden=self.ffn_hidden,
            bidirectional=self.bidirectional,
        )

    def pretrain_options(self, seed: int) -> TrainOptions:
        return TrainOptions(
            epochs=self.pretrain_epochs,
            batch_size=self.batch_size,
            schedule=NoamSchedule(self.pretrain_lr, self.pretrain_warmup),
            clip_norm=self.clip_norm,
            momentum=self.pretrain_momentum,
            seed=seed,
        )

    def finetune_options(self, seed: int) -> TrainOptions:
        return TrainOptions(
            epochs=self.finetune_epochs,
            batch_size=self.batch_size,
            schedule=NoamSchedule(self.finetune_lr, self.finetune_warmup),
            clip_norm=self.clip_norm,
            momentum=self.finetune_momentum,
            seed=seed,
        )

    def head_config(self, input_dim: int, num_classes: int) -> CtcHeadConfig:
        return CtcHeadConfig(input_dim, num_classes, self.head_proj_dim, self.head_hidden_dim, self.head_layers)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # ----------------------------------------------------------------- text io

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values: dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in types:
                raise ValueError(f"config line {lineno}: unknown or malformed entry {raw!r}")
            values[key] = _parse(value, types[key], key)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(value: str, typ: str, key: str):
    try:
        if typ == "bool":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {value!r} as {typ}") from None
    return value


# ---------------------------------------------------------------- seeds

SUBSTREAMS = ("corpus", "split", "init", "batching")


def substream_seed(seed: int, name: str) -> int:
    """Independent 32-bit seed for the named stream derived from the run seed."""
    if name not in SUBSTREAMS:
        raise ValueError(f"unknown seed substream {name!r}")
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


# ------------------------------------------------------------- features

@dataclass
class FeatureSet:
    """Normalized features keyed by utterance id, plus the per-speaker statistics."""

    sequences: dict[str, FeatureSequence]
    stats: dict[str, SpeakerStats]
    errors: list[tuple[str, str]] = field(default_factory=list)

    def frames(self, utterance_ids: Sequence[str]) -> list[np.ndarray]:
        return [self.sequences[u].frames for u in utterance_ids]


def extract_features(buffers: Sequence[AudioBuffer]) -> FeatureSet:
    """Log-mel features with per-speaker CMVN.

    Statistics pool every utterance of a speaker, whatever its split; this
    uses audio only, never transcripts. Buffers that fail are reported in
    ``errors`` and left out.
    """
    raw, errors = [], []
    for buf in buffers:
        try:
            raw.append(compute_logmel(buf))
        except AudioError as exc:
            errors.append((buf.utterance_id, str(exc)))
    stats = accumulate_speaker_stats(raw)
    normed = {s.utterance_id: apply_cmvn(s, stats[s.speaker_id]) for s in raw}
    return FeatureSet(normed, stats, errors)


def read_manifest_audio(manifest: CorpusManifest) -> tuple[list[AudioBuffer], list[tuple[str, str]]]:
    buffers, errors = [], []
    for utt in manifest.all_utterances():
        if utt.wav_path is None:
            errors.append((utt.utterance_id, "no wav path in manifest"))
            continue
        try:
            buffers.append(read_wav(manifest.wav_file(utt), utt.utterance_id, utt.speaker_id))
        except (AudioError, OSError) as exc:
            errors.append((utt.utterance_id, str(exc)))
    return buffers, errors


def synthetic_corpus(cfg: RunConfig, seed: int, out_dir: str | Path | None = None) -> SyntheticCorpus:
    return generate_synthetic(
        n_utts=cfg.n_utts,
        n_speakers=cfg.n_speakers,
        vocab_size=cfg.vocab_size,
        seed=substream_seed(seed, "corpus"),
        n_dev=cfg.n_dev,
        n_test=cfg.n_test,
        noise_level=cfg.noise_level,
        out_dir=out_dir,
    )


# ------------------------------------------------------------- training

def _ids(utts) -> list[str]:
    return [u.utterance_id for u in utts]


def run_pretrain(
    cfg: RunConfig,
    manifest: CorpusManifest,
    feats: FeatureSet,
    seed: int,
    checkpoint_path: str | Path | None = None,
) -> PretrainResult:
    """Pretrain on the unlabeled pool, selecting on dev reconstruction loss."""
    pool = feats.frames([u for u in _ids(manifest["unlabeled_pool"]) if u in feats.sequences])
    dev = feats.frames([u for u in _ids(manifest["dev"]) if u in feats.sequences])
    model = DecoarModel(cfg.decoar_config(), seed=substream_seed(seed, "init"))
    opts = cfg.pretrain_options(substream_seed(seed, "batching"))
    return train_pretrain(pool, cfg.decoar_config(), opts, dev, model=model, checkpoint_path=checkpoint_path)


def input_features(
    feats: FeatureSet, utterance_ids: Sequence[str], model: DecoarModel | None
) -> list[np.ndarray]:
    """Filterbank frames, or frozen-encoder outputs when ``model`` is given."""
    frames = feats.frames(utterance_ids)
    return frames if model is None else decoar_features(model, frames)


@dataclass
class FinetuneRun:
    result: FinetuneResult
    test_report: "EvalReport"
    labeled: int


def run_finetune(
    cfg: RunConfig,
    manifest: CorpusManifest,
    feats: FeatureSet,
    seed: int,
    model: DecoarModel | None = None,
) -> FinetuneRun:
    """Train a CTC head on ``cfg.labeled_fraction`` of the labels and score test.

    Pass a pretrained ``model`` for DeCoAR features, or ``None`` for the
    filterbank baseline; both use the same head configuration.
    """
    split = split_labeled_fraction(manifest, cfg.labeled_fraction, substream_seed(seed, "split"))
    train = [u for u in split["labeled_train"] if u.utterance_id in feats.sequences]
    dev = [u for u in split["dev"] if u.utterance_id in feats.sequences]
    x_train = input_features(feats, _ids(train), model)
    x_dev = input_features(feats, _ids(dev), model)
    head_cfg = cfg.head_config(x_train[0].shape[1], manifest.vocabulary.num_classes)
    result = train_finetune(
        x_train,
        [u.transcript for u in train],
        head_cfg,
        cfg.finetune_options(substream_seed(seed, "batching")),
        x_dev,
        [u.transcript for u in dev],
        init_seed=substream_seed(seed, "init"),
    )
    report = evaluate(result.head, split["test"], feats, model, cfg.decoder, cfg.beam_width)
    result.test_per = report.per
    return FinetuneRun(result, report, len(train))


# ------------------------------------------------------------- evaluation

@dataclass
class UtteranceResult:
    utterance_id: str
    reference: tuple[int, ...]
    hypothesis: list[int] | None
    counts: EditCounts | None
    error: str | None = None


@dataclass
class EvalReport:
    rows: list[UtteranceResult]

    @property
    def totals(self) -> EditCounts:
        s = i = d = 0
        for r in self.rows:
            c = r.counts if r.counts is not None else edit_distance(r.reference, [])
            s, i, d = s + c.substitutions, i + c.insertions, d + c.deletions
        return EditCounts(s + i + d, s, i, d)

    @property
    def ref_len(self) -> int:
        return sum(len(r.reference) for r in self.rows)

    @property
    def per(self) -> float:
        """Aggregate PER in percent; failed utterances count as all deletions."""
        n = self.ref_len
        return 100.0 * self.totals.distance / n if n else 0.0

    def to_tsv(self) -> str:
        lines = ["utterance_id\tref_len\tsubstitutions\tinsertions\tdeletions\tper\tstatus"]
        for r in self.rows:
            n = len(r.reference)
            if r.counts is None:
                lines.append(f"{r.utterance_id}\t{n}\t-\t-\t-\t-\terror: {r.error}")
                continue
            c = r.counts
            per = 100.0 * c.distance / n if n else 0.0
            lines.append(f"{r.utterance_id}\t{n}\t{c.substitutions}\t{c.insertions}\t{c.deletions}\t{per:.4f}\tok")
        t = self.totals
        lines.append(f"TOTAL\t{self.ref_len}\t{t.substitutions}\t{t.insertions}\t{t.deletions}\t{self.per:.4f}\t-")
        return "\n".join(lines) + "\n"

    def decode_lines(self, vocab: LabelVocabulary) -> str:
        return "".join(
            f"{r.utterance_id}\t{' '.join(vocab.decode(r.hypothesis))}\n" for r in self.rows if r.hypothesis is not None
        )


def score(references: Mapping[str, Sequence[int]], hypotheses: Mapping[str, Sequence[int] | None]) -> EvalReport:
    """Edit-distance report; a missing hypothesis is scored as empty output."""
    rows = []
    for uid, ref in references.items():
        hyp = hypotheses.get(uid)
        rows.append(UtteranceResult(uid, tuple(ref), None if hyp is None else list(hyp),
                                    edit_distance(ref, [] if hyp is None else hyp)))
    return EvalReport(rows)


def decoder_fn(decoder: str, beam_width: int) -> Callable[[np.ndarray], list[int]]:
    if decoder == "greedy":
        return greedy_decode
    if decoder == "beam":
        return lambda lp: prefix_beam_decode(lp, beam_width)
    raise ValueError(f"unknown decoder {decoder!r}")


def evaluate(
    head: CtcHead,
    utterances,
    feats: FeatureSet,
    model: DecoarModel | None = None,
    decoder: str = "greedy",
    beam_width: int = 8,
) -> EvalReport:
    """Decode ``utterances`` and score them; missing features become per-utterance errors."""
    decode = decoder_fn(decoder, beam_width)
    rows = []
    ok = [u for u in utterances if u.utterance_id in feats.sequences]
    xs = input_features(feats, _ids(ok), model)
    hyps: dict[str, list[int]] = {}
    for k in range(0, len(xs), 16):
        for u, lp in zip(ok[k : k + 16], head.log_probs(xs[k : k + 16])):
            hyps[u.utterance_id] = decode(lp)
    for u in utterances:
        ref = tuple(u.transcript or ())
        if u.utterance_id not in hyps:
            rows.append(UtteranceResult(u.utterance_id, ref, None, None, "no features for utterance"))
        else:
            hyp = hyps[u.utterance_id]
            rows.append(UtteranceResult(u.utterance_id, ref, hyp, edit_distance(ref, hyp)))
    return EvalReport(rows)


# --------------------------------------------------------------- ablation

ABLATION_GRID = {
    "slice_size": [("slice=12", {"slice_size": 12}), ("slice=18", {"slice_size": 18}), ("slice=22", {"slice_size": 22})],
    "directionality": [("unidirectional", {"bidirectional": False}), ("bidirectional", {"bidirectional": True})],
}


@dataclass
class AblationRow:
    config: str
    dev_per: float
    test_per: float
    per_seed: list[tuple[float, float]]


def run_ablation(
    cfg: RunConfig,
    axis: str,
    seeds: Sequence[int],
    corpus_for: Callable[[int], tuple[CorpusManifest, FeatureSet]],
) -> list[AblationRow]:
    """Pretrain + finetune-decoar for every grid point, seed-averaged.

    ``corpus_for(seed)`` supplies the splits, so every grid point of a seed
    sees the identical corpus.
    """
    if axis not in ABLATION_GRID:
        raise ValueError(f"axis must be one of {sorted(ABLATION_GRID)}, got {axis!r}")
    data = {s: corpus_for(s) for s in seeds}
    rows = []
    for name, change in ABLATION_GRID[axis]:
        point = cfg.replace(**change)
        scores = []
        for s in seeds:
            manifest, feats = data[s]
            pre = run_pretrain(point, manifest, feats, s)
            ft = run_finetune(point, manifest, feats, s, pre.best_model)
            scores.append((ft.result.dev_per, ft.result.test_per))
            log.info("ablation %s seed %d: dev %.2f test %.2f", name, s, *scores[-1])
        dev, test = np.mean(scores, axis=0)
        rows.append(AblationRow(name, float(dev), float(test), scores))
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = ["config\tdev_per\ttest_per"]
    lines += [f"{r.config}\t{r.dev_per:.4f}\t{r.test_per:.4f}" for r in rows]
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------- reconstruction

@dataclass
class ReconstructionDump:
    truth: np.ndarray
    predictions: dict[int, np.ndarray]

    @property
    def errors(self) -> dict[int, float]:
        return {i: float(np.mean(np.abs(p - self.truth[i : i + len(p)]))) for i, p in self.predictions.items()}


def reconstruct(model: DecoarModel, x: np.ndarray, offsets: Sequence[int]) -> ReconstructionDump:
    """Offset-``i`` head predictions aligned so row t estimates frame t + i."""
    return ReconstructionDump(np.asarray(x), {i: reconstruct_spectrogram(model, x, i) for i in offsets})



def copy_previous_error(xs: Sequence[np.ndarray]) -> float:
    """Mean ℓ1 error of predicting each frame by the one before it."""
    diffs = np.concatenate([np.abs(x[1:] - x[:-1]).ravel() for x in xs if len(x) > 1])
    return float(diffs.mean())


def held_out_reconstruction(model: DecoarModel, xs: Sequence[np.ndarray], offsets: Sequence[int]) -> dict[int, float]:
    """Frame-weighted mean ℓ1 reconstruction error per offset over ``xs``."""
    usable = [np.asarray(x) for x in xs if len(x) > model.K]
    sums = {i: 0.0 for i in offsets}
    count = 0
    for x in usable:
        dump = reconstruct(model, x, offsets)
        n = dump.truth.shape[0] - model.K
        for i, e in dump.errors.items():
            sums[i] += e * n
        count += n
    return {i: s / count for i, s in sums.items()}


@dataclass
class DeskResults:
    """One seed of the directional experiment matrix."""

    seed: int
    loss_curve: list[float]
    reconstruction: dict[int, float]
    copy_previous: float
    per: dict[str, tuple[float, float]]  # run name -> (dev PER, test PER)


def run_desk_matrix(cfg: RunConfig, seed: int) -> DeskResults:
    """Pretrain (bi and uni), then finetune decoar/fbank heads at reduced and full labels."""
    corpus = synthetic_corpus(cfg, seed)
    manifest = corpus.manifest
    feats = extract_features(list(corpus.audio.values()))
    per: dict[str, tuple[float, float]] = {}

    def finetune(name, c, model):
        run = run_finetune(c, manifest, feats, seed, model)
        per[name] = (run.result.dev_per, run.result.test_per)
        log.info("seed %d %s: dev %.2f test %.2f", seed, name, *per[name])

    bi = run_pretrain(cfg.replace(bidirectional=True), manifest, feats, seed)
    dev_frames = feats.frames(_ids(manifest["dev"]))
    K = bi.best_model.K
    recon = held_out_reconstruction(bi.best_model, dev_frames, [0, K // 2, K])
    finetune("decoar", cfg, bi.best_model)
    finetune("fbank", cfg, None)
    finetune("fbank_full", cfg.replace(labeled_fraction=1.0), None)
    uni = run_pretrain(cfg.replace(bidirectional=False), manifest, feats, seed)
    finetune("decoar_uni", cfg, uni.best_model)
    return DeskResults(seed, bi.loss_curve, recon, copy_previous_error(dev_frames), per)
