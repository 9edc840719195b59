"""Command-line entry point: ``python -m decoar <command> ...``.

Every command writes ``config.resolved.txt`` into ``--out``; passing that
file back through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .corpus import CorpusManifest
from .ctc import CtcHead
from .features import (
    FeatureSequence,
    read_feature_cache,
    stats_from_arrays,
    stats_to_arrays,
    write_feature_cache,
)
from .model import DecoarModel
from .pipeline import (
    ABLATION_GRID,
    FeatureSet,
    RunConfig,
    evaluate,
    extract_features,
    format_ablation,
    read_manifest_audio,
    reconstruct,
    run_ablation,
    run_finetune,
    run_pretrain,
    synthetic_corpus,
)
from .trainer import format_metrics, load_best_model

log = logging.getLogger("decoar")


class CommandError(RuntimeError):
    pass


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def _offsets(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def _resolve(args, **extra) -> RunConfig:
    overrides = dict(extra)
    overrides["seed"] = _seeds(args.seed)[0] if getattr(args, "seed", None) else None
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if getattr(args, "manifest", None):
        overrides["manifest"] = str(Path(args.manifest).resolve())
    if getattr(args, "decoder", None):
        overrides["decoder"] = args.decoder
    if getattr(args, "beam_width", None) is not None:
        overrides["beam_width"] = args.beam_width
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config, **overrides)
    else:
        cfg = RunConfig.from_text("", **overrides)
    if cfg.manifest and not cfg.feature_cache:
        cfg = cfg.replace(feature_cache=str(Path(cfg.manifest).parent / "features" / "features.bin"))
    return cfg


def _out(args, cfg: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.resolved.txt")
    return out


def _load_manifest(cfg: RunConfig) -> CorpusManifest:
    if not cfg.manifest:
        raise CommandError("--manifest is required (or manifest= in the config)")
    return CorpusManifest.load(cfg.manifest)


def _load_features(cfg: RunConfig) -> FeatureSet:
    path = Path(cfg.feature_cache)
    if not path.exists():
        raise CommandError(f"feature cache {path} not found; run the features command first")
    seqs = read_feature_cache(path)
    stats_path = path.with_name("speaker_stats.bin")
    stats = {}
    if stats_path.exists():
        stats = stats_from_arrays(checkpoint.load(stats_path))
    return FeatureSet({s.utterance_id: s for s in seqs}, stats)


def _write_errors(path: Path, errors) -> None:
    lines = ["utterance_id\terror"] + [f"{u}\t{msg}" for u, msg in errors]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synthetic_corpus(cfg, cfg.seed, out)
    cfg = cfg.replace(manifest=str((out / "manifest.tsv").resolve()))
    cfg.save(out / "config.resolved.txt")
    print(f"wrote {out / 'manifest.tsv'}")
    return 0


def cmd_features(args) -> int:
    cfg = _resolve(args)
    manifest = _load_manifest(cfg)
    out = Path(args.out) if args.out else Path(cfg.feature_cache).parent
    out.mkdir(parents=True, exist_ok=True)
    buffers, errors = read_manifest_audio(manifest)
    feats = extract_features(buffers)
    errors = errors + feats.errors
    order = [u.utterance_id for u in manifest.all_utterances() if u.utterance_id in feats.sequences]
    write_feature_cache(out / "features.bin", [feats.sequences[u] for u in order])
    checkpoint.save(out / "speaker_stats.bin", stats_to_arrays(feats.stats))
    _write_errors(out / "errors.tsv", errors)
    cfg.replace(feature_cache=str((out / "features.bin").resolve())).save(out / "config.resolved.txt")
    print(f"{len(order)} utterances cached, {len(errors)} errors")
    if errors:
        for uid, msg in errors:
            print(f"error: {uid}: {msg}", file=sys.stderr)
        return 1
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve(args, mode="pretrain")
    out = _out(args, cfg)
    manifest, feats = _load_manifest(cfg), _load_features(cfg)
    result = run_pretrain(cfg, manifest, feats, cfg.seed, checkpoint_path=out / "pretrain.ckpt")
    result.best_model.save(out / "model.ckpt")
    (out / "metrics.tsv").write_text(format_metrics(result.state.history), encoding="utf-8")
    print(f"best dev reconstruction loss {result.state.best_metric:.6f}; model in {out / 'model.ckpt'}")
    return 0


def _feature_kind(args, cfg: RunConfig) -> str:
    if args.features:
        return args.features
    return "fbank" if cfg.mode == "finetune-fbank" else "decoar"


def _encoder(args, kind: str) -> DecoarModel | None:
    if kind == "fbank":
        return None
    if not args.pretrained:
        raise CommandError("decoar features need --pretrained <model checkpoint>")
    return load_best_model(args.pretrained)


def cmd_finetune(args) -> int:
    cfg = _resolve(args)
    kind = _feature_kind(args, cfg)
    cfg = cfg.replace(mode=f"finetune-{kind}")
    out = _out(args, cfg)
    manifest, feats = _load_manifest(cfg), _load_features(cfg)
    model = _encoder(args, kind)
    run = run_finetune(cfg, manifest, feats, cfg.seed, model)
    run.result.head.save(out / "head.ckpt")
    (out / "metrics.tsv").write_text(format_metrics(run.result.state.history), encoding="utf-8")
    (out / "decode_test.txt").write_text(run.test_report.decode_lines(manifest.vocabulary), encoding="utf-8")
    (out / "report_test.tsv").write_text(run.test_report.to_tsv(), encoding="utf-8")
    summary = "features\tlabeled_fraction\tlabeled_utts\tseed\tdev_per\ttest_per\n"
    summary += f"{kind}\t{cfg.labeled_fraction}\t{run.labeled}\t{cfg.seed}\t{run.result.dev_per:.4f}\t{run.result.test_per:.4f}\n"
    (out / "summary.tsv").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    out = _out(args, cfg)
    manifest, feats = _load_manifest(cfg), _load_features(cfg)
    kind = _feature_kind(args, cfg)
    head = CtcHead.load(args.checkpoint)
    report = evaluate(head, manifest[args.split], feats, _encoder(args, kind), cfg.decoder, cfg.beam_width)
    (out / f"decode_{args.split}.txt").write_text(report.decode_lines(manifest.vocabulary), encoding="utf-8")
    (out / f"report_{args.split}.tsv").write_text(report.to_tsv(), encoding="utf-8")
    t = report.totals
    print(f"{args.split} PER {report.per:.4f} (S={t.substitutions} I={t.insertions} D={t.deletions} N={report.ref_len})")
    failed = [r for r in report.rows if r.error is not None]
    for r in failed:
        print(f"error: {r.utterance_id}: {r.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    out = _out(args, cfg)
    seeds = _seeds(args.seed) or [cfg.seed]
    if cfg.manifest:
        manifest, feats = _load_manifest(cfg), _load_features(cfg)

        def corpus_for(seed):
            return manifest, feats
    else:
        def corpus_for(seed):
            corpus = synthetic_corpus(cfg, seed)
            return corpus.manifest, extract_features(list(corpus.audio.values()))

    rows = run_ablation(cfg, args.axis, seeds, corpus_for)
    table = format_ablation(rows)
    (out / f"ablation_{args.axis}.tsv").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _resolve(args)
    out = _out(args, cfg)
    feats = _load_features(cfg)
    if args.utterance not in feats.sequences:
        raise CommandError(f"unknown utterance {args.utterance!r}")
    model = load_best_model(args.checkpoint)
    seq = feats.sequences[args.utterance]
    offsets = _offsets(args.offsets) if args.offsets else [0, model.K // 2, model.K]
    dump = reconstruct(model, seq.frames, offsets)
    seqs = [FeatureSequence(dump.truth, f"{seq.utterance_id}/truth", seq.speaker_id, True)]
    seqs += [FeatureSequence(p, f"{seq.utterance_id}/offset{i}", seq.speaker_id, True) for i, p in dump.predictions.items()]
    write_feature_cache(out / "reconstruction.bin", seqs)
    np.savetxt(out / "truth.txt", dump.truth, fmt="%.8g", delimiter="\t")
    for i, p in dump.predictions.items():
        np.savetxt(out / f"offset{i}.txt", p, fmt="%.8g", delimiter="\t")
    summary = "offset\tmean_l1\n" + "".join(f"{i}\t{e:.6f}\n" for i, e in dump.errors.items())
    (out / "summary.tsv").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decoar", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True, out_required=True):
        if manifest:
            sp.add_argument("--manifest")
        sp.add_argument("--config")
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--seed", default=None, help="run seed; comma list for ablate")
        sp.add_argument("--mode", choices=("pretrain", "finetune-decoar", "finetune-fbank"))

    sp = sub.add_parser("synth", help="generate the synthetic corpus (wavs + manifest)")
    common(sp, manifest=False)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("features", help="log-mel + per-speaker CMVN feature cache")
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("pretrain", help="slice-reconstruction pretraining")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="train a CTC head on decoar or filterbank features")
    common(sp)
    sp.add_argument("--features", choices=("decoar", "fbank"))
    sp.add_argument("--pretrained", help="pretrained model checkpoint (decoar features)")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("evaluate", help="decode a split and report PER with S/I/D")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="CTC head checkpoint")
    sp.add_argument("--split", default="test", choices=("labeled_train", "dev", "test"))
    sp.add_argument("--features", choices=("decoar", "fbank"))
    sp.add_argument("--pretrained")
    sp.add_argument("--decoder", choices=("greedy", "beam"))
    sp.add_argument("--beam-width", type=int)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="slice-size or directionality grid")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(ABLATION_GRID))
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("reconstruct", help="dump per-offset slice reconstructions")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="pretrained model checkpoint")
    sp.add_argument("--utterance", required=True)
    sp.add_argument("--offsets", help="comma-separated head offsets (default 0,mid,K)")
    sp.set_defaults(func=cmd_reconstruct)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is None:
        args.seed = ""
    try:
        return args.func(args)
    except (CommandError, ValueError, OSError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
