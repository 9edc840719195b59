from pathlib import Path

import numpy as np
import pytest

from decoar import checkpoint
from decoar.cli import main
from decoar.corpus import CorpusManifest
from decoar.ctc import CtcHead, CtcHeadConfig
from decoar.features import decode_features, frame_count, read_feature_cache
from decoar.pipeline import (
    ABLATION_GRID,
    RunConfig,
    evaluate,
    extract_features,
    format_ablation,
    run_ablation,
    score,
    substream_seed,
    synthetic_corpus,
)

TINY = """\
n_utts=12
n_dev=4
n_test=4
n_speakers=2
vocab_size=4
hidden_dim=6
ffn_hidden=8
slice_size=5
pretrain_epochs=2
finetune_epochs=2
head_proj_dim=6
head_hidden_dim=6
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    (d / "tiny.txt").write_text(TINY)
    assert main(["synth", "--config", str(d / "tiny.txt"), "--out", str(d / "corp"), "--seed", "1"]) == 0
    assert main(["features", "--manifest", str(d / "corp/manifest.tsv")]) == 0
    return d


def test_config_roundtrip_and_validation():
    cfg = RunConfig(hidden_dim=7, bidirectional=False, noise_level=0.125, mode="finetune-fbank")
    assert RunConfig.from_text(cfg.to_text()) == cfg
    assert RunConfig.from_text("# comment\nslice_size = 12  # trailing\n").slice_size == 12
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_text("nonsense=1\n")
    with pytest.raises(ValueError, match="cannot parse"):
        RunConfig.from_text("hidden_dim=big\n")
    with pytest.raises(ValueError, match="mode"):
        RunConfig(mode="train")


def test_seed_substreams():
    seeds = [substream_seed(0, n) for n in ("corpus", "split", "init", "batching")]
    assert len(set(seeds)) == 4
    assert substream_seed(0, "init") == substream_seed(0, "init") != substream_seed(1, "init")
    with pytest.raises(ValueError):
        substream_seed(0, "other")


# ----------------------------------------------------------------- features

def test_feature_cache_matches_framing_and_is_idempotent(workdir):
    feat_dir = workdir / "corp/features"
    first = (feat_dir / "features.bin").read_bytes()
    manifest = CorpusManifest.load(workdir / "corp/manifest.tsv")
    seqs = {s.utterance_id: s for s in decode_features(first)}
    for u in manifest.all_utterances():
        n = len(manifest.wav_file(u).read_bytes()) - 44
        assert seqs[u.utterance_id].num_frames == frame_count(n // 2, 400, 160)
        assert seqs[u.utterance_id].normalized
    assert main(["features", "--manifest", str(workdir / "corp/manifest.tsv")]) == 0
    assert (feat_dir / "features.bin").read_bytes() == first
    stats = checkpoint.load(feat_dir / "speaker_stats.bin")
    assert {k.rsplit(".", 1)[0] for k in stats} == {"spk00", "spk01"}


def test_missing_wav_is_reported(tmp_path, workdir, capsys):
    text = (workdir / "corp/manifest.tsv").read_text()
    corp = workdir / "corp"
    lines = [line.replace("\twav/", f"\t{corp}/wav/") for line in text.splitlines()]
    lines.append("test\tghost\tspk00\t/nonexistent/ghost.wav\tp00")
    (tmp_path / "manifest.tsv").write_text("\n".join(lines) + "\n")
    (tmp_path / "vocab.txt").write_text((corp / "vocab.txt").read_text())
    assert main(["features", "--manifest", str(tmp_path / "manifest.tsv"), "--out", str(tmp_path / "f")]) == 1
    report = (tmp_path / "f/errors.tsv").read_text()
    assert "ghost" in report
    assert "ghost" in capsys.readouterr().err


# --------------------------------------------------------------- evaluation

def test_score_oracle_and_empty_hypotheses():
    refs = {"a": (0, 1, 2), "b": (1,)}
    assert score(refs, dict(refs)).per == 0.0
    empty = score(refs, {"a": [], "b": []})
    assert empty.per == 100.0 and empty.totals.deletions == 4
    assert score(refs, {}).per == 100.0


def test_beam_width_one_matches_greedy_aggregate(workdir):
    manifest = CorpusManifest.load(workdir / "corp/manifest.tsv")
    feats = {s.utterance_id: s for s in read_feature_cache(workdir / "corp/features/features.bin")}
    from decoar.pipeline import FeatureSet

    fs = FeatureSet(feats, {})
    head = CtcHead(CtcHeadConfig(40, manifest.vocabulary.num_classes, 6, 6), seed=3)
    g = evaluate(head, manifest["test"], fs, decoder="greedy")
    b = evaluate(head, manifest["test"], fs, decoder="beam", beam_width=1)
    assert g.per == b.per
    tsv = g.to_tsv()
    assert tsv.splitlines()[0].startswith("utterance_id\tref_len\tsubstitutions")
    assert tsv.splitlines()[-1].startswith("TOTAL")


# ------------------------------------------------------------ end to end cli

def _run(workdir, name, *args):
    out = workdir / name
    code = main([*args, "--manifest", str(workdir / "corp/manifest.tsv"), "--config", str(workdir / "tiny.txt"),
                 "--out", str(out), "--seed", "2"])
    assert code == 0
    return out


def test_pretrain_finetune_evaluate_reconstruct(workdir):
    pre = _run(workdir, "pre", "pretrain")
    pre2 = _run(workdir, "pre2", "pretrain")
    assert (pre / "model.ckpt").read_bytes() == (pre2 / "model.ckpt").read_bytes()
    metrics = (pre / "metrics.tsv").read_text().splitlines()
    assert metrics[0] == "epoch\tstep\tmean_loss\tdev_metric\tlr" and len(metrics) == 3

    ft = _run(workdir, "ft", "finetune", "--features", "decoar", "--pretrained", str(pre / "model.ckpt"))
    summary = (ft / "summary.tsv").read_text().splitlines()
    assert summary[0].split("\t")[-2:] == ["dev_per", "test_per"]
    assert summary[1].startswith("decoar\t0.25\t3\t2\t")
    decoded = (ft / "decode_test.txt").read_text().splitlines()
    assert all(len(line.split("\t")) == 2 for line in decoded)

    code = main(["evaluate", "--manifest", str(workdir / "corp/manifest.tsv"), "--config", str(ft / "config.resolved.txt"),
                 "--out", str(workdir / "ev"), "--checkpoint", str(ft / "head.ckpt"),
                 "--pretrained", str(pre / "model.ckpt")])
    assert code == 0
    assert (workdir / "ev/decode_test.txt").read_text() == (ft / "decode_test.txt").read_text()

    rec = _run(workdir, "rec", "reconstruct", "--checkpoint", str(pre / "model.ckpt"), "--utterance", "utt0013",
               "--offsets", "0,2,4")
    dumps = read_feature_cache(rec / "reconstruction.bin")
    assert [d.utterance_id for d in dumps] == ["utt0013/truth", "utt0013/offset0", "utt0013/offset2", "utt0013/offset4"]
    T = dumps[0].num_frames
    assert all(d.num_frames == T - 4 for d in dumps[1:])
    assert np.loadtxt(rec / "offset2.txt").shape == (T - 4, 40)
    assert (rec / "summary.tsv").read_text().startswith("offset\tmean_l1\n0\t")


def test_resolved_config_reruns_without_original(workdir):
    ft = _run(workdir, "fb", "finetune", "--features", "fbank")
    resolved = ft / "config.resolved.txt"
    cfg = RunConfig.load(resolved)
    assert cfg.mode == "finetune-fbank" and cfg.seed == 2 and Path(cfg.manifest).exists()
    code = main(["finetune", "--config", str(resolved), "--out", str(workdir / "fb2"), "--features", "fbank"])
    assert code == 0
    assert (workdir / "fb2/head.ckpt").read_bytes() == (ft / "head.ckpt").read_bytes()


def test_cli_errors_exit_nonzero(workdir, capsys):
    pre = workdir / "pre"
    if not (pre / "model.ckpt").exists():
        _run(workdir, "pre", "pretrain")
    code = main(["reconstruct", "--manifest", str(workdir / "corp/manifest.tsv"), "--out", str(workdir / "bad"),
                 "--checkpoint", str(pre / "model.ckpt"), "--utterance", "nope"])
    assert code == 1 and "unknown utterance" in capsys.readouterr().err
    code = main(["finetune", "--manifest", str(workdir / "corp/manifest.tsv"), "--out", str(workdir / "bad2"),
                 "--features", "decoar"])
    assert code == 1


def test_ablation_table_shares_splits():
    cfg = RunConfig.from_text(TINY)
    calls = []

    def corpus_for(seed):
        calls.append(seed)
        c = synthetic_corpus(cfg, seed)
        return c.manifest, extract_features(list(c.audio.values()))

    rows = run_ablation(cfg, "directionality", [0], corpus_for)
    assert calls == [0]
    assert [r.config for r in rows] == [name for name, _ in ABLATION_GRID["directionality"]]
    table = format_ablation(rows).splitlines()
    assert table[0] == "config\tdev_per\ttest_per" and len(table) == 3
    with pytest.raises(ValueError):
        run_ablation(cfg, "depth", [0], corpus_for)
