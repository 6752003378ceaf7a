"""Batch command-line entry point: ``python -m radarasr <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import PipelineError

COMMANDS = ("gen-corpus", "train", "decode", "score", "radar-roundtrip", "latency", "plot-data")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="radarasr", description="Radar speech recognition toy pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key=value run configuration file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if name == "train":
            s.add_argument("--stage", action="append", type=int, choices=[1, 2, 3, 4],
                           help="stage to run (repeatable); default all four in order")
        if name == "decode":
            s.add_argument("--stage", type=int, default=4, choices=[1, 2, 3, 4])
            s.add_argument("--split", default="test", choices=["train", "test"])
            s.add_argument("--timing", action="store_true", help="append per-token chunk indices")
        if name == "score":
            s.add_argument("--transcripts", help="defaults to <output_dir>/transcripts.tsv")
        if name == "plot-data":
            s.add_argument("--kind", required=True, choices=["mel", "waveform", "loss"])
            s.add_argument("--uid", help="utterance id for mel/waveform (default: first test item)")
            s.add_argument("--stage-log", type=int, default=4, help="stage whose loss curve to emit")
    return p


def _corpus(cfg):
    from .corpus import read_corpus
    path = cfg.corpus_path
    if not (path / "manifest.tsv").exists():
        from .errors import MissingPrerequisite
        raise MissingPrerequisite(f"corpus manifest not found in {path}; run gen-corpus first")
    return read_corpus(path, cfg.corpus_spec())


def cmd_gen_corpus(cfg, args, out):
    from .corpus import build_corpus, write_corpus
    corpus = build_corpus(cfg.corpus_spec())
    manifest = write_corpus(corpus, cfg.corpus_path)
    cfg.write(cfg.corpus_path)
    out.write(f"manifest={manifest} train={len(corpus.train)} test={len(corpus.test)}\n")


def cmd_train(cfg, args, out):
    from .training import prepare_data, run_stage
    stages = args.stage or [1, 2, 3, 4]
    data = prepare_data(_corpus(cfg), with_background=cfg.augment_prob > 0)
    cfg.write(cfg.train_path)
    for stage in stages:
        result = run_stage(stage, data, cfg.train_path, cfg.model_config(), cfg.train_settings(stage),
                           cfg.loss_weights(), alignment_dir=cfg.corpus_path)
        last = result.log[-1] if result.log else {}
        out.write(f"stage={stage} checkpoint={result.checkpoint} final={json.dumps(last)}\n")


def cmd_decode(cfg, args, out):
    from . import numcore as nc
    from .decoding import JointDecoder, format_transcripts
    from .features import mel_spectrogram
    from .model import encode_mel
    from .training import load_stage, stage_paths
    weights, mcfg = load_stage(stage_paths(cfg.train_path, args.stage)["checkpoint"])
    corpus = _corpus(cfg)
    vocab = corpus.spec.vocabulary
    utts = corpus.test if args.split == "test" else corpus.train
    radio = args.stage in (1, 4)
    lines = []
    for u in utts:
        mel = mel_spectrogram(u.radio if radio else u.audio).values
        with nc.no_grad():
            hidden = encode_mel(mel, weights, mcfg).hidden
        session = JointDecoder(weights, mcfg, cfg.decode_config())
        session.feed(hidden)
        ids, _ = session.finalize()
        text = vocab.decode(ids)
        if args.timing:
            text += "\t" + " ".join(str(h) for h in _token_chunks(session, mcfg))
        lines.append((u.uid, text))
    path = Path(cfg.output_dir) / "transcripts.tsv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_transcripts(lines))
    cfg.write(cfg.output_dir)
    out.write(f"transcripts={path} utterances={len(lines)}\n")


def _token_chunks(session, mcfg):
    size = mcfg.chunk_size or len(session.frames)
    return [t // size for t in session.best.trigger_frames]


def cmd_score(cfg, args, out):
    from .evalmetrics import format_report, score_report
    corpus = _corpus(cfg)
    vocab = corpus.spec.vocabulary
    refs = {u.uid: vocab.decode(u.token_ids) for u in corpus.test}
    path = Path(args.transcripts) if args.transcripts else Path(cfg.output_dir) / "transcripts.tsv"
    if not path.exists():
        from .errors import MissingPrerequisite
        raise MissingPrerequisite(f"transcripts {path} not found; run decode first")
    hyps = {}
    for line in path.read_text().splitlines():
        uid, _, rest = line.partition("\t")
        hyps[uid] = rest.split("\t")[0]
    rows, summary = score_report(refs, hyps)
    report = Path(cfg.output_dir) / "score.jsonl"
    report.write_text(format_report(rows, summary))
    out.write(f"report={report} cer={summary['cer']:.4f} wer={summary['wer']:.4f}\n")


def cmd_radar_roundtrip(cfg, args, out):
    from .radarsim import RadarConfig, VibrationSignal, cross_correlation_peak, demodulate, synthesize_if
    rc = RadarConfig()
    fs = rc.chirps_per_second
    n = np.arange(2550)
    lines = ["amplitude_m\tfrequency_hz\trel_rmse\tlag"]
    for amp in (1e-5, 1e-4, 5e-4):
        for freq in (20.0, 440.0, 1000.0):
            x = amp * np.sin(2 * np.pi * freq * n / fs)
            v, _ = demodulate(synthesize_if(rc, VibrationSignal(fs, x), clutter=0.4 - 0.2j), rc)
            ref = x - x.mean()
            rel = np.sqrt(np.mean((v.displacement - ref) ** 2) / np.mean(ref ** 2))
            lines.append(f"{amp:g}\t{freq:g}\t{rel:.6f}\t{cross_correlation_peak(x, v.displacement)}")
    path = Path(cfg.output_dir) / "radar_roundtrip.tsv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    out.write("\n".join(lines) + "\n")


def cmd_latency(cfg, args, out):
    from .evalmetrics import frame_latency
    worst, avg = frame_latency(cfg.chunk_size, 4, 10.0)
    out.write(f"chunk_size={cfg.chunk_size} max_ms={worst:g} avg_ms={avg:g}\n")


def cmd_plot_data(cfg, args, out):
    if args.kind == "loss":
        from .training import stage_paths
        path = stage_paths(cfg.train_path, args.stage_log)["log"]
        if not path.exists():
            from .errors import MissingPrerequisite
            raise MissingPrerequisite(f"metrics log {path} not found")
        records = [json.loads(l) for l in path.read_text().splitlines() if l]
        keys = sorted({k for r in records for k in r} - {"epoch"})
        out.write("epoch\t" + "\t".join(keys) + "\n")
        for r in records:
            out.write(f"{r['epoch']}\t" + "\t".join(f"{r.get(k, float('nan')):.6g}" for k in keys) + "\n")
        return
    from .features import mel_spectrogram
    corpus = _corpus(cfg)
    utts = {u.uid: u for u in corpus.train + corpus.test}
    uid = args.uid or corpus.test[0].uid
    if uid not in utts:
        from .errors import ConfigError
        raise ConfigError(f"unknown utterance {uid}")
    u = utts[uid]
    if args.kind == "waveform":
        out.write("time_s\taudio\tradio\n")
        for i, (a, r) in enumerate(zip(u.audio.samples, u.radio.samples)):
            out.write(f"{i / u.audio.sample_rate:.6f}\t{a:.6g}\t{r:.6g}\n")
    else:
        out.write("modality\tframe\tmel_bin\tlog_energy\n")
        for name, w in (("audio", u.audio), ("radio", u.radio)):
            values = mel_spectrogram(w).values
            for t, row in enumerate(values):
                out.write("".join(f"{name}\t{t}\t{b}\t{v:.6g}\n" for b, v in enumerate(row)))


HANDLERS = {"gen-corpus": cmd_gen_corpus, "train": cmd_train, "decode": cmd_decode, "score": cmd_score,
            "radar-roundtrip": cmd_radar_roundtrip, "latency": cmd_latency, "plot-data": cmd_plot_data}


def run(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        from .config import load_config
        cfg = load_config(args.config, args.set)
        HANDLERS[args.command](cfg, args, out)
    except PipelineError as exc:
        msg = str(exc).replace("\n", " ")
        err.write(f"error={type(exc).__name__} code={exc.exit_code} msg={msg}\n")
        return exc.exit_code
    return 0


def main() -> None:
    sys.exit(run())
