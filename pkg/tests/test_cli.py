import io

import pytest

from radarasr import checkpoint
from radarasr.cli import run
from radarasr.config import RunConfig, UnknownConfigKey, load_config
from radarasr.errors import CorruptHeader, ShapeDirectoryMismatch
from radarasr.model import ModelConfig, init_weights


def _weights():
    return init_weights(ModelConfig(model_dim=8, heads=2, ffn_dim=8, n_mels=8, frontend_channels=(1, 2)), 5)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    w = _weights()
    cfg = {"model_dim": "8", "meta.note": "x"}
    checkpoint.save(tmp_path / "m.ckpt", w, cfg)
    back, items = checkpoint.load(tmp_path / "m.ckpt")
    assert items == cfg and list(back) == list(w)
    for name in w:
        assert back[name].data.tobytes() == w[name].data.astype("<f4").tobytes()


def test_checkpoint_corruption(tmp_path):
    blob = checkpoint.to_bytes(_weights(), {"a": "1"})
    with pytest.raises(CorruptHeader):
        checkpoint.from_bytes(blob[:40])
    with pytest.raises(CorruptHeader):
        checkpoint.from_bytes(b"JUNK" + blob[4:])
    with pytest.raises(ShapeDirectoryMismatch):
        checkpoint.from_bytes(blob[:-4])
    with pytest.raises(ShapeDirectoryMismatch):
        checkpoint.from_bytes(blob + b"\0\0\0\0")


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("seed=3\n# comment\nchunk_size = 8\n")
    cfg = load_config(path, ["beam_size=2"])
    assert (cfg.seed, cfg.chunk_size, cfg.beam_size) == (3, 8, 2)
    with pytest.raises(UnknownConfigKey):
        load_config(None, ["nonsense=1"])
    assert load_config(None, [f"{line}" for line in RunConfig().to_text().splitlines()]) == RunConfig()


def _cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


def test_latency_command():
    code, out, _ = _cli("latency", "--set", "chunk_size=32")
    assert code == 0 and "max_ms=1280 avg_ms=640" in out


def test_error_codes(tmp_path):
    code, _, err = _cli("latency", "--set", "bogus=1")
    assert code == 2 and err.startswith("error=UnknownConfigKey code=2")
    code, _, err = _cli("decode", "--set", f"output_dir={tmp_path}")
    assert code == 3 and "MissingPrerequisite" in err
    assert len(err.strip().splitlines()) == 1


def test_radar_roundtrip_command(tmp_path):
    code, out, _ = _cli("radar-roundtrip", "--set", f"output_dir={tmp_path}")
    rows = [line.split("\t") for line in out.strip().splitlines()[1:]]
    assert code == 0 and len(rows) == 9
    assert all(float(r[2]) < 0.01 and r[3] == "0" for r in rows)


FAST = ["--set", "utterance_count=12", "--set", "encoder_layers=1", "--set", "decoder_layers=1",
        "--set", "model_dim=16", "--set", "ffn_dim=16", "--set", "heads=2", "--set", "frontend_channels=2,2",
        "--set", "epochs_radio_nonstreaming=1", "--set", "epochs_audio_nonstreaming=1",
        "--set", "epochs_teacher=1", "--set", "epochs_student=1", "--set", "beam_size=2"]


def _pipeline(root):
    args = FAST + ["--set", f"output_dir={root}"]
    assert _cli("gen-corpus", *args)[0] == 0
    code, _, err = _cli("train", "--stage", "4", *args)
    assert code == 3 and "MissingPrerequisite" in err
    assert _cli("train", *args)[0] == 0
    assert _cli("decode", "--timing", *args)[0] == 0
    code, out, _ = _cli("score", *args)
    assert code == 0 and "cer=" in out
    return args


def test_pipeline_smoke_and_determinism(tmp_path):
    import json
    args = _pipeline(tmp_path / "a")
    _pipeline(tmp_path / "b")
    for rel in ("train/stage4.ckpt", "train/stage1.ckpt", "transcripts.tsv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    for rel in ("run.conf", "train/run.conf", "corpus/run.conf", "score.jsonl"):
        assert (tmp_path / "a" / rel).exists()
    lines = (tmp_path / "a" / "score.jsonl").read_text().splitlines()
    assert "summary" in json.loads(lines[-1])
    code, out, _ = _cli("plot-data", "--kind", "loss", *args)
    assert code == 0 and out.startswith("epoch\t")
    code, out, _ = _cli("plot-data", "--kind", "waveform", *args)
    assert code == 0 and len(out.splitlines()) > 100
    # the resolved config reproduces the run
    code, _, _ = _cli("train", "--config", str(tmp_path / "a" / "train" / "run.conf"),
                      "--set", f"output_dir={tmp_path / 'c'}", "--set", f"corpus_dir={tmp_path / 'a' / 'corpus'}")
    assert code == 0
    assert (tmp_path / "c/train/stage4.ckpt").read_bytes() == (tmp_path / "a/train/stage4.ckpt").read_bytes()
