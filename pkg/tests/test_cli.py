import csv
import hashlib
import json

import numpy as np
import pytest
from scipy.io import wavfile

from era_forge import dsp
from era_forge.cli import MANIFEST_NAME, main
from era_forge.data import EMBD_MAGIC, read_table

TRAIN_FLAGS = ["--channels", "4,8", "--embed-dim", "8", "--d-z", "4", "--blocks", "1", "--heads", "2",
               "--d-k", "8", "--excerpt-frames", "8", "--epochs", "2", "--batch-size", "16", "--lr", "3e-3",
               "--excerpts", "2", "--negatives", "2"]


def tree_hash(root):
    h = hashlib.sha1()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != MANIFEST_NAME:
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn")
    assert main(["gen-synthetic", "--tracks", "90", "--artists", "15", "--mels", "16", "--frames", "16",
                 "--d-bio", "8", "--seed", "1", "--out", str(out)]) == 0
    return out


def test_gen_synthetic_outputs(corpus, tmp_path):
    lines = (corpus / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 90
    names, vec = read_table(corpus / "bios.bioe")
    assert len(names) == 15 and vec.shape == (15, 8)
    rm = json.loads((corpus / MANIFEST_NAME).read_text())
    assert rm["command"] == "gen-synthetic" and rm["config"]["tracks"] == 90
    again = tmp_path / "again"
    assert main(["gen-synthetic", "--tracks", "90", "--artists", "15", "--mels", "16", "--frames", "16",
                 "--d-bio", "8", "--seed", "1", "--out", str(again)]) == 0
    assert tree_hash(again) == tree_hash(corpus)


def test_gen_synthetic_bad_span(tmp_path, capsys):
    assert main(["gen-synthetic", "--span", "2000:1990", "--out", str(tmp_path)]) == 2
    assert main(["gen-synthetic", "--tracks", "5", "--artists", "9", "--out", str(tmp_path)]) == 2


def test_replay_from_run_manifest(corpus, tmp_path):
    replay = tmp_path / "replay"
    assert main(["gen-synthetic", "--config", str(corpus / MANIFEST_NAME), "--out", str(replay)]) == 0
    assert tree_hash(replay) == tree_hash(corpus)


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"tracks": 20, "artists": 4, "mels": 8, "frames": 8, "d-bio": 4,
                               "out": str(tmp_path / "a")}))
    assert main(["gen-synthetic", "--config", str(cfg), "--tracks", "12"]) == 0
    assert len((tmp_path / "a" / "manifest.jsonl").read_text().splitlines()) == 12
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["gen-synthetic", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 2


def test_missing_manifest_is_usage_error(tmp_path):
    assert main(["extract-features", "--manifest", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 2
    assert main(["plot-distribution", "--manifest", str(tmp_path / "nope.jsonl"), "--out", "x.csv"]) == 2
    assert main(["train"]) == 2


def test_extract_features(tmp_path):
    rng = np.random.default_rng(0)
    audio = tmp_path / "audio"
    audio.mkdir()
    rows = []
    for i in range(3):
        wavfile.write(audio / f"s{i}.wav", 44100, (rng.uniform(-0.5, 0.5, 44100) * 32767).astype(np.int16))
        rows.append({"track_id": f"s{i}", "year": 1990 + i, "artist_id": "A", "audio_path": f"audio/s{i}.wav"})
    (audio / "broken.wav").write_bytes(b"not a wav")
    rows.append({"track_id": "bad", "year": 1990, "artist_id": "B", "audio_path": "audio/broken.wav"})
    m = tmp_path / "m.jsonl"
    m.write_text("\n".join(json.dumps(r) for r in rows))
    out = tmp_path / "feat"
    assert main(["extract-features", "--manifest", str(m), "--out", str(out), "--workers", "2"]) == 0
    first = dsp.read_mels(out / "features" / "s0.mels")
    assert first.shape == (224, dsp.n_frames_for(22050, 2048, 512))
    manifest = [json.loads(x) for x in (out / "manifest.jsonl").read_text().splitlines()]
    assert [r["track_id"] for r in manifest] == ["s0", "s1", "s2"]
    assert all("feature_path" in r and "audio_path" not in r for r in manifest)
    digest = hashlib.sha1((out / "features" / "s1.mels").read_bytes()).hexdigest()
    assert main(["extract-features", "--manifest", str(m), "--out", str(out)]) == 0
    assert hashlib.sha1((out / "features" / "s1.mels").read_bytes()).hexdigest() == digest
    only_bad = tmp_path / "bad.jsonl"
    only_bad.write_text(json.dumps(rows[-1]))
    assert main(["extract-features", "--manifest", str(only_bad), "--out", str(tmp_path / "f2")]) == 1


def test_plot_distribution(corpus, tmp_path):
    out = tmp_path / "dist.csv"
    assert main(["plot-distribution", "--manifest", str(corpus / "manifest.jsonl"), "--out", str(out),
                 "--svg", str(tmp_path / "dist.svg")]) == 0
    rows = list(csv.DictReader(open(out)))
    assert sum(int(r["count"]) for r in rows) == 90
    assert (tmp_path / "dist.svg").read_text().startswith("<svg")


def test_train_evaluate_export(corpus, tmp_path):
    m, b = str(corpus / "manifest.jsonl"), str(corpus / "bios.bioe")
    run = tmp_path / "run"
    assert main(["train", "--manifest", m, "--bios", b, "--variant", "audioart-mmc", "--granularity", "decade",
                 "--out", str(run)] + TRAIN_FLAGS) == 0
    assert {p.name for p in run.iterdir()} == {"model.erac", "loss_curve.csv", MANIFEST_NAME}
    ev = tmp_path / "eval"
    assert main(["evaluate", "--checkpoint", str(run / "model.erac"), "--manifest", m, "--bios", b,
                 "--out", str(ev)]) == 0
    rep = json.loads((ev / "report.json").read_text())
    assert set(rep["acc"]) == {"ACC_0", "ACC_1", "ACC_2"} and rep["n"] == 90
    assert main(["evaluate", "--checkpoint", str(run / "model.erac"), "--manifest", m, "--bios", b,
                 "--granularity", "year", "--out", str(ev)]) == 2
    for layer, width in (("z", 4), ("h_m", 8), ("h_a", 8)):
        f = tmp_path / "emb" / f"{layer}.embd"
        assert main(["export-embeddings", "--checkpoint", str(run / "model.erac"), "--manifest", m, "--bios", b,
                     "--layer", layer, "--out", str(f), "--excerpts", "2"]) == 0
        assert f.read_bytes()[:4] == EMBD_MAGIC
        names, vec = read_table(f, EMBD_MAGIC)
        assert len(names) == 90 and vec.shape == (90, width)
        if layer == "z":
            np.testing.assert_allclose(np.linalg.norm(vec, axis=1), 1.0, atol=1e-5)
    assert main(["export-embeddings", "--checkpoint", str(run / "model.erac"), "--manifest", m, "--bios", b,
                 "--layer", "q", "--out", str(tmp_path / "q.embd")]) == 2


def test_mmc_without_bios_is_config_error(corpus, tmp_path):
    assert main(["train", "--manifest", str(corpus / "manifest.jsonl"), "--variant", "audioart-mmc",
                 "--out", str(tmp_path)] + TRAIN_FLAGS) == 2


def test_year_granularity_has_64_classes(corpus, tmp_path):
    run = tmp_path / "cnn"
    assert main(["train", "--manifest", str(corpus / "manifest.jsonl"), "--variant", "audio-cnn",
                 "--alpha", "3", "--beta", "2", "--out", str(run)] + TRAIN_FLAGS) == 0
    from era_forge.models import EraModel
    model, header = EraModel.load(run / "model.erac")
    assert model.cfg.encoder.n_classes == 64
    assert header["train"]["alpha"] == 0 and header["train"]["beta"] == 0


def test_crossval_mean_table(corpus, tmp_path):
    out = tmp_path / "cv"
    assert main(["crossval", "--manifest", str(corpus / "manifest.jsonl"), "--variant", "audio-suc",
                 "--granularity", "decade", "--k", "3", "--out", str(out)] + TRAIN_FLAGS) == 0
    summary = json.loads((out / "report.json").read_text())
    per_fold = [json.loads((out / f"fold{f}" / "report.json").read_text()) for f in range(3)]
    for key in ("ACC_0", "ACC_1", "ACC_2"):
        assert summary["mean"][key] == pytest.approx(np.mean([r["acc"][key] for r in per_fold]), abs=1e-12)
    assert sum(r["n"] for r in per_fold) == 90
    rows = list(csv.reader(open(out / "mean.csv")))
    assert rows[0] == ["row", "ACC_0", "ACC_1", "ACC_2"] and rows[1][0] == "audio-suc"
    # the saved fold plan scores fold 1 identically through `evaluate`
    ev = tmp_path / "ev"
    assert main(["evaluate", "--checkpoint", str(out / "fold1" / "model.erac"), "--manifest",
                 str(corpus / "manifest.jsonl"), "--folds", str(out / "folds.json"), "--excerpts", "2",
                 "--out", str(ev)] + []) == 0
    assert json.loads((ev / "report.json").read_text())["acc"] == per_fold[1]["acc"]


def test_threads_env(monkeypatch):
    from era_forge.cli import worker_count
    monkeypatch.setenv("ERA_FORGE_THREADS", "1")
    assert worker_count(8) == 1
    monkeypatch.delenv("ERA_FORGE_THREADS")
    assert worker_count(3) == 3
