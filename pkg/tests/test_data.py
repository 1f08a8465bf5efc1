import json
import logging

import numpy as np
import pytest

from era_forge import dsp
from era_forge.data import (
    BIOE_MAGIC,
    EMBD_MAGIC,
    BioEmbeddingTable,
    EraDataset,
    ManifestError,
    SyntheticSpec,
    TrackRecord,
    generate_synthetic,
    linear_probe,
    load_manifest,
    make_batch,
    match_bios,
    normalize_name,
    read_table,
    sample_batch_indices,
    write_table,
)
from era_forge.metrics import DECADE, YEAR, acc_x


def write_lines(path, rows):
    path.write_text("\n".join(r if isinstance(r, str) else json.dumps(r) for r in rows) + "\n")


def test_manifest_parsing(tmp_path, caplog):
    m = tmp_path / "m.jsonl"
    write_lines(m, [
        {"track_id": "t1", "year": 1990, "artist_id": "A", "feature_path": "f/t1.mels"},
        {"track_id": "t2", "year": None, "artist_id": "B", "feature_path": "f/t2.mels"},
        {"track_id": "t3", "year": 2001, "artist_id": "B", "audio_path": "t3.wav", "bio_embedding_ref": 0},
    ])
    with caplog.at_level(logging.WARNING):
        tracks = load_manifest(m)
    assert [t.track_id for t in tracks] == ["t1", "t3"]
    assert "no year" in caplog.text
    assert tracks[1].bio_embedding_ref == 0


@pytest.mark.parametrize("rows,match", [
    (['{"track_id": "t1", "year": 1990'], ":1: malformed JSON"),
    ([{"year": 1990, "artist_id": "A", "feature_path": "x"}], "track_id"),
    ([{"track_id": "t", "year": 1990, "feature_path": "x"}], "artist_id"),
    ([{"track_id": "t", "year": 1990, "artist_id": "A"}], "exactly one"),
    ([{"track_id": "t", "year": 1990, "artist_id": "A", "feature_path": "x"}] * 2, "duplicate track_id"),
])
def test_manifest_errors(tmp_path, rows, match):
    m = tmp_path / "m.jsonl"
    write_lines(m, rows)
    with pytest.raises(ManifestError, match=match):
        load_manifest(m)


def test_manifest_year_span(tmp_path):
    m = tmp_path / "m.jsonl"
    write_lines(m, [{"track_id": "t", "year": 1930, "artist_id": "A", "feature_path": "x"}])
    with pytest.raises(ManifestError, match="outside"):
        load_manifest(m, YEAR.span)


def test_table_roundtrip(tmp_path):
    vec = np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32)
    names = ["Beyoncé", "a", "ß"]
    write_table(tmp_path / "t.bioe", names, vec)
    got_names, got = read_table(tmp_path / "t.bioe")
    assert got_names == names and np.array_equal(got, vec)
    raw = (tmp_path / "t.bioe").read_bytes()
    assert raw[:4] == BIOE_MAGIC
    write_table(tmp_path / "t.embd", names, vec, EMBD_MAGIC)
    with pytest.raises(ValueError, match="magic"):
        read_table(tmp_path / "t.embd")
    assert read_table(tmp_path / "t.embd", EMBD_MAGIC)[0] == names


def test_name_matching():
    assert normalize_name("  Beyoncé & The  Band! ") == "beyonce the band"
    table = BioEmbeddingTable(["Sigur Rós", "AC/DC"], np.ones((2, 2)))
    tracks = [TrackRecord("t1", 2000, "sigur ros", feature_path="x"),
              TrackRecord("t2", 2000, "Unknown", feature_path="y")]
    out = match_bios(tracks, table)
    assert out[0].bio_embedding_ref == 0 and out[1].bio_embedding_ref is None


def test_table_rejects_nan():
    with pytest.raises(ValueError, match="non-finite"):
        BioEmbeddingTable(["a"], np.array([[np.nan]]))


def toy_dataset(n=20, n_classes=4, frames=12):
    rng = np.random.default_rng(0)
    tracks = [TrackRecord(f"t{i}", 1947 + i % n_classes, f"a{i % 5}", feature_path=f"f{i}", bio_embedding_ref=i % 5)
              for i in range(n)]
    feats = [rng.standard_normal((6, frames)).astype(np.float32) for _ in range(n)]
    return EraDataset(tracks, feats, BioEmbeddingTable([f"a{i}" for i in range(5)], rng.standard_normal((5, 3))),
                      YEAR, excerpt_frames=8)


def test_excerpts_come_from_source():
    ds = toy_dataset()
    x = ds.excerpts([3, 4], np.random.default_rng(0))
    assert x.shape == (2, 6, 8)
    for row, i in zip(x, [3, 4]):
        src = ds.features[i]
        assert any(np.array_equal(row, src[:, s:s + 8]) for s in range(5))


def test_stratified_batches_cover_classes():
    labels = np.repeat(np.arange(8), 10)
    idx = sample_batch_indices(labels, np.arange(80), 16, np.random.default_rng(0))
    assert len(set(idx)) == 16
    assert np.all(np.bincount(labels[idx], minlength=8) == 2)


def test_uniform_batches_and_single_class():
    ds = toy_dataset()
    b = make_batch(ds, 6, 0, stratified=False, with_bio=True)
    assert b.x.shape == (6, 6, 8) and b.bio.shape == (6, 3)
    with pytest.raises(ValueError, match="single class"):
        make_batch(ds, 4, 0, pool=[0, 4, 8, 12])


def test_dataset_from_manifest(tmp_path):
    corpus = generate_synthetic(SyntheticSpec(n_tracks=30, n_artists=6, n_mels=8, n_frames=16, d_bio=4))
    manifest = corpus.write(tmp_path)
    ds = EraDataset.from_manifest(manifest, tmp_path / "bios.bioe", DECADE, excerpt_frames=8)
    assert len(ds) == 30 and ds.has_bios
    np.testing.assert_array_equal(ds.features[0], corpus.features[0])
    assert ds.labels().max() < 8
    np.testing.assert_array_equal(dsp.read_mels(tmp_path / corpus.tracks[0].feature_path), corpus.features[0])


def test_synthetic_deterministic_and_shaped():
    spec = SyntheticSpec(n_tracks=100, n_artists=10, seed=3)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert np.array_equal(a.features[5], b.features[5]) and a.tracks == b.tracks
    years = np.array([t.year for t in a.tracks])
    assert years.min() >= 1947 and years.max() <= 2010
    assert len({t.artist_id for t in a.tracks}) == 10
    assert a.bios.vectors.shape == (10, 32)


def test_synthetic_imbalance():
    c = generate_synthetic(SyntheticSpec(n_tracks=2000, n_artists=200, pre_fraction=0.1, seed=1))
    years = np.array([t.year for t in c.tracks])
    pre = np.mean(years < (1947 + 2010) / 2)
    assert 0.05 < pre < 0.2


def probe_accs(corpus, features):
    labels = corpus.dataset().labels()
    rng = np.random.default_rng(0)
    perm = rng.permutation(len(labels))
    tr, te = perm[: len(perm) * 3 // 4], perm[len(perm) * 3 // 4:]
    pred = linear_probe(features, labels, 64, tr, te)
    return acc_x(labels[te], pred, 0), acc_x(labels[te], pred, 3)


def corpus(drift):
    return generate_synthetic(SyntheticSpec(n_tracks=6400, n_artists=640, timbre_drift=drift))


def test_synthetic_drift_controls_separability():
    strong = corpus(1.0)
    assert probe_accs(strong, strong.clean)[0] > 0.9
    # observed (noisy) features averaged over time
    assert probe_accs(strong, np.stack([f.mean(axis=1) for f in strong.features]))[1] >= 0.8
    none = corpus(0.0)
    assert probe_accs(none, none.clean)[0] < 0.04
    double = corpus(2.0)
    assert probe_accs(double, np.stack([f.mean(axis=1) for f in double.features]))[0] >= 0.5
