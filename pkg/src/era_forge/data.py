"""Track manifests, biography embedding tables, batch assembly and a synthetic corpus."""

from __future__ import annotations

import json
import logging
import re
import struct
import unicodedata
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dsp
from .losses import contrastive_sets, text_shuffle
from .metrics import YEAR, Granularity, year_to_class

log = logging.getLogger(__name__)

BIOE_MAGIC = b"BIOE"
EMBD_MAGIC = b"EMBD"
TABLE_VERSION = 1


class ManifestError(ValueError):
    pass


@dataclass
class TrackRecord:
    track_id: str
    year: int
    artist_id: str
    feature_path: str | None = None
    audio_path: str | None = None
    bio_embedding_ref: int | None = None

    def __post_init__(self):
        if not self.track_id:
            raise ManifestError("track_id must be non-empty")
        if not self.artist_id:
            raise ManifestError(f"{self.track_id}: artist_id must be non-empty")
        if (self.feature_path is None) == (self.audio_path is None):
            raise ManifestError(f"{self.track_id}: exactly one of feature_path/audio_path is required")

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def load_manifest(path: str | Path, span: tuple[int, int] | None = None) -> list[TrackRecord]:
    """Read a JSONL manifest. Relative paths resolve against the manifest's directory."""
    path = Path(path)
    records: list[TrackRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(row, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            if row.get("year") is None:
                log.warning("%s:%d: record %r has no year; skipped", path, lineno, row.get("track_id"))
                continue
            for name in ("track_id", "artist_id"):
                if not row.get(name):
                    raise ManifestError(f"{path}:{lineno}: missing required field {name!r}")
            try:
                rec = TrackRecord(
                    track_id=str(row["track_id"]),
                    year=int(row["year"]),
                    artist_id=str(row["artist_id"]),
                    feature_path=row.get("feature_path"),
                    audio_path=row.get("audio_path"),
                    bio_embedding_ref=row.get("bio_embedding_ref"),
                )
            except ManifestError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from None
            if span is not None and not span[0] <= rec.year <= span[1]:
                raise ManifestError(f"{path}:{lineno}: year {rec.year} outside {span[0]}-{span[1]}")
            if rec.track_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate track_id {rec.track_id!r}")
            seen.add(rec.track_id)
            records.append(rec)
    return records


def write_manifest(path: str | Path, tracks: Sequence[TrackRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tracks:
            fh.write(json.dumps(t.to_json(), ensure_ascii=False) + "\n")


# -- biography embeddings ---------------------------------------------------


@dataclass
class BioEmbeddingTable:
    names: list[str]
    vectors: np.ndarray  # [count, dim]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.names):
            raise ValueError("vectors must be [len(names), dim]")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("biography embeddings contain non-finite values")
        self._index = {n: i for i, n in enumerate(self.names)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int | None:
        return self._index.get(name)

    def write(self, path: str | Path, magic: bytes = BIOE_MAGIC) -> None:
        write_table(path, self.names, self.vectors, magic)

    @classmethod
    def read(cls, path: str | Path, magic: bytes = BIOE_MAGIC) -> "BioEmbeddingTable":
        names, vectors = read_table(path, magic)
        return cls(names, vectors)


def write_table(path: str | Path, names: Sequence[str], vectors: np.ndarray, magic: bytes = BIOE_MAGIC) -> None:
    """Keyed float32 table: magic, u32 version, u32 dim, u32 count, then per row a
    u16-length-prefixed UTF-8 key followed by ``dim`` float32 LE values."""
    vectors = np.asarray(vectors, dtype="<f4")
    count, dim = vectors.shape if vectors.size else (len(names), 0)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<III", TABLE_VERSION, dim, count))
        for name, row in zip(names, vectors):
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(row.tobytes())


def read_table(path: str | Path, magic: bytes = BIOE_MAGIC) -> tuple[list[str], np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != magic:
        raise ValueError(f"{path}: expected magic {magic!r}, found {blob[:4]!r}")
    version, dim, count = struct.unpack_from("<III", blob, 4)
    if version != TABLE_VERSION:
        raise ValueError(f"{path}: unsupported table version {version}")
    off = 16
    names, rows = [], []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        names.append(blob[off:off + n].decode("utf-8"))
        off += n
        rows.append(np.frombuffer(blob, dtype="<f4", count=dim, offset=off))
        off += 4 * dim
    vectors = np.stack(rows).astype(np.float32) if rows else np.zeros((0, dim), np.float32)
    return names, vectors


_PUNCT = re.compile(r"[^\w\s]")
_SPACE = re.compile(r"\s+")


def normalize_name(name: str) -> str:
    """Lowercase, strip diacritics and punctuation, collapse whitespace."""
    decomposed = unicodedata.normalize("NFKD", name)
    plain = "".join(c for c in decomposed if not unicodedata.combining(c))
    return _SPACE.sub(" ", _PUNCT.sub(" ", plain.lower())).strip()


def match_bios(tracks: Sequence[TrackRecord], bios: BioEmbeddingTable, normalizer=normalize_name) -> list[TrackRecord]:
    """Attach ``bio_embedding_ref`` by normalized artist name; unmatched tracks keep ``None``."""
    lookup: dict[str, int] = {}
    for i, name in enumerate(bios.names):
        lookup.setdefault(normalizer(name), i)
    out = [replace(t, bio_embedding_ref=lookup.get(normalizer(t.artist_id))) for t in tracks]
    matched = sum(t.bio_embedding_ref is not None for t in out)
    if matched == 0 and tracks:
        log.warning("match_bios: none of %d tracks matched a biography", len(tracks))
    else:
        log.info("match_bios: matched %d of %d tracks", matched, len(tracks))
    return out


# -- in-memory dataset and batching ------------------------------------------


class EraDataset:
    """Tracks with their feature matrices and optional biography vectors, held in memory."""

    def __init__(
        self,
        tracks: Sequence[TrackRecord],
        features: Sequence[np.ndarray],
        bios: BioEmbeddingTable | None = None,
        granularity: Granularity = YEAR,
        excerpt_frames: int = dsp.DEFAULT_EXCERPT,
    ):
        if len(tracks) != len(features):
            raise ValueError("tracks and features must align")
        self.tracks = list(tracks)
        self.features = list(features)
        self.bios = bios
        self.granularity = granularity
        self.excerpt_frames = excerpt_frames
        self.years = np.array([t.year for t in self.tracks], dtype=np.int64)
        self.artists = np.array([t.artist_id for t in self.tracks])
        self._labels: dict[Granularity, np.ndarray] = {}
        lengths = {f.shape[1] for f in self.features}
        self._stack = np.stack(self.features) if len(lengths) == 1 and self.features else None

    def __len__(self) -> int:
        return len(self.tracks)

    @property
    def n_mels(self) -> int:
        return self.features[0].shape[0]

    @property
    def has_bios(self) -> bool:
        return self.bios is not None and all(t.bio_embedding_ref is not None for t in self.tracks)

    def labels(self, gran: Granularity | None = None) -> np.ndarray:
        gran = gran or self.granularity
        if gran not in self._labels:
            self._labels[gran] = np.array([year_to_class(y, gran) for y in self.years], dtype=np.int64)
        return self._labels[gran]

    def excerpts(self, indices, rng: np.random.Generator, n_frames: int | None = None) -> np.ndarray:
        n_frames = n_frames or self.excerpt_frames
        indices = np.asarray(indices)
        if self._stack is not None and self._stack.shape[2] >= n_frames:
            starts = rng.integers(0, self._stack.shape[2] - n_frames + 1, size=len(indices))
            cols = starts[:, None] + np.arange(n_frames)
            return self._stack[indices[:, None], :, cols].transpose(0, 2, 1)
        return np.stack([dsp.sample_excerpt(self.features[i], n_frames, rng, pad=True) for i in indices])

    def bio_matrix(self, indices) -> np.ndarray:
        if self.bios is None:
            raise ValueError("dataset has no biography table")
        refs = [self.tracks[i].bio_embedding_ref for i in indices]
        if any(r is None for r in refs):
            raise ValueError("some tracks have no matched biography")
        return self.bios.vectors[refs]

    def subset(self, indices) -> "EraDataset":
        indices = list(np.asarray(indices))
        return EraDataset([self.tracks[i] for i in indices], [self.features[i] for i in indices],
                          self.bios, self.granularity, self.excerpt_frames)

    def with_bios_only(self) -> "EraDataset":
        keep = [i for i, t in enumerate(self.tracks) if t.bio_embedding_ref is not None]
        return self.subset(keep)

    @classmethod
    def from_manifest(
        cls,
        manifest: str | Path,
        bios: str | Path | BioEmbeddingTable | None = None,
        granularity: Granularity = YEAR,
        excerpt_frames: int = dsp.DEFAULT_EXCERPT,
        require_bio: bool = False,
    ) -> "EraDataset":
        manifest = Path(manifest)
        tracks = load_manifest(manifest, granularity.span)
        table = BioEmbeddingTable.read(bios) if isinstance(bios, (str, Path)) else bios
        if table is not None and any(t.bio_embedding_ref is None for t in tracks):
            tracks = match_bios(tracks, table)
        features = []
        for t in tracks:
            if t.feature_path is None:
                raise ManifestError(f"{t.track_id}: no feature_path; run extract-features first")
            p = Path(t.feature_path)
            features.append(dsp.read_mels(p if p.is_absolute() else manifest.parent / p))
        ds = cls(tracks, features, table, granularity, excerpt_frames)
        return ds.with_bios_only() if require_bio else ds


@dataclass
class Batch:
    indices: np.ndarray
    x: np.ndarray  # [B, n_mels, frames]
    labels: np.ndarray
    artists: np.ndarray
    bio: np.ndarray | None = None

    @property
    def sets(self):
        """(P, N): per-anchor same-label and different-label row indices."""
        return contrastive_sets(self.labels)

    def negatives(self, K: int, rng) -> np.ndarray:
        return text_shuffle(self.artists, self.labels, K, rng)


def sample_batch_indices(
    labels: np.ndarray,
    pool: np.ndarray,
    batch_size: int,
    rng: np.random.Generator,
    stratified: bool = True,
    per_class: int = 2,
) -> np.ndarray:
    """Choose batch rows from ``pool``.

    Stratified mode visits classes in random order, cyclically, taking up to
    ``per_class`` unused tracks per visit, so most anchors get positives and negatives.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    pool = np.asarray(pool)
    size = min(batch_size, len(pool))
    if not stratified:
        return rng.choice(pool, size=size, replace=False)
    by_class: dict[int, list[int]] = {}
    for i in pool:
        by_class.setdefault(int(labels[i]), []).append(int(i))
    queues = {c: list(rng.permutation(m)) for c, m in by_class.items()}
    chosen: list[int] = []
    classes = list(rng.permutation(list(by_class)))
    while len(chosen) < size:
        progressed = False
        for c in classes:
            q = queues[c]
            take = min(per_class, len(q), size - len(chosen))
            if take:
                chosen += q[:take]
                del q[:take]
                progressed = True
            if len(chosen) >= size:
                break
        if not progressed:
            break
    return np.asarray(chosen, dtype=np.int64)


def make_batch(
    dataset: EraDataset,
    batch_size: int,
    rng_seed=None,
    pool=None,
    granularity: Granularity | None = None,
    stratified: bool = True,
    contrastive: bool = True,
    with_bio: bool = False,
) -> Batch:
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    labels = dataset.labels(granularity)
    pool = np.arange(len(dataset)) if pool is None else np.asarray(pool)
    if contrastive and len(np.unique(labels[pool])) < 2:
        raise ValueError("dataset has a single class; contrastive variants need at least two")
    idx = sample_batch_indices(labels, pool, batch_size, rng, stratified)
    x = dataset.excerpts(idx, rng)
    bio = dataset.bio_matrix(idx) if with_bio else None
    return Batch(idx, x, labels[idx], dataset.artists[idx], bio)


# -- synthetic corpus ---------------------------------------------------------


@dataclass
class SyntheticSpec:
    n_tracks: int = 640
    n_artists: int = 64
    year_span: tuple[int, int] = (1947, 2010)
    seed: int = 0
    timbre_drift: float = 1.0
    bio_signal: float = 0.2  # fraction of biography variance that encodes the artist's era
    pre_fraction: float | None = None  # share of artists centred before the span midpoint; None = uniform
    n_mels: int = 32
    n_frames: int = 64
    d_bio: int = 32
    artist_spread: float = 2.0  # std of a track's year around its artist's centre, years
    artist_timbre: float = 0.6
    track_timbre: float = 0.3
    frame_noise: float = 0.5
    texture: float = 1.0
    texture_period: float = 8.0

    def __post_init__(self):
        if self.n_artists > self.n_tracks:
            raise ValueError("n_artists must be <= n_tracks")
        if self.n_artists < 1:
            raise ValueError("need at least one artist")
        if self.timbre_drift < 0:
            raise ValueError("timbre_drift must be >= 0")
        if self.year_span[1] <= self.year_span[0]:
            raise ValueError(f"invalid year span {self.year_span}")
        if not 0.0 <= self.bio_signal <= 1.0:
            raise ValueError("bio_signal must be in [0, 1]")


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    tracks: list[TrackRecord]
    features: list[np.ndarray]
    clean: np.ndarray  # [n_tracks, n_mels] noise-free spectral profile per track
    bios: BioEmbeddingTable

    def dataset(self, granularity: Granularity = YEAR, excerpt_frames: int | None = None) -> EraDataset:
        return EraDataset(self.tracks, self.features, self.bios, granularity,
                          excerpt_frames or self.spec.n_frames // 2)

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        (out / "features").mkdir(parents=True, exist_ok=True)
        for t, f in zip(self.tracks, self.features):
            dsp.write_mels(out / t.feature_path, f)
        write_manifest(out / "manifest.jsonl", self.tracks)
        self.bios.write(out / "bios.bioe")
        return out / "manifest.jsonl"


def _smooth_profile(rng: np.random.Generator, n: int, n_waves: int = 4) -> np.ndarray:
    pos = np.arange(n) / n
    out = np.zeros(n)
    for k in range(1, n_waves + 1):
        out += rng.standard_normal() * np.cos(np.pi * k * pos + rng.uniform(0, 2 * np.pi)) / k
    return out / (np.std(out) + 1e-12)


def _era_code(u: np.ndarray, n_freq: int = 8) -> np.ndarray:
    """Smooth periodic code of a position u in [0, 1]; nearby eras get similar codes."""
    f = np.arange(1, n_freq + 1)
    ang = np.pi * np.asarray(u)[..., None] * f
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1) / np.sqrt(n_freq)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    """Desk-scale stand-in corpus whose spectra trend with release year.

    Each track's mel pattern is a spectral bump whose centre moves up and whose level
    grows with the year (scaled by ``timbre_drift``), plus an artist timbre, a track
    timbre and per-frame noise. Biography vectors mix an era code of the artist's
    centre year (``bio_signal`` of the variance) with artist-specific noise.
    """
    rng = np.random.default_rng(spec.seed)
    y0, y1 = spec.year_span
    M, F = spec.n_mels, spec.n_frames
    if spec.pre_fraction is None:
        centre = rng.uniform(y0, y1, size=spec.n_artists)
    else:
        mid = (y0 + y1) / 2.0
        pre = rng.random(spec.n_artists) < spec.pre_fraction
        centre = np.where(pre, rng.uniform(y0, mid, spec.n_artists), rng.uniform(mid, y1, spec.n_artists))
    artist_of = np.concatenate([np.arange(spec.n_artists),
                                rng.integers(0, spec.n_artists, spec.n_tracks - spec.n_artists)])
    rng.shuffle(artist_of)
    years = np.clip(np.rint(centre[artist_of] + spec.artist_spread * rng.standard_normal(spec.n_tracks)),
                    y0, y1).astype(np.int64)

    drift = spec.timbre_drift
    era_gain = min(drift, 1.0)  # no drift => nothing in the audio tracks the year, not even artist timbre
    bins = np.arange(M)
    u = (years - y0) / (y1 - y0)
    mu = M * (0.5 + 0.45 * drift * (u - 0.5))
    level = 1.0 + 0.5 * drift * u
    template = level[:, None] * np.exp(-((bins[None, :] - mu[:, None]) ** 2) / (2 * 1.5 ** 2))
    # fine texture: a circular bump cycling every `texture_period` years
    phase = (years - y0) / spec.texture_period * M
    dist = np.abs(bins[None, :] - phase[:, None] % M)
    dist = np.minimum(dist, M - dist)
    template += spec.texture * drift * np.exp(-dist ** 2 / (2 * 1.5 ** 2))
    artist_timbre = np.stack([_smooth_profile(rng, M) for _ in range(spec.n_artists)])
    track_timbre = np.stack([_smooth_profile(rng, M, 6) for _ in range(spec.n_tracks)])
    clean = template + era_gain * spec.artist_timbre * artist_timbre[artist_of] + spec.track_timbre * track_timbre
    features = []
    for i in range(spec.n_tracks):
        frames = clean[i][:, None] + spec.frame_noise * rng.standard_normal((M, F))
        features.append(frames.astype(np.float32))

    side = max(spec.d_bio, 16)
    proj = np.linalg.qr(rng.standard_normal((side, side)))[0][:spec.d_bio, :16]
    u_art = (centre - y0) / (y1 - y0)
    era = _era_code(u_art) @ proj.T
    era *= np.sqrt(spec.d_bio) / np.linalg.norm(era, axis=1, keepdims=True)
    noise = rng.standard_normal((spec.n_artists, spec.d_bio))
    bio = np.sqrt(spec.bio_signal) * era + np.sqrt(1.0 - spec.bio_signal) * noise
    names = [f"artist_{a:04d}" for a in range(spec.n_artists)]
    table = BioEmbeddingTable(names, bio)

    tracks = [
        TrackRecord(
            track_id=f"track_{i:06d}",
            year=int(years[i]),
            artist_id=names[artist_of[i]],
            feature_path=f"features/track_{i:06d}.mels",
            bio_embedding_ref=int(artist_of[i]),
        )
        for i in range(spec.n_tracks)
    ]
    return SyntheticCorpus(spec, tracks, features, clean.astype(np.float32), table)


def linear_probe(features: np.ndarray, labels: np.ndarray, n_classes: int, train_idx, test_idx, ridge: float = 1e-3):
    """Closed-form least-squares one-hot probe; returns predicted classes for ``test_idx``."""
    X = np.asarray(features, dtype=np.float64)
    X = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    Y = np.eye(n_classes)[labels]
    Xt = X[train_idx]
    W = np.linalg.solve(Xt.T @ Xt + ridge * np.eye(X.shape[1]), Xt.T @ Y[train_idx])
    return (X[test_idx] @ W).argmax(axis=1)
