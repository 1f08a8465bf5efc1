"""Command-line entry points: feature extraction, training, evaluation, exports and synthetic data.

Every command writes a ``run_manifest.json`` into its output directory. Passing
that file back through ``--config`` replays the run. Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, dsp
from .data import EMBD_MAGIC, EraDataset, SyntheticSpec, generate_synthetic, load_manifest, write_manifest, write_table
from .metrics import YEAR, class_distribution, evaluate, granularity, mean_reports, write_distribution_csv
from .models import VARIANTS, AudioEncoderConfig, EraModel, FusionConfig, ModelConfig
from .nncore import ConfigError
from .train import FoldPlan, TrainConfig, kfold, train_run

log = logging.getLogger("era_forge")

MANIFEST_NAME = "run_manifest.json"
THREADS_ENV = "ERA_FORGE_THREADS"


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 2."""


# -- run manifests -------------------------------------------------------------


def git_blob_hash(path: str | Path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)  # path -> blob hash
    input_hash: str = ""
    started: str = ""
    finished: str = ""
    outputs: list[str] = field(default_factory=list)
    version: str = __version__

    def hash_inputs(self, paths) -> None:
        for p in paths:
            if p is not None and Path(p).is_file():
                self.inputs[str(p)] = git_blob_hash(p)
        combined = "".join(f"{k}\0{v}\n" for k, v in sorted(self.inputs.items()))
        self.input_hash = hashlib.sha1(combined.encode()).hexdigest()

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2))
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _config_snapshot(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "config", "log_level")}


def _finish(args, out_dir: Path, inputs, outputs, started: str) -> None:
    rm = RunManifest(args.command, _config_snapshot(args), started=started, finished=_now(),
                     outputs=[str(o) for o in outputs])
    rm.hash_inputs(inputs)
    rm.write(out_dir)


def worker_count(requested: int | None) -> int:
    cap = os.environ.get(THREADS_ENV)
    n = requested or os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(1, n)


def _require_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


# -- extract-features --------------------------------------------------------------


def cmd_extract_features(args) -> int:
    started = _now()
    manifest = _require_file(args.manifest, "manifest")
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    tracks = load_manifest(manifest)
    fb = dsp.mel_filterbank(args.mels, args.win, args.rate, args.fmin, args.fmax)

    def one(t):
        if t.audio_path is None:
            p = Path(t.feature_path)
            return replace(t, feature_path=str(p if p.is_absolute() else (manifest.parent / p).resolve())), None
        try:
            src = Path(t.audio_path)
            w = dsp.resample(dsp.read_wav(src if src.is_absolute() else manifest.parent / src), args.rate)
            mel = dsp.melspectrogram(w, args.mels, args.win, args.hop, filterbank=fb)
            rel = f"features/{t.track_id}.mels"
            dsp.write_mels(out / rel, mel.values)
            return replace(t, feature_path=rel, audio_path=None), None
        except Exception as e:  # per-track failure, logged and skipped
            return None, f"{t.track_id}: {e}"

    with ThreadPoolExecutor(worker_count(args.workers)) as pool:
        results = list(pool.map(one, tracks))
    done = [t for t, _ in results if t is not None]
    for _, err in results:
        if err:
            log.error("feature extraction failed for %s", err)
    n_audio = sum(t.audio_path is not None for t in tracks)
    n_failed = sum(err is not None for _, err in results)
    if n_audio and n_failed == n_audio:
        log.error("all %d tracks failed", n_audio)
        return 1
    write_manifest(out / "manifest.jsonl", done)
    log.info("extracted %d tracks (%d failed)", n_audio - n_failed, n_failed)
    _finish(args, out, [manifest], [out / "manifest.jsonl", out / "features"], started)
    return 0


# -- shared model / data plumbing -----------------------------------------------------


def _granularity(args):
    return granularity(args.granularity, args.base_year, args.n_classes)


def _load_dataset(args, gran, require_bio: bool) -> EraDataset:
    manifest = _require_file(args.manifest, "manifest")
    bios = getattr(args, "bios", None)
    if require_bio and bios is None:
        raise UsageError("audioart-mmc needs a biography table (--bios)")
    if bios is not None:
        _require_file(bios, "bios")
    ds = EraDataset.from_manifest(manifest, bios, gran, args.excerpt_frames if "excerpt_frames" in args else 1024,
                                  require_bio=require_bio)
    if len(ds) == 0:
        raise UsageError("no usable tracks in the manifest")
    return ds


def _model_config(args, ds: EraDataset, gran) -> ModelConfig:
    channels = [int(c) for c in str(args.channels).split(",") if c.strip()]
    enc = AudioEncoderConfig(channels, args.embed_dim, gran.n_classes, ds.n_mels, args.excerpt_frames)
    d_bio = ds.bios.dim if ds.bios is not None else 1
    return ModelConfig(args.variant, enc, FusionConfig(args.blocks, args.heads, args.d_k), args.d_z, d_bio)


def _train_config(args) -> TrainConfig:
    return TrainConfig(args.variant, lr=args.lr, batch_size=args.batch_size, alpha=args.alpha, beta=args.beta,
                       tau=args.tau, tau_m=args.tau_m, n_negatives=args.negatives, epochs=args.epochs,
                       patience=args.patience, seed=args.seed, clip_norm=args.clip_norm or None,
                       stratified=not args.uniform_batches, supcon=args.supcon, eval_excerpts=args.excerpts,
                       select_metric=args.select_metric)


def _fold_plan(args, ds: EraDataset, k: int) -> FoldPlan:
    ids = [t.track_id for t in ds.tracks]
    if args.folds:
        return FoldPlan.load(_require_file(args.folds, "folds"), ids)
    return kfold(len(ds), k, args.seed, args.val_fraction)


# -- train ---------------------------------------------------------------------


def cmd_train(args) -> int:
    started = _now()
    gran = _granularity(args)
    ds = _load_dataset(args, gran, args.variant == "audioart-mmc")
    mc = _model_config(args, ds, gran)
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.folds:
        plan = _fold_plan(args, ds, 0)
        train_idx, val_idx = plan.train(args.fold), plan.val(args.fold)
    else:
        perm = np.random.default_rng(args.seed).permutation(len(ds))
        n_val = int(round(args.val_fraction * len(ds)))
        train_idx, val_idx = np.sort(perm[n_val:]), np.sort(perm[:n_val])
    ck, curve = out / "model.erac", out / "loss_curve.csv"
    res = train_run(cfg, ds, mc, train_idx, val_idx, curve, None, gran)
    res.model.save(ck, {"train": cfg.to_dict(), "granularity": gran.to_dict(), "best_epoch": res.best_epoch,
                        "fold": args.fold if args.folds else None, "excerpt_frames": args.excerpt_frames})
    log.info("best epoch %d, validation score %.4f", res.best_epoch, res.best_val)
    _finish(args, out, [args.manifest, args.bios, args.folds], [ck, curve], started)
    return 0


# -- evaluate / crossval ---------------------------------------------------------------


ACC_FIELDS = ["ACC_0", "ACC_1", "ACC_2", "ACC_3"]


def write_table_csv(path: Path, rows: list[tuple[str, dict[int, float]]]) -> None:
    """Rows of ACC_x columns, the layout of the results tables."""
    keys = sorted({k for _, acc in rows for k in acc})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row"] + [f"ACC_{k}" for k in keys])
        for name, acc in rows:
            w.writerow([name] + [f"{acc[k]:.4f}" for k in keys])


def cmd_evaluate(args) -> int:
    started = _now()
    ck = _require_file(args.checkpoint, "checkpoint")
    model, header = EraModel.load(ck)
    saved = header.get("granularity")
    if saved is None:
        gran = granularity("year" if model.cfg.encoder.n_classes == YEAR.n_classes else "decade")
    else:
        gran = granularity(saved["name"], saved["base_year"], saved["n_classes"])
    if args.granularity is not None and args.granularity != gran.name:
        raise UsageError(f"checkpoint was trained at {gran.name!r} granularity, not {args.granularity!r}")
    args.excerpt_frames = model.cfg.encoder.n_frames
    ds = _load_dataset(args, gran, model.cfg.uses_mmc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.folds:
        plan = _fold_plan(args, ds, 0)
        fold = args.fold if args.fold is not None else (header.get("fold") or 0)
        indices = plan.test(fold)
    else:
        fold, indices = None, np.arange(len(ds))
    rep = evaluate(model, ds, gran, indices, args.excerpts, seed=args.seed)
    rep.extra.update(checkpoint=str(ck), fold=fold, variant=model.variant)
    rep.write_json(out / "report.json")
    rep.write_confusion_csv(out / "confusion.csv")
    write_table_csv(out / "table.csv", [(model.variant, rep.acc)])
    print(json.dumps({f"ACC_{k}": round(v, 4) for k, v in rep.acc.items()}))
    _finish(args, out, [ck, args.manifest, args.bios, args.folds], [out / "report.json", out / "table.csv"], started)
    return 0


def cmd_crossval(args) -> int:
    started = _now()
    gran = _granularity(args)
    ds = _load_dataset(args, gran, args.variant == "audioart-mmc")
    mc = _model_config(args, ds, gran)
    cfg = _train_config(args)
    plan = _fold_plan(args, ds, args.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "folds.json", [t.track_id for t in ds.tracks])
    folds = range(plan.k) if args.only_folds is None else [int(f) for f in args.only_folds.split(",")]
    reports = []
    for f in folds:
        d = out / f"fold{f}"
        d.mkdir(exist_ok=True)
        res = train_run(cfg, ds, mc, plan.train(f), plan.val(f), d / "loss_curve.csv", None, gran)
        res.model.save(d / "model.erac", {"train": cfg.to_dict(), "granularity": gran.to_dict(),
                                          "best_epoch": res.best_epoch, "fold": f})
        rep = evaluate(res.model, ds, gran, plan.test(f), args.excerpts, seed=args.seed)
        rep.extra.update(fold=f, best_epoch=res.best_epoch, variant=args.variant)
        rep.write_json(d / "report.json")
        reports.append(rep)
        log.info("fold %d: %s", f, {k: round(v, 4) for k, v in rep.acc.items()})
    mean = mean_reports(reports)
    write_table_csv(out / "per_fold.csv", [(f"fold{r.extra['fold']}", r.acc) for r in reports])
    write_table_csv(out / "mean.csv", [(args.variant, mean)])
    summary = {"variant": args.variant, "granularity": gran.name, "k": plan.k,
               "mean": {f"ACC_{k}": v for k, v in mean.items()}, "folds": [r.to_dict() for r in reports]}
    (out / "report.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary["mean"]))
    _finish(args, out, [args.manifest, args.bios, args.folds], [out / "report.json", out / "mean.csv"], started)
    return 0


# -- exports ---------------------------------------------------------------------


def track_embeddings(model: EraModel, ds: EraDataset, layer: str, n_excerpts: int, seed: int,
                     batch_size: int = 128) -> np.ndarray:
    """Per-track embedding averaged over random excerpts; z rows are re-normalized to unit length."""
    rng = np.random.default_rng(seed)
    out = None
    for _ in range(n_excerpts):
        for lo in range(0, len(ds), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(ds)))
            x = ds.excerpts(idx, rng)
            bio = ds.bio_matrix(idx) if model.cfg.uses_mmc else None
            emb = model.embeddings(x, bio)[layer]
            if out is None:
                out = np.zeros((len(ds), emb.shape[1]))
            out[idx] += emb
    out /= n_excerpts
    if layer == "z":
        out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out


def cmd_export_embeddings(args) -> int:
    started = _now()
    ck = _require_file(args.checkpoint, "checkpoint")
    model, header = EraModel.load(ck)
    available = {"h_a"} | ({"h_m"} if model.cfg.uses_mmc else set()) | ({"z"} if model.cfg.uses_ec else set())
    if args.layer not in available:
        raise UsageError(f"layer {args.layer!r} not available for {model.variant}; choose from {sorted(available)}")
    saved = header.get("granularity") or YEAR.to_dict()
    gran = granularity(saved["name"], saved["base_year"], saved["n_classes"])
    args.excerpt_frames = model.cfg.encoder.n_frames
    ds = _load_dataset(args, gran, model.cfg.uses_mmc)
    emb = track_embeddings(model, ds, args.layer, args.excerpts, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(out, [t.track_id for t in ds.tracks], emb, EMBD_MAGIC)
    log.info("wrote %d %s embeddings of width %d", len(ds), args.layer, emb.shape[1])
    _finish(args, out.parent, [ck, args.manifest, args.bios], [out], started)
    return 0


def write_distribution_svg(hist: dict[int, int], path: Path, width: int = 640, height: int = 240) -> None:
    years = list(hist)
    peak = max(hist.values())
    bar = width / max(1, len(years))
    rects = []
    for i, y in enumerate(years):
        h = (height - 20) * hist[y] / peak
        rects.append(f'<rect x="{i * bar:.1f}" y="{height - 20 - h:.1f}" width="{bar * 0.9:.1f}" height="{h:.1f}">'
                     f'<title>{y}: {hist[y]}</title></rect>')
    label = f'<text x="0" y="{height - 4}" font-size="10">{years[0]}</text>' \
            f'<text x="{width - 30}" y="{height - 4}" font-size="10">{years[-1]}</text>'
    path.write_text(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
                    + "".join(rects) + label + "</svg>\n")


def cmd_plot_distribution(args) -> int:
    started = _now()
    manifest = _require_file(args.manifest, "manifest")
    hist = class_distribution(t.year for t in load_manifest(manifest))
    if not hist:
        raise UsageError("manifest has no dated tracks")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_distribution_csv(hist, out)
    outputs = [out]
    if args.svg:
        write_distribution_svg(hist, Path(args.svg))
        outputs.append(Path(args.svg))
    _finish(args, out.parent, [manifest], outputs, started)
    return 0


# -- gen-synthetic -----------------------------------------------------------------


def parse_span(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid span {text!r}; expected Y0:Y1") from None
    if hi <= lo:
        raise argparse.ArgumentTypeError(f"invalid span {text!r}; Y1 must exceed Y0")
    return lo, hi


def cmd_gen_synthetic(args) -> int:
    started = _now()
    span = parse_span(args.span) if isinstance(args.span, str) else tuple(args.span)
    try:
        spec = SyntheticSpec(n_tracks=args.tracks, n_artists=args.artists, year_span=span, seed=args.seed,
                             timbre_drift=args.drift, bio_signal=args.bio_signal, pre_fraction=args.pre_fraction,
                             n_mels=args.mels, n_frames=args.frames, d_bio=args.d_bio)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    manifest = generate_synthetic(spec).write(out)
    _finish(args, out, [], [manifest, out / "bios.bioe", out / "features"], started)
    return 0


# -- parser ------------------------------------------------------------------------


def _add_data_flags(p, bios=True):
    p.add_argument("--manifest", help="JSONL track manifest")
    if bios:
        p.add_argument("--bios", help="biography embedding table (BIOE)")
    p.add_argument("--excerpts", type=int, default=8, help="random excerpts averaged per track at test time")
    p.add_argument("--seed", type=int, default=0)


def _add_train_flags(p):
    _add_data_flags(p)
    p.add_argument("--variant", choices=VARIANTS, default="audio-cnn")
    p.add_argument("--granularity", choices=["year", "decade"], default="year")
    p.add_argument("--base-year", type=int, default=None)
    p.add_argument("--n-classes", type=int, default=None)
    p.add_argument("--alpha", type=float, default=1.0, help="MMC weight")
    p.add_argument("--beta", type=float, default=1.0, help="EC weight")
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--tau-m", type=float, default=0.07)
    p.add_argument("--negatives", type=int, default=7, help="text-shuffle negatives per anchor")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=15)
    p.add_argument("--clip-norm", type=float, default=5.0, help="0 disables clipping")
    p.add_argument("--uniform-batches", action="store_true", help="disable class-stratified batches")
    p.add_argument("--supcon", action="store_true", help="SupCon denominator instead of negatives-only")
    p.add_argument("--select-metric", type=int, default=0, help="x of the ACC_x used for snapshot selection")
    p.add_argument("--excerpt-frames", type=int, default=dsp.DEFAULT_EXCERPT)
    p.add_argument("--channels", default="32,64,128,128,64", help="conv block widths")
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--d-z", type=int, default=32)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-k", type=int, default=32)
    p.add_argument("--folds", help="fold plan JSON")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="era-forge", description="Music era recognition toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file of flag values (or a run manifest); flags take precedence")
        p.set_defaults(func=func)
        return p

    p = add("extract-features", cmd_extract_features, "audio -> MELS feature files")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--rate", type=int, default=dsp.DEFAULT_RATE)
    p.add_argument("--win", type=int, default=dsp.DEFAULT_WIN)
    p.add_argument("--hop", type=int, default=dsp.DEFAULT_HOP)
    p.add_argument("--mels", type=int, default=dsp.DEFAULT_MELS)
    p.add_argument("--fmin", type=float, default=0.0)
    p.add_argument("--fmax", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)

    p = add("train", cmd_train, "train one model")
    _add_train_flags(p)
    p.add_argument("--fold", type=int, default=0)

    p = add("crossval", cmd_crossval, "k-fold train and test")
    _add_train_flags(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--only-folds", default=None, help="comma-separated subset of folds to run")

    p = add("evaluate", cmd_evaluate, "score a checkpoint")
    _add_data_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--folds", help="fold plan JSON; the checkpoint's fold (or --fold) is scored")
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--granularity", choices=["year", "decade"], default=None)
    p.add_argument("--out", required=True)

    p = add("export-embeddings", cmd_export_embeddings, "write per-track embeddings (EMBD)")
    _add_data_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--layer", default="h_a", help="h_a, h_m or z")
    p.add_argument("--out", required=True)

    p = add("plot-distribution", cmd_plot_distribution, "per-year track counts as CSV (and SVG)")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--svg", default=None)

    p = add("gen-synthetic", cmd_gen_synthetic, "write a synthetic corpus")
    p.add_argument("--tracks", type=int, default=640)
    p.add_argument("--artists", type=int, default=64)
    p.add_argument("--span", type=parse_span, default="1947:2010")
    p.add_argument("--drift", type=float, default=1.0)
    p.add_argument("--bio-signal", type=float, default=0.2)
    p.add_argument("--pre-fraction", type=float, default=None)
    p.add_argument("--mels", type=int, default=32)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--d-bio", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    subparsers = parser._subparsers._group_actions[0].choices
    required = [a for sp in subparsers.values() for a in sp._actions if a.required]
    # first pass only locates the command and its --config file
    for a in required:
        a.required = False
    args = parser.parse_args(argv)
    for a in required:
        a.required = True
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            parser.error(f"cannot read config {args.config}: {e}")
        if "command" in cfg and "config" in cfg:  # a run manifest
            if cfg["command"] != args.command:
                parser.error(f"run manifest is for {cfg['command']!r}, not {args.command!r}")
            cfg = cfg["config"]
        cfg = {k.replace("-", "_"): v for k, v in cfg.items() if k not in ("command", "config")}
        subparser = subparsers[args.command]
        unknown = set(cfg) - {a.dest for a in subparser._actions}
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        for a in subparser._actions:
            if a.dest in cfg:
                a.required = False
        subparser.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"era-forge {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"era-forge {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
