"""Adam, the training loop with snapshot selection, k-fold plans and gradient checking."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import EraDataset, make_batch
from .losses import cross_entropy, ec_loss, mmc_loss, text_shuffle, total_loss
from .metrics import Granularity, evaluate
from .models import VARIANTS, EraModel, ModelConfig
from .nncore import ParamStore

log = logging.getLogger(__name__)

CURVE_FIELDS = ["step", "epoch", "mle", "ec", "mmc", "total", "val_acc0"]


@dataclass
class TrainConfig:
    variant: str = "audio-cnn"
    lr: float = 1e-4
    batch_size: int = 64
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.07
    tau_m: float = 0.07
    n_negatives: int = 7
    epochs: int = 100
    patience: int = 15
    seed: int = 0
    clip_norm: float | None = 5.0
    stratified: bool = True
    supcon: bool = False
    eval_excerpts: int = 8
    select_metric: int = 0  # tolerance x of the ACC_x used for snapshot selection

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.variant == "audio-cnn":
            self.alpha = self.beta = 0.0
        elif self.variant == "audio-suc":
            self.alpha = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimiser -----------------------------------------------------------------


def adam_update(value, grad, m, v, t: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``value``, ``m`` and ``v``."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return value


class Adam:
    def __init__(self, params: ParamStore, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self) -> None:
        for k, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {k!r}; step aborted")
        if self.lr == 0:
            return
        self.t += 1
        for k, p in self.params.items():
            adam_update(p.value, p.grad, self.m[k], self.v[k], self.t, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: ParamStore, state: Adam) -> None:
    state.step()


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for _, p in params.items()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for _, p in params.items():
            p.grad *= scale
    return total


# -- one optimisation step -------------------------------------------------------


def loss_and_backward(model: EraModel, batch, cfg: TrainConfig, negatives=None) -> dict[str, float]:
    """Forward, the weighted objective and the backward pass; returns the loss parts."""
    use_mmc = model.cfg.uses_mmc and cfg.alpha > 0
    out = model.forward(batch.x, batch.bio, negatives if use_mmc else None, train=True)
    mle, dlogits = cross_entropy(out.logits, batch.labels)
    ec = mmc = 0.0
    dz = danch = dviews = None
    if model.cfg.uses_ec and cfg.beta > 0 and len(np.unique(batch.labels)) > 1:
        ec, dz = ec_loss(out.z, batch.labels, cfg.tau, supcon=cfg.supcon)
        dz = cfg.beta * dz
    if use_mmc and out.views is not None:
        mmc, danch, dviews = mmc_loss(out.anchors, out.views, out.view_mask, cfg.tau_m)
        danch, dviews = cfg.alpha * danch, cfg.alpha * dviews
    model.backward(dlogits, dz, danch, dviews)
    return {"mle": mle, "ec": ec, "mmc": mmc, "total": total_loss(mle, ec, mmc, cfg.alpha, cfg.beta)}


# -- training run --------------------------------------------------------------


@dataclass
class TrainResult:
    model: EraModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("nan")
    seconds: float = 0.0


def select_snapshot(val_scores: list[float]) -> int:
    """Index of the best validation score; earliest epoch wins ties."""
    return int(np.argmax(np.asarray(val_scores)))


def write_curve(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def train_run(
    cfg: TrainConfig,
    dataset: EraDataset,
    model_cfg: ModelConfig,
    train_idx=None,
    val_idx=None,
    curve_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    granularity: Granularity | None = None,
) -> TrainResult:
    """Train one model. With a validation split the best-ACC_x snapshot is kept and
    training stops after ``cfg.patience`` epochs without improvement."""
    gran = granularity or dataset.granularity
    if model_cfg.variant != cfg.variant:
        raise ValueError(f"model config is {model_cfg.variant!r} but train config is {cfg.variant!r}")
    if model_cfg.encoder.n_classes != gran.n_classes:
        raise ValueError(f"model has {model_cfg.encoder.n_classes} classes, granularity {gran.n_classes}")
    if cfg.variant == "audioart-mmc" and not dataset.has_bios:
        raise ValueError("audioart-mmc needs a biography embedding for every training track")
    train_idx = np.arange(len(dataset)) if train_idx is None else np.asarray(train_idx)
    val_idx = None if val_idx is None or len(val_idx) == 0 else np.asarray(val_idx)
    rng = np.random.default_rng(cfg.seed)
    model = EraModel(model_cfg, seed=cfg.seed)
    opt = Adam(model.params, cfg.lr)
    with_bio = model_cfg.uses_mmc
    contrastive = cfg.variant != "audio-cnn"
    n_batches = max(1, math.ceil(len(train_idx) / cfg.batch_size))
    history: list[dict] = []
    val_scores: list[float] = []
    best_state = model.copy_state()
    best_epoch, stale, step = 0, 0, 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        sums = {"mle": 0.0, "ec": 0.0, "mmc": 0.0, "total": 0.0}
        for _ in range(n_batches):
            batch = make_batch(dataset, cfg.batch_size, rng, train_idx, gran, cfg.stratified,
                               contrastive=contrastive, with_bio=with_bio)
            negatives = text_shuffle(batch.artists, batch.labels, cfg.n_negatives, rng) if with_bio else None
            model.zero_grad()
            parts = loss_and_backward(model, batch, cfg, negatives)
            if not np.isfinite(parts["total"]):
                model.load_state_arrays(best_state)
                if checkpoint_path:
                    model.save(checkpoint_path, {"train": cfg.to_dict(), "aborted_epoch": epoch})
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step}; restored last good snapshot")
            if cfg.clip_norm:
                clip_grad_norm(model.params, cfg.clip_norm)
            opt.step()
            step += 1
            for k in sums:
                sums[k] += parts[k]
        row = {"step": step, "epoch": epoch, **{k: v / n_batches for k, v in sums.items()}, "val_acc0": ""}
        if val_idx is not None:
            rep = evaluate(model, dataset, gran, val_idx, cfg.eval_excerpts, seed=cfg.seed)
            score = rep.acc[cfg.select_metric]
            row["val_acc0"] = rep.acc[0]
            val_scores.append(score)
            if select_snapshot(val_scores) == len(val_scores) - 1:
                best_state, best_epoch, stale = model.copy_state(), epoch, 0
            else:
                stale += 1
        else:
            best_state, best_epoch = None, epoch
        history.append(row)
        log.info("epoch %d: %s", epoch, {k: (round(v, 4) if isinstance(v, float) else v) for k, v in row.items()})
        if val_idx is not None and stale >= cfg.patience:
            break
    if best_state is not None:
        model.load_state_arrays(best_state)
    result = TrainResult(model, history, best_epoch, max(val_scores) if val_scores else float("nan"),
                         time.perf_counter() - t0)
    if curve_path:
        write_curve(curve_path, history)
    if checkpoint_path:
        model.save(checkpoint_path, {"train": cfg.to_dict(), "granularity": gran.to_dict(),
                                     "best_epoch": best_epoch})
    return result


# -- cross-validation ------------------------------------------------------------


@dataclass
class FoldPlan:
    k: int
    fold_of: np.ndarray  # fold index per track
    val_mask: np.ndarray  # per fold, bool [n] marking its validation tracks
    seed: int = 0

    def test(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == f)

    def val(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.val_mask[f])

    def train(self, f: int) -> np.ndarray:
        return np.flatnonzero((self.fold_of != f) & ~self.val_mask[f])

    def to_json(self, track_ids) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "folds": [
                {"test": [track_ids[i] for i in self.test(f)], "val": [track_ids[i] for i in self.val(f)]}
                for f in range(self.k)
            ],
        }

    @classmethod
    def from_json(cls, d: dict, track_ids) -> "FoldPlan":
        pos = {t: i for i, t in enumerate(track_ids)}
        n, k = len(track_ids), d["k"]
        fold_of = np.full(n, -1, dtype=np.int64)
        val_mask = np.zeros((k, n), dtype=bool)
        for f, fold in enumerate(d["folds"]):
            fold_of[[pos[t] for t in fold["test"]]] = f
            val_mask[f, [pos[t] for t in fold["val"]]] = True
        if (fold_of < 0).any():
            raise ValueError("fold plan does not cover every track in the manifest")
        return cls(k, fold_of, val_mask, d.get("seed", 0))

    def save(self, path, track_ids) -> None:
        Path(path).write_text(json.dumps(self.to_json(track_ids)))

    @classmethod
    def load(cls, path, track_ids) -> "FoldPlan":
        return cls.from_json(json.loads(Path(path).read_text()), track_ids)


def kfold(n: int, k: int = 10, seed: int = 0, val_fraction: float = 0.1) -> FoldPlan:
    """Random track-level k-fold split; each fold's training part loses ``val_fraction`` to validation."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds dataset size {n}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    for f, part in enumerate(np.array_split(rng.permutation(n), k)):
        fold_of[part] = f
    val_mask = np.zeros((k, n), dtype=bool)
    for f in range(k):
        rest = rng.permutation(np.flatnonzero(fold_of != f))
        val_mask[f, rest[: int(round(val_fraction * len(rest)))]] = True
    return FoldPlan(k, fold_of, val_mask, seed)


def crossval(cfg: TrainConfig, dataset: EraDataset, model_cfg: ModelConfig, plan: FoldPlan,
             folds=None, out_dir: str | Path | None = None):
    """Train and test on each fold; returns the per-fold :class:`EvalReport` list."""
    reports = []
    for f in range(plan.k) if folds is None else folds:
        ck = curve = None
        if out_dir:
            d = Path(out_dir) / f"fold{f}"
            d.mkdir(parents=True, exist_ok=True)
            ck, curve = d / "model.erac", d / "loss_curve.csv"
        res = train_run(cfg, dataset, model_cfg, plan.train(f), plan.val(f), curve, ck)
        rep = evaluate(res.model, dataset, dataset.granularity, plan.test(f), cfg.eval_excerpts, seed=cfg.seed)
        rep.extra.update(fold=f, best_epoch=res.best_epoch)
        if out_dir:
            rep.write_json(Path(out_dir) / f"fold{f}" / "report.json")
        reports.append(rep)
    return reports


# -- gradient checking -------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_group: dict[str, float]
    n_probes: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def grad_check(
    params: ParamStore,
    loss_fn: Callable[[], float],
    backward_fn: Callable[[], None],
    n_probes: int = 100,
    h: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences at random parameter entries.

    ``loss_fn`` evaluates the scalar loss; ``backward_fn`` zeroes and refills
    ``params`` gradients at the current point. Error is ``|g - fd| / max(1, |fd|)``.
    """
    rng = np.random.default_rng(seed)
    backward_fn()
    analytic = {k: p.grad.copy() for k, p in params.items()}
    names = [k for k, p in params.items() if p.value.size]
    sizes = np.array([params[k].value.size for k in names], dtype=np.float64)
    per_group: dict[str, float] = {}
    worst = 0.0
    for i in range(n_probes):
        # cycle through parameters so every tensor is probed, then sample by size
        name = names[i] if i < len(names) else names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = params[name]
        j = int(rng.integers(p.value.size))
        flat = p.value.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        up = loss_fn()
        flat[j] = orig - h
        down = loss_fn()
        flat[j] = orig
        fd = (up - down) / (2 * h)
        err = abs(analytic[name].reshape(-1)[j] - fd) / max(1.0, abs(fd))
        group = name.rsplit(".", 1)[0]
        per_group[group] = max(per_group.get(group, 0.0), err)
        worst = max(worst, err)
    return GradCheckReport(worst, per_group, n_probes)


def model_grad_check(model: EraModel, batch, cfg: TrainConfig, negatives=None, n_probes: int = 100,
                     h: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Gradient check of the full weighted objective of ``model`` on a fixed batch (float64)."""
    model.set_dtype(np.float64)

    def loss_fn():
        use_mmc = model.cfg.uses_mmc and cfg.alpha > 0
        out = model.forward(batch.x, batch.bio, negatives if use_mmc else None, train=True)
        mle, _ = cross_entropy(out.logits, batch.labels)
        ec = mmc = 0.0
        if model.cfg.uses_ec and cfg.beta > 0:
            ec, _ = ec_loss(out.z, batch.labels, cfg.tau, cfg.supcon)
        if use_mmc and out.views is not None:
            mmc, _, _ = mmc_loss(out.anchors, out.views, out.view_mask, cfg.tau_m)
        return total_loss(mle, ec, mmc, cfg.alpha, cfg.beta)

    def backward_fn():
        model.zero_grad()
        loss_and_backward(model, batch, cfg, negatives)

    return grad_check(model.params, loss_fn, backward_fn, n_probes, h, seed)
