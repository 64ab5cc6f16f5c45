"""Training loop, evaluation and k-fold cross-validation."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .dataio import FoldPlan, Sample, batches
from .metrics import MetricReport, aggregate, dice_loss, evaluate_image
from .model import Model, ModelSpec, build, save
from .preprocess import NLMParams, PreprocessConfig, augment, nlm_denoise
from .tensor_core import Tensor, backward, no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class LeakageError(RuntimeError):
    """A test-fold sample appears in the training audit log."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    momentum: float = 0.0
    seed: int = 0
    input_size: int = 64
    val_fraction: float = 0.2
    dice_smooth: float = 1.0
    threshold: float = 0.5
    rotate: bool = True
    denoise: bool = True
    denoise_variants: bool = False
    denoise_test: bool = False
    nlm_h: float = 0.1
    nlm_patch: int = 7
    nlm_window: int = 21
    nlm_sigma: float = 0.0
    checkpoint_every: int = 0
    auc_pooling: str = "image"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0.0 <= self.val_fraction <= 0.5:
            raise ValueError("validation fraction must be in [0, 0.5]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.auc_pooling not in ("image", "pooled"):
            raise ValueError("auc_pooling must be 'image' or 'pooled'")

    @property
    def nlm(self) -> NLMParams:
        return NLMParams(self.nlm_h, self.nlm_patch, self.nlm_window, self.nlm_sigma)

    @property
    def preprocess(self) -> PreprocessConfig:
        s = self.input_size
        return PreprocessConfig((s, s), self.denoise, self.nlm, self.rotate, self.denoise_variants)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-7
    momentum: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def optimizer_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """Apply one Adam or SGD(+momentum) update in place."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    if state.kind == "sgd":
        for p, g, buf in zip(params, grads, state.m):
            if state.momentum:
                buf *= state.momentum
                buf += g
                g = buf
            p.data -= (state.lr * g).astype(p.data.dtype)
        return
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype)


def make_optimizer(config: TrainConfig) -> OptimizerState:
    return OptimizerState(config.optimizer, config.lr, (config.beta1, config.beta2), config.eps, config.momentum)


# ---------------------------------------------------------------------------
# history


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_dsc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_dsc: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_dsc", "val_loss", "val_dsc", "seconds", "best"])
        for e in range(len(self)):
            w.writerow([
                e + 1,
                f"{self.train_loss[e]:.6f}",
                f"{self.train_dsc[e]:.6f}",
                _opt(self.val_loss[e]),
                _opt(self.val_dsc[e]),
                f"{self.seconds[e]:.3f}",
                int(e == self.best_epoch),
            ])
        return buf.getvalue()

    def comparable(self) -> dict:
        """Everything except wall-clock time (for determinism checks)."""
        d = dataclasses.asdict(self)
        d.pop("seconds")
        return d


def _opt(v: float) -> str:
    return "" if math.isnan(v) else f"{v:.6f}"


def _batch_dsc(prob: np.ndarray, masks: np.ndarray, threshold: float) -> list[float]:
    out = []
    for p, t in zip(prob, masks):
        out.append(metrics.dsc(metrics.confusion(p[0] >= threshold, t[0] > 0)))
    return out


def predict_samples(model: Model, samples: Sequence[Sample], batch_size: int = 8) -> np.ndarray:
    """Eval-mode probabilities, shape (N, H, W)."""
    if not samples:
        return np.zeros((0,) + model.spec.input_size, dtype=np.float32)
    images = np.stack([s.image for s in samples])[:, None]
    return model.predict(images, batch_size)[:, 0]


def score_samples(model: Model, samples: Sequence[Sample], config: TrainConfig) -> tuple[float, float]:
    """(mean dice loss, mean DSC) in eval mode."""
    if not samples:
        return float("nan"), float("nan")
    prob = predict_samples(model, samples, config.batch_size)
    masks = np.stack([(s.mask > 0) for s in samples]).astype(np.float32)
    with no_grad():
        loss = dice_loss(Tensor(prob[:, None]), masks[:, None], config.dice_smooth).item()
    dscs = [metrics.dsc(metrics.confusion(p >= config.threshold, m > 0)) for p, m in zip(prob, masks)]
    return loss, float(np.mean(dscs))


# ---------------------------------------------------------------------------
# training


@dataclass
class FitResult:
    history: TrainHistory
    best_state: list[tuple[str, np.ndarray]]
    audit: set[str]


def base_id(sample_id: str) -> str:
    return sample_id.split("@", 1)[0]


def fit(
    model: Model,
    train: Sequence[Sample],
    val: Sequence[Sample],
    config: TrainConfig,
    stop_at_train_dsc: float | None = None,
    on_epoch: Callable[[int, TrainHistory], None] | None = None,
    fold: int = 0,
    checkpoint_dir: str | Path | None = None,
) -> FitResult:
    """Minimize dice loss over ``train``; keep the best-by-validation-DSC weights.

    Without validation samples the best epoch is the one with the lowest
    training loss. ``stop_at_train_dsc`` ends training once the epoch's
    training DSC (train mode, as logged in the history) reaches that value.
    With ``config.checkpoint_every`` > 0 and a ``checkpoint_dir``, the current
    weights are also saved every that many epochs.
    """
    if not train:
        raise TrainingError("no training samples")
    params = model.parameters()
    opt = make_optimizer(config)
    hist = TrainHistory()
    audit: set[str] = set()
    drop_rng = np.random.default_rng([config.seed, fold, 2])
    best_score = -math.inf
    best_state = [(n, a.copy()) for n, a in model.state_entries()]

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        losses, dscs = [], []
        for b, batch in enumerate(batches(train, config.batch_size, seed=config.seed + 7919 * fold, epoch=epoch)):
            audit.update(base_id(i) for i in batch.ids)
            for p in params:
                p.grad = None
            prob = model.forward(batch.images, "train", rng=drop_rng)
            loss = dice_loss(prob, batch.masks, config.dice_smooth)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch + 1}, batch {b + 1}")
            backward(loss, params)
            optimizer_step(params, [p.grad for p in params], opt)
            losses.append(value * len(batch.ids))
            dscs.extend(_batch_dsc(prob.data, batch.masks, config.threshold))
        model.epoch = epoch + 1
        hist.train_loss.append(float(np.sum(losses) / len(train)))
        hist.train_dsc.append(float(np.mean(dscs)))
        vl, vd = score_samples(model, val, config)
        hist.val_loss.append(vl)
        hist.val_dsc.append(vd)
        hist.seconds.append(time.perf_counter() - t0)

        score = vd if val else -hist.train_loss[-1]
        if score > best_score:
            best_score = score
            hist.best_epoch = epoch
            best_state = [(n, a.copy()) for n, a in model.state_entries()]
        log.info(
            "fold %d epoch %d/%d loss %.4f train_dsc %.4f val_dsc %s (%.1fs)",
            fold, epoch + 1, config.epochs, hist.train_loss[-1], hist.train_dsc[-1],
            "-" if math.isnan(vd) else f"{vd:.4f}", hist.seconds[-1],
        )
        every = config.checkpoint_every
        if every > 0 and checkpoint_dir is not None and (epoch + 1) % every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save(model, Path(checkpoint_dir) / f"fold{fold}.epoch{epoch + 1:03d}.crun", extra={"fold": fold})
        if on_epoch is not None:
            on_epoch(epoch, hist)
        if stop_at_train_dsc is not None and hist.train_dsc[-1] >= stop_at_train_dsc:
            break
    return FitResult(hist, best_state, audit)


class _Denoiser:
    """NLM with a per-sample cache (samples recur across folds)."""

    def __init__(self, params: NLMParams):
        self.params = params
        self.cache: dict[str, np.ndarray] = {}

    def __call__(self, s: Sample) -> Sample:
        if s.sample_id not in self.cache:
            p = self.params
            self.cache[s.sample_id] = nlm_denoise(s.image, p.h, p.patch, p.window, p.sigma)
        return dataclasses.replace(s, image=self.cache[s.sample_id])


@dataclass
class TrainResult:
    model: Model
    history: TrainHistory
    audit: set[str]
    train_ids: list[str]
    val_ids: list[str]
    fold: int


def prepare_training_set(samples: Sequence[Sample], config: TrainConfig, denoiser: _Denoiser | None = None) -> list[Sample]:
    pre = config.preprocess
    out = list(samples)
    if config.denoise and not config.denoise_variants:
        denoiser = denoiser or _Denoiser(config.nlm)
        out = [denoiser(s) for s in out]
    return augment(out, config.seed, pre)


def train(
    config: TrainConfig,
    spec: ModelSpec,
    samples: Sequence[Sample],
    plan: FoldPlan,
    fold: int,
    denoiser: _Denoiser | None = None,
    on_epoch: Callable[[int, TrainHistory], None] | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Train on the non-test folds of ``plan`` and return the best-validation model."""
    by_id = {s.sample_id: s for s in samples}
    tr_ids, val_ids = plan.validation_split(fold, config.val_fraction, config.seed)
    missing = [i for i in tr_ids + val_ids if i not in by_id]
    if missing:
        raise TrainingError(f"fold plan references unknown sample {missing[0]}")
    train_set = prepare_training_set([by_id[i] for i in tr_ids], config, denoiser)
    val_set = [by_id[i] for i in val_ids]
    model = build(spec, seed=config.seed)
    result = fit(model, train_set, val_set, config, fold=fold, on_epoch=on_epoch, checkpoint_dir=checkpoint_dir)
    model.load_state(dict(result.best_state))
    model.epoch = result.history.best_epoch + 1
    test = set(plan.test_ids(fold))
    leaked = sorted(result.audit & test)
    if leaked:
        raise LeakageError(f"test sample {leaked[0]} entered a gradient step")
    return TrainResult(model, result.history, result.audit, tr_ids, val_ids, fold)


def evaluate(
    model: Model,
    samples: Sequence[Sample],
    config: TrainConfig,
    fold: int = 0,
    audit: set[str] | None = None,
    denoiser: _Denoiser | None = None,
) -> MetricReport:
    """Eval-mode metrics on a test fold; refuses samples seen in training."""
    if audit is not None:
        leaked = sorted({s.sample_id for s in samples} & audit)
        if leaked:
            raise LeakageError(f"test sample {leaked[0]} appears in the training audit log")
    if config.denoise_test:
        denoiser = denoiser or _Denoiser(config.nlm)
        samples = [denoiser(s) for s in samples]
    prob = predict_samples(model, samples, config.batch_size)
    rows = [
        evaluate_image(p, s.mask > 0, s.sample_id, s.cls, fold, config.threshold)
        for p, s in zip(prob, samples)
    ]
    fold_auc = None
    if config.auc_pooling == "pooled":
        masks = np.stack([s.mask > 0 for s in samples])
        pooled = metrics.auc(prob, masks)
        fold_auc = {fold: float("nan") if pooled is None else pooled}
    return aggregate(rows, fold_auc=fold_auc)


@dataclass
class CrossValResult:
    report: MetricReport
    folds: list[TrainResult]
    fold_reports: list[MetricReport]


def cross_validate(
    config: TrainConfig,
    spec: ModelSpec,
    samples: Sequence[Sample],
    plan: FoldPlan,
    folds: Sequence[int] | None = None,
    out_dir: str | Path | None = None,
) -> CrossValResult:
    """Train and evaluate every fold; aggregate mean +- std across folds."""
    by_id = {s.sample_id: s for s in samples}
    denoiser = _Denoiser(config.nlm)
    results, reports, rows = [], [], []
    fold_auc: dict[int, float] = {}
    for f in folds if folds is not None else range(plan.k):
        res = train(config, spec, samples, plan, f, denoiser, checkpoint_dir=out_dir)
        test = [by_id[i] for i in plan.test_ids(f)]
        rep = evaluate(res.model, test, config, f, res.audit, denoiser)
        results.append(res)
        reports.append(rep)
        rows.extend(rep.images)
        if config.auc_pooling == "pooled":
            fold_auc[f] = rep.folds[f]["auc"]
        if out_dir is not None:
            write_fold_outputs(out_dir, res, rep, config, samples)
    report = aggregate(rows, fold_auc=fold_auc or None)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "cv_summary.txt").write_text(report.to_text())
        (out / "cv_summary.csv").write_text(report.summary_csv())
        (out / "cv_images.csv").write_text(report.image_rows_csv())
        from .plots import plot_cv_summary

        plot_cv_summary(report, out / "cv_summary.png")
    return CrossValResult(report, results, reports)


# ---------------------------------------------------------------------------
# run outputs


def dataset_hash(samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    for s in sorted(samples, key=lambda s: s.sample_id):
        h.update(s.sample_id.encode())
        h.update(np.ascontiguousarray(s.image, dtype=np.float32).tobytes())
        h.update(np.ascontiguousarray(s.mask > 0).tobytes())
    return h.hexdigest()


def write_fold_outputs(
    out_dir: str | Path,
    res: TrainResult,
    report: MetricReport | None,
    config: TrainConfig,
    samples: Sequence[Sample],
    extra_manifest: dict | None = None,
) -> Path:
    """Checkpoint, manifest, history table/figure and id audit for one fold."""
    from .plots import plot_history

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"fold{res.fold}"
    ckpt = stem.with_suffix(".crun")
    save(res.model, ckpt, extra={"fold": res.fold})
    manifest = {
        "fold": res.fold,
        "seed": config.seed,
        "train": dataclasses.asdict(config),
        "model": res.model.spec.to_dict(),
        "dataset_sha256": dataset_hash(samples),
        "best_epoch": res.history.best_epoch + 1,
        "checkpoint": ckpt.name,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    stem.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    stem.with_suffix(".history.csv").write_text(res.history.to_csv())
    stem.with_suffix(".train_ids.txt").write_text("\n".join(sorted(res.audit)) + "\n")
    plot_history(res.history, stem.with_suffix(".history.png"))
    if report is not None:
        stem.with_suffix(".metrics.csv").write_text(report.image_rows_csv())
        stem.with_suffix(".metrics.txt").write_text(report.to_text())
    return ckpt
