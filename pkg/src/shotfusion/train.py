"""Training loop, evaluation metrics, checkpoints round-trip and the ablation runner.

Positive class for precision/recall is intoxicated (label 1).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import NonFiniteError, backward, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError
from .data.dataset import load_split
from .data.manifest import DatasetManifest, SampleRecord, validation_subjects
from .data.synth import derive_seed
from .fusion import cross_entropy
from .model import PROFILES, FusionModel, ModelConfig, SampleInput, apply_variant, parse_variant
from .optim import Adam


class EmptySplitError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, message: str, last_checkpoint: Path | None = None):
        super().__init__(f"training diverged in epoch {epoch}: {message}")
        self.epoch = epoch
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    batch_size: int = 8
    seed: int = 42
    lr: float = 1e-4
    weight_decay: float = 1e-5
    variant: str = "fused_weighted"
    profile: str = "desk"
    fusion_mode: str = "gated"
    activation: str = "leaky_relu"
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive integers")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay nonnegative")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; valid: {', '.join(PROFILES)}")
        if self.fusion_mode not in ("gated", "global"):
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        try:
            parse_variant(self.variant)
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self) -> ModelConfig:
        base = ModelConfig(**PROFILES[self.profile], fusion_mode=self.fusion_mode,
                           activation=self.activation)
        return apply_variant(base, self.variant)


# -- metrics ----------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @classmethod
    def from_predictions(cls, labels: Sequence[int], preds: Sequence[int]) -> "ConfusionMatrix":
        tp = tn = fp = fn = 0
        for y, p in zip(labels, preds):
            if p == 1:
                tp, fp = (tp + 1, fp) if y == 1 else (tp, fp + 1)
            else:
                tn, fn = (tn + 1, fn) if y == 0 else (tn, fn + 1)
        return cls(tp, tn, fp, fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def classification_metrics(cm: ConfusionMatrix) -> tuple[dict[str, float], list[str]]:
    """Accuracy, precision and recall; a zero denominator gives 0 and a flag."""
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(f"{name}_undefined")
            return 0.0
        return num / den

    out = {
        "accuracy": ratio(cm.tp + cm.tn, cm.total, "accuracy"),
        "precision": ratio(cm.tp, cm.tp + cm.fp, "precision"),
        "recall": ratio(cm.tp, cm.tp + cm.fn, "recall"),
    }
    return out, flags


@dataclass
class Prediction:
    sample_id: str
    label: int
    pred: int
    logits: list[float]
    alpha: float | None = None


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    confusion: ConfusionMatrix
    loss: float
    mean_alpha: float | None
    predictions: list[Prediction]
    flags: list[str] = field(default_factory=list)
    history: dict[str, list] = field(default_factory=dict)
    split: str = ""
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = asdict(self.confusion)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def batches(order: Sequence[int], size: int) -> list[list[int]]:
    """Consecutive chunks; a trailing chunk of one joins the previous chunk
    (batch norm needs two samples in training mode)."""
    order = list(order)
    out = [order[i:i + size] for i in range(0, len(order), size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2].extend(out.pop())
    return out


def predict(model: FusionModel, samples: Sequence[SampleInput], batch_size: int = 8):
    """Eval-mode forward without a tape -> (logits [N, 2], alpha [N] or None)."""
    was_training = model.training
    model.eval()
    logits, alphas = [], []
    try:
        with no_grad():
            for idx in batches(range(len(samples)), batch_size):
                out = model([samples[i] for i in idx])
                logits.append(out.logits.data)
                if out.alpha is not None:
                    a = out.alpha.data
                    alphas.append(np.broadcast_to(a.reshape(-1), (len(idx),)) if a.size == 1 else a.reshape(-1))
    finally:
        model.train(was_training)
    return np.concatenate(logits), (np.concatenate(alphas) if alphas else None)


def evaluate(model: FusionModel, samples: Sequence[SampleInput], split: str = "",
             batch_size: int = 8) -> MetricsReport:
    if not samples:
        raise EmptySplitError(f"split {split!r} has no samples")
    logits, alpha = predict(model, samples, batch_size)
    labels = np.array([s.label for s in samples])
    preds = np.argmax(logits, axis=1)
    cm = ConfusionMatrix.from_predictions(labels.tolist(), preds.tolist())
    metrics, flags = classification_metrics(cm)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(len(labels)), labels]))
    predictions = [Prediction(s.sample_id, int(s.label), int(p), [float(v) for v in lg],
                              None if alpha is None else float(alpha[i]))
                   for i, (s, p, lg) in enumerate(zip(samples, preds, logits))]
    return MetricsReport(metrics["accuracy"], metrics["precision"], metrics["recall"], cm, loss,
                         None if alpha is None else float(alpha.mean()), predictions, flags, split=split)


def recompute_from_predictions(preds: Sequence[dict | Prediction]) -> dict[str, float]:
    """Brute-force metrics straight from per-sample (label, pred) pairs."""
    rows = [p if isinstance(p, dict) else asdict(p) for p in preds]
    n = len(rows)
    correct = sum(1 for r in rows if r["label"] == r["pred"])
    pos_pred = [r for r in rows if r["pred"] == 1]
    pos_true = [r for r in rows if r["label"] == 1]
    hits = sum(1 for r in pos_pred if r["label"] == 1)
    return {
        "accuracy": correct / n if n else 0.0,
        "precision": hits / len(pos_pred) if pos_pred else 0.0,
        "recall": sum(1 for r in pos_true if r["pred"] == 1) / len(pos_true) if pos_true else 0.0,
    }


# -- checkpoints ------------------------------------------------------------------

def model_checkpoint(model: FusionModel, tc: TrainConfig, opt: Adam | None = None,
                     rng: np.random.Generator | None = None, meta: dict | None = None) -> Checkpoint:
    ck = Checkpoint(
        config={"model": model.cfg.to_dict(), "train": asdict(tc)},
        params={n: p.data.copy() for n, p in model.named_parameters()},
        buffers={n: np.asarray(b).copy() for n, b in model.named_buffers()},
    )
    if opt is not None:
        ck.optim = opt.state.hyper()
        ck.adam_m = {n: a.copy() for n, a in opt.state.m.items()}
        ck.adam_v = {n: a.copy() for n, a in opt.state.v.items()}
    ck.meta = dict(meta or {})
    if rng is not None:
        ck.meta["rng_state"] = rng.bit_generator.state
    return ck


class CheckpointMismatch(ValueError):
    pass


def restore_model(ck: Checkpoint) -> FusionModel:
    try:
        cfg = ModelConfig.from_dict(ck.config["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointMismatch(f"checkpoint has no usable model config: {exc}") from None
    model = FusionModel(cfg, seed=0)
    params = model.parameters()
    if set(params) != set(ck.params):
        missing = sorted(set(params) - set(ck.params))
        extra = sorted(set(ck.params) - set(params))
        raise CheckpointMismatch(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in params.items():
        arr = ck.params[name]
        if arr.shape != p.shape:
            raise CheckpointMismatch(f"{name}: checkpoint shape {arr.shape}, model shape {p.shape}")
        p.data[...] = arr
    for name, _ in list(model.named_buffers()):
        if name not in ck.buffers:
            raise CheckpointMismatch(f"checkpoint lacks buffer {name}")
        model.set_buffer(name, ck.buffers[name])
    model.eval()
    return model


def train_config_of(ck: Checkpoint) -> TrainConfig:
    return TrainConfig(**ck.config["train"])


# -- training ----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: FusionModel
    history: dict[str, list]
    best_epoch: int
    checkpoints: list[Path]
    fit_ids: list[str]
    val_ids: list[str]


def split_train_val(m: DatasetManifest, tc: TrainConfig) -> tuple[list[SampleRecord], list[SampleRecord]]:
    recs = m.split("train")
    if not recs:
        raise EmptySplitError("manifest has no train samples")
    held = validation_subjects(recs, tc.val_fraction, tc.seed)
    return [r for r in recs if r.subject_id not in held], [r for r in recs if r.subject_id in held]


def _empty_history() -> dict[str, list]:
    return {k: [] for k in ("epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy")}


def train(m: DatasetManifest, tc: TrainConfig, out_dir: str | Path | None = None,
          resume: str | Path | None = None, log: Callable[[str], None] | None = None,
          trace: list | None = None) -> TrainResult:
    """Fit a model on the manifest's train split (minus held-out validation subjects).

    Writes ``epoch_NNN.ckpt`` after every epoch and ``best.ckpt`` for the best
    validation accuracy (ties: lower validation loss) when ``out_dir`` is set.
    ``trace`` receives the sample ids of every batch, in order.
    """
    log = log or (lambda s: None)
    mcfg = tc.model_config()
    fit_recs, val_recs = split_train_val(m, tc)
    fit = load_split(m, records=fit_recs, clips=mcfg.uses_clips, aux=mcfg.aux)
    val = load_split(m, records=val_recs, clips=mcfg.uses_clips, aux=mcfg.aux)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(derive_seed(tc.seed, "train"))
    history = _empty_history()
    start_epoch, best = 0, (-1.0, math.inf, -1)
    if resume is not None:
        ck = load_checkpoint(resume)
        model = restore_model(ck)
        if model.cfg != mcfg:
            raise CheckpointMismatch("checkpoint model config differs from the requested run")
        opt = Adam(model.parameters(), tc.lr, weight_decay=tc.weight_decay)
        opt.state.step = int(ck.optim.get("step", 0))
        opt.state.m = {n: a.copy() for n, a in ck.adam_m.items()}
        opt.state.v = {n: a.copy() for n, a in ck.adam_v.items()}
        rng.bit_generator.state = ck.meta["rng_state"]
        history = ck.meta.get("history", history)
        start_epoch = int(ck.meta.get("epoch", 0))
        b = ck.meta.get("best", [-1.0, None, -1])
        best = (b[0], math.inf if b[1] is None else b[1], b[2])
    else:
        model = FusionModel(mcfg, seed=tc.seed)
        opt = Adam(model.parameters(), tc.lr, weight_decay=tc.weight_decay)

    written: list[Path] = []
    last_good: Path | None = Path(resume) if resume is not None else None
    for epoch in range(start_epoch + 1, tc.epochs + 1):
        model.train()
        order = rng.permutation(len(fit))
        tot_loss, n_correct, n_seen = 0.0, 0, 0
        for idx in batches(order, tc.batch_size):
            batch = [fit[i] for i in idx]
            if trace is not None:
                trace.append([s.sample_id for s in batch])
            labels = np.array([s.label for s in batch])
            try:
                outp = model(batch, rng)
                loss = cross_entropy(outp.logits, labels)
                if not np.isfinite(loss.data).all():
                    raise NonFiniteError("loss is not finite")
                model.zero_grad()
                backward(loss)
                opt.step()
            except NonFiniteError as exc:
                raise DivergenceError(epoch, str(exc), last_good) from exc
            tot_loss += float(loss.data) * len(batch)
            n_correct += int((np.argmax(outp.logits.data, axis=1) == labels).sum())
            n_seen += len(batch)
        history["epoch"].append(epoch)
        history["train_loss"].append(tot_loss / n_seen)
        history["train_accuracy"].append(n_correct / n_seen)
        if val:
            try:
                rep = evaluate(model, val, "validation", tc.batch_size)
            except NonFiniteError as exc:
                raise DivergenceError(epoch, f"validation: {exc}", last_good) from exc
            vacc, vloss = rep.accuracy, rep.loss
            if not math.isfinite(vloss):
                raise DivergenceError(epoch, "validation loss is not finite", last_good)
        else:
            vacc, vloss = history["train_accuracy"][-1], history["train_loss"][-1]
        history["val_loss"].append(vloss)
        history["val_accuracy"].append(vacc)
        improved = (vacc, -vloss) > (best[0], -best[1])
        if improved:
            best = (vacc, vloss, epoch)
        log(f"epoch {epoch:3d}  loss {history['train_loss'][-1]:.4f}  acc {history['train_accuracy'][-1]:.3f}"
            f"  val_loss {vloss:.4f}  val_acc {vacc:.3f}")
        if out is not None:
            meta = {"epoch": epoch, "history": history, "best": [best[0], best[1], best[2]]}
            ck = model_checkpoint(model, tc, opt, rng, meta)
            path = out / f"epoch_{epoch:03d}.ckpt"
            save_checkpoint(path, ck)
            written.append(path)
            last_good = path
            if improved:
                save_checkpoint(out / "best.ckpt", ck)
    return TrainResult(model, history, best[2], written, [r.sample_id for r in fit_recs],
                       [r.sample_id for r in val_recs])


# -- ablations ---------------------------------------------------------------------

ABLATION_FIELDS = ("variant", "seed", "accuracy", "precision", "recall")


def ablation_run(variant: str, tc: TrainConfig, m: DatasetManifest, log=None) -> dict:
    """Train and test one variant; returns a table row."""
    parse_variant(variant)
    run_cfg = replace(tc, variant=variant)
    res = train(m, run_cfg, log=log)
    mcfg = run_cfg.model_config()
    test = load_split(m, "test", clips=mcfg.uses_clips, aux=mcfg.aux)
    rep = evaluate(res.model, test, "test", tc.batch_size)
    return {"variant": variant, "seed": tc.seed, "accuracy": rep.accuracy, "precision": rep.precision,
            "recall": rep.recall, "mean_alpha": rep.mean_alpha}


def ablation_table(m: DatasetManifest, variants: Sequence[str], seeds: Sequence[int], tc: TrainConfig,
                   log=None) -> dict:
    for v in variants:
        parse_variant(v)
    rows = [ablation_run(v, replace(tc, seed=s), m, log) for v in variants for s in seeds]
    medians = []
    for v in variants:
        sel = [r for r in rows if r["variant"] == v]
        medians.append({"variant": v, **{k: float(np.median([r[k] for r in sel]))
                                         for k in ("accuracy", "precision", "recall")}})
    return {"rows": rows, "medians": medians}


def format_table(rows: Sequence[dict], fields=ABLATION_FIELDS) -> str:
    cells = [[f"{r[f]:.4f}" if isinstance(r.get(f), float) else str(r.get(f, "")) for f in fields] for r in rows]
    widths = [max(len(f), *(len(c[i]) for c in cells)) for i, f in enumerate(fields)]
    lines = ["  ".join(f.ljust(w) for f, w in zip(fields, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
