"""Training loop for clip-only and debiased objectives, plus zero-shot evaluation."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import ParamStore, backward, zero_grad
from .data import Dataset, TrainingSet, make_batch
from .metrics import (
    ScoredPredictions,
    UndefinedMetric,
    auc,
    fairness_report,
    hard_labels,
    write_predictions,
)
from .model import DualEncoder, EncoderConfig, PromptSet, save_checkpoint, zero_shot_predict
from .reweight import WeightVector, alignment_weights, debiased_objective

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        self.step = step
        self.checkpoint = checkpoint
        where = f"; last good checkpoint: {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at step {step}{where}")


@dataclass
class TrainConfig:
    mode: str = "clip"  # clip | debiased
    batch_size: int = 32
    k: int = 8
    beta: float = 1.0
    lr: float = 1e-3
    optimizer: str = "adam"  # adam | sgd
    epochs: int = 10
    aug_strength: float = 0.5
    grad_scope: str = "final"  # final | all
    weight_variant: str = "alignment"  # alignment | table1-norm
    granularity: str = "example"  # example | view
    ema: float = 0.0  # exponential smoothing of weights; 0 disables
    d: int = 8
    depth: int = 2
    hidden: int | None = None
    tau_init: float = 0.07
    seed: int = 0
    out_dir: str | None = None
    weight_trace: str | None = None

    def validate(self) -> None:
        if self.mode not in ("clip", "debiased"):
            raise ValueError(f"mode must be 'clip' or 'debiased', got {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode == "debiased" and self.batch_size < 2:
            raise ValueError("debiased mode needs batch_size >= 2")
        limit = 2 * self.batch_size if self.granularity == "view" else self.batch_size
        if not 1 <= self.k <= limit:
            raise ValueError(f"k must be in [1, {limit}], got {self.k}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0.0 <= self.ema < 1.0:
            raise ValueError("ema must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value, str(types[key]))
    return out


def _coerce(value: str, type_name: str):
    if value.lower() in ("none", ""):
        return None
    if type_name.startswith("int"):
        return int(value)
    if type_name.startswith("float"):
        return float(value)
    return value


def load_config(path) -> TrainConfig:
    return TrainConfig(**parse_config_text(Path(path).read_text()))


# ----------------------------------------------------------------------------
# optimizers
# ----------------------------------------------------------------------------


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
        for name in params.names:
            params[name] = params[name] - self.lr * grads[name]


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name in params.names:
            g = grads[name]
            m = self.beta1 * self.m.get(name, np.zeros_like(g)) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, np.zeros_like(g)) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            params[name] = params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig):
    return Adam(config.lr) if config.optimizer == "adam" else SGD(config.lr)


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

RUNLOG_COLUMNS = ["step", "epoch", "total", "clip", "weighted_ctr", "w_max", "w_entropy",
                  "w_zero_frac", "val_auc"]


@dataclass
class TrainResult:
    model: DualEncoder
    log: list[dict]
    best_val_auc: float | None = None
    checkpoint: Path | None = None


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if not isinstance(v, int) else str(v)


def write_runlog(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUNLOG_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in RUNLOG_COLUMNS])


def batch_schedule(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Full batches of a fresh permutation; the partial remainder is dropped."""
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def validation_auc(model: DualEncoder, images: np.ndarray, labels: np.ndarray, prompts: PromptSet) -> float | None:
    try:
        return auc(zero_shot_predict(model, images, prompts).scores, labels)
    except UndefinedMetric:
        return None


def train(
    config: TrainConfig,
    train_set: TrainingSet,
    val_set: TrainingSet | None = None,
    prompts: PromptSet | None = None,
    model: DualEncoder | None = None,
) -> TrainResult:
    """Fit a dual encoder on an attribute-free training set.

    Batch order and augmentations come from seeded streams that do not depend
    on ``mode``, so a debiased run with ``beta = 0`` retraces a clip-only run
    exactly. Each epoch drops its last partial batch in both modes.
    """
    if not isinstance(train_set, TrainingSet):
        raise TypeError("train() takes an attribute-free TrainingSet; use strip_attributes()")
    config.validate()
    if model is None:
        model = DualEncoder(EncoderConfig(
            p=train_set.p, q=train_set.q, d=config.d, depth=config.depth,
            hidden=config.hidden, tau_init=config.tau_init, seed=config.seed,
        ))
    optimizer = make_optimizer(config)
    order_rng, aug_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))

    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    trace = open(config.weight_trace, "w", newline="") if config.weight_trace else None
    trace_writer = None
    if trace:
        trace_writer = csv.writer(trace, lineterminator="\n")
        trace_writer.writerow(["step", "view", "w", "w_clamped", "W"])

    rows: list[dict] = []
    step = 0
    last_good: Path | None = None
    best_val: float | None = None
    smoothed: np.ndarray | None = None
    meta = {"train_config": config.to_dict(), "defaults_non_canonical": True}
    try:
        for epoch in range(config.epochs):
            for idx in batch_schedule(len(train_set), config.batch_size, order_rng):
                batch = make_batch(train_set, idx, config.aug_strength, aug_rng)
                step += 1
                weights: WeightVector | None = None
                if config.mode == "debiased":
                    weights = alignment_weights(batch, model, config.k, config.grad_scope,
                                                config.weight_variant, config.granularity)
                    if config.ema > 0:
                        if smoothed is None or smoothed.shape != weights.weights.shape:
                            smoothed = weights.weights
                        else:
                            smoothed = config.ema * smoothed + (1 - config.ema) * weights.weights
                        weights = WeightVector(smoothed, weights.raw, weights.clamped, weights.normalizer)
                    if trace_writer:
                        for m in range(len(weights.weights)):
                            trace_writer.writerow([step, m, repr(float(weights.raw[m])),
                                                   repr(float(weights.clamped[m])),
                                                   repr(float(weights.weights[m]))])
                obj = debiased_objective(batch, model, config.k, config.beta, config.mode, weights)
                if not np.isfinite(obj.total.value):
                    raise TrainingDiverged(step, last_good)
                zero_grad(obj.total)
                backward(obj.total)
                grads = {n: model.params.node(n).grad for n in model.params.names}
                optimizer.step(model.params, grads)

                row = {"step": step, "epoch": epoch, "total": float(obj.total.value),
                       "clip": float(obj.clip.value),
                       "weighted_ctr": None if obj.weighted_ctr is None else float(obj.weighted_ctr.value)}
                if weights is not None:
                    row.update(weights.summary())
                rows.append(row)

            val = None
            if val_set is not None and prompts is not None:
                val = validation_auc(model, val_set.images, val_set.labels, prompts)
                if rows:
                    rows[-1]["val_auc"] = val
            if out_dir:
                last_good = out_dir / "last.ckpt"
                save_checkpoint(last_good, model, config.seed, meta | {"epoch": epoch})
                if val is not None and (best_val is None or val > best_val):
                    best_val = val
                    save_checkpoint(out_dir / "best.ckpt", model, config.seed, meta | {"epoch": epoch})
            elif val is not None and (best_val is None or val > best_val):
                best_val = val
            log.debug("epoch %d done at step %d (val auc %s)", epoch, step, val)
    finally:
        if trace:
            trace.close()

    if out_dir:
        write_runlog(rows, out_dir / "runlog.csv")
        (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return TrainResult(model, rows, best_val, last_good)


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------


@dataclass
class Evaluation:
    ids: list[str]
    scores: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    attributes: dict[str, np.ndarray]
    reports: dict


def evaluate(model: DualEncoder, dataset: Dataset, prompts: PromptSet, attributes: list[str],
             es_mode: str = "ratio", rule: str = "argmax", threshold: float = 0.5,
             predictions_path=None) -> Evaluation:
    """Zero-shot predictions for every record, then one fairness report per attribute."""
    available = set(dataset.attribute_names())
    for a in attributes:
        if a not in available:
            raise ValueError(f"attribute {a!r} is absent from every record")
    result = zero_shot_predict(model, dataset.images, prompts)
    if result.scores is None:
        raise ValueError("fairness evaluation needs a binary prompt set")
    preds = hard_labels(result.scores, rule, threshold, argmax_predictions=result.predictions)
    labels = dataset.labels
    attr_values = {a: dataset.attribute(a) for a in attributes}
    reports = {}
    for a in attributes:
        has = attr_values[a] != ""
        sp = ScoredPredictions(result.scores[has], preds[has], labels[has], attr_values[a][has])
        threshold_rule = "argmax" if rule == "argmax" else f"threshold({threshold})"
        reports[a] = fairness_report(sp, a, es_mode, threshold_rule)
    if predictions_path is not None:
        write_predictions(predictions_path, dataset.ids, result.scores, preds, labels, attr_values)
    return Evaluation(dataset.ids, result.scores, preds, labels, attr_values, reports)
