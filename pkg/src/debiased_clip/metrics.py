"""Subgroup fairness metrics for binary zero-shot predictions.

Every value is kept as a fraction in [0, 1] (EOD in [0, 2]); the ``percent``
fields of a report multiply by 100, which is the convention the result
tables use.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

SCHEMA_VERSION = 1
ES_AUC_MODES = ("ratio", "mean-gap")
SCORE_DEFINITION = "logistic((cos_positive - cos_negative) / tau)"


class UndefinedMetric(ValueError):
    pass


@dataclass
class ScoredPredictions:
    scores: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    ids: list[str] | None = None

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.predictions = np.asarray(self.predictions, dtype=int)
        self.labels = np.asarray(self.labels, dtype=int)
        self.groups = np.asarray(self.groups, dtype=object).astype(str)
        n = len(self.scores)
        if not (len(self.predictions) == len(self.labels) == len(self.groups) == n):
            raise ValueError("scores, predictions, labels and groups must have equal length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if np.any(self.groups == ""):
            raise ValueError("group categories must be non-empty strings")

    def categories(self) -> list[str]:
        return sorted(set(self.groups.tolist()))

    def mask(self, category: str) -> np.ndarray:
        return self.groups == category


def auc(scores, labels) -> float:
    """Rank (Mann-Whitney) AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("undefined AUC: both classes must be present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def groupwise_auc(preds: ScoredPredictions) -> dict[str, float | None]:
    """Per-category AUC; categories missing a class map to None."""
    out = {}
    for cat in preds.categories():
        m = preds.mask(cat)
        try:
            out[cat] = auc(preds.scores[m], preds.labels[m])
        except UndefinedMetric:
            out[cat] = None
    return out


def rates(preds: ScoredPredictions) -> dict[str, tuple[float | None, float | None]]:
    """(TPR, FPR) per category; a rate is None when its denominator is empty."""
    out = {}
    for cat in preds.categories():
        m = preds.mask(cat)
        y, yhat = preds.labels[m], preds.predictions[m]
        tpr = float((yhat[y == 1] == 1).mean()) if (y == 1).any() else None
        fpr = float((yhat[y == 0] == 1).mean()) if (y == 0).any() else None
        out[cat] = (tpr, fpr)
    return out


def _spread(values) -> float:
    values = [v for v in values if v is not None]
    return max(values) - min(values)


def eod(preds: ScoredPredictions) -> float:
    """Largest TPR gap plus largest FPR gap between any two categories."""
    r = rates(preds)
    tprs = [t for t, _ in r.values() if t is not None]
    fprs = [f for _, f in r.values() if f is not None]
    both = [c for c, (t, f) in r.items() if t is not None and f is not None]
    if len(both) < 2:
        raise UndefinedMetric("EOD needs at least two groups with both TPR and FPR defined")
    return _spread(tprs) + _spread(fprs)


def es_auc(preds: ScoredPredictions, mode: str = "ratio") -> float:
    """Disparity-penalized AUC summary.

    ``ratio``: overall / (1 + sum_a |AUC_a - overall|).
    ``mean-gap``: mean_a AUC_a - max pairwise gap, floored at 0.
    Categories with an undefined AUC are left out.
    """
    if mode not in ES_AUC_MODES:
        raise ValueError(f"unknown ES-AUC mode {mode!r}; expected one of {ES_AUC_MODES}")
    overall = auc(preds.scores, preds.labels)
    groups = [v for v in groupwise_auc(preds).values() if v is not None]
    if not groups:
        raise UndefinedMetric("no group has a defined AUC")
    groups = np.array(groups)
    if mode == "ratio":
        return float(overall / (1.0 + np.abs(groups - overall).sum()))
    return float(max(groups.mean() - (groups.max() - groups.min()), 0.0))


def hard_labels(scores=None, rule: str = "argmax", threshold: float = 0.5, argmax_predictions=None) -> np.ndarray:
    """Hard 0/1 labels: the zero-shot argmax class, or ``score >= threshold``."""
    if rule == "argmax":
        if argmax_predictions is None:
            raise ValueError("argmax rule needs the zero-shot predicted classes")
        return np.asarray(argmax_predictions, dtype=int)
    if rule == "threshold":
        if not 0.0 <= threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {threshold}")
        return (np.asarray(scores, dtype=np.float64) >= threshold).astype(int)
    raise ValueError(f"unknown rule {rule!r}; expected 'argmax' or 'threshold'")


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------


@dataclass
class FairnessReport:
    attribute: str
    overall_auc: float
    group_auc: dict[str, float | None]
    group_n: dict[str, int]
    es_auc: float
    eod: float | None
    group_auc_std: float
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def pct(v):
            return None if v is None else round(100.0 * v, 10)

        return {
            "attribute": self.attribute,
            "overall_auc": self.overall_auc,
            "es_auc": self.es_auc,
            "eod": self.eod,
            "group_auc_std": self.group_auc_std,
            "groups": {
                c: {"auc": self.group_auc[c], "n": self.group_n[c]} for c in sorted(self.group_auc)
            },
            "percent": {
                "overall_auc": pct(self.overall_auc),
                "es_auc": pct(self.es_auc),
                "eod": pct(self.eod),
                "group_auc_std": pct(self.group_auc_std),
                "groups": {c: pct(self.group_auc[c]) for c in sorted(self.group_auc)},
            },
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FairnessReport":
        groups = d["groups"]
        return cls(
            attribute=d["attribute"],
            overall_auc=d["overall_auc"],
            group_auc={c: g["auc"] for c, g in groups.items()},
            group_n={c: int(g.get("n", 0)) for c, g in groups.items()},
            es_auc=d["es_auc"],
            eod=d["eod"],
            group_auc_std=d.get("group_auc_std", 0.0),
            meta=d.get("meta", {}),
        )


def fairness_report(preds: ScoredPredictions, attribute: str, es_mode: str = "ratio",
                    threshold_rule: str = "argmax") -> FairnessReport:
    group_auc = groupwise_auc(preds)
    defined = [v for v in group_auc.values() if v is not None]
    undefined = sorted(c for c, v in group_auc.items() if v is None)
    r = rates(preds)
    try:
        eod_value = eod(preds)
    except UndefinedMetric:
        eod_value = None
    meta = {
        "score_definition": SCORE_DEFINITION,
        "es_auc_mode": es_mode,
        "threshold_rule": threshold_rule,
        "undefined_auc_groups": undefined,
        "undefined_tpr_groups": sorted(c for c, (t, _) in r.items() if t is None),
        "undefined_fpr_groups": sorted(c for c, (_, f) in r.items() if f is None),
    }
    return FairnessReport(
        attribute=attribute,
        overall_auc=auc(preds.scores, preds.labels),
        group_auc=group_auc,
        group_n={c: int(preds.mask(c).sum()) for c in group_auc},
        es_auc=es_auc(preds, es_mode),
        eod=eod_value,
        group_auc_std=float(np.std(defined)) if defined else 0.0,
        meta=meta,
    )


def write_reports(reports: dict[str, FairnessReport], path) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "reports": {a: r.to_dict() for a, r in sorted(reports.items())},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_reports(path) -> dict[str, FairnessReport]:
    payload = json.loads(Path(path).read_text())
    return {a: FairnessReport.from_dict(r) for a, r in payload["reports"].items()}


def write_radar_csv(reports: dict[str, FairnessReport], path, run: str = "") -> None:
    """Long-format plot data: one row per (attribute, metric, group)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["schema_version", "run", "attribute", "metric", "group", "value", "percent"])
        for attr, rep in sorted(reports.items()):
            rows = [("eod", "", rep.eod), ("es_auc", "", rep.es_auc),
                    ("overall_auc", "", rep.overall_auc), ("group_auc_std", "", rep.group_auc_std)]
            rows += [("group_auc", c, rep.group_auc[c]) for c in sorted(rep.group_auc)]
            for metric, group, value in rows:
                pct = "" if value is None else f"{100 * value:.2f}"
                w.writerow([SCHEMA_VERSION, run, attr, metric, group,
                            "" if value is None else repr(float(value)), pct])


# ----------------------------------------------------------------------------
# predictions CSV
# ----------------------------------------------------------------------------

PREDICTION_COLUMNS = ["id", "score", "pred", "label"]


def write_predictions(path, ids, scores, preds, labels, attributes: dict[str, np.ndarray]) -> None:
    names = sorted(attributes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS + names)
        for i in range(len(ids)):
            w.writerow([ids[i], repr(float(scores[i])), int(preds[i]), int(labels[i])]
                       + [attributes[a][i] for a in names])


def read_predictions(path, attribute: str) -> ScoredPredictions:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no prediction rows")
    if attribute not in rows[0]:
        raise ValueError(f"{path}: attribute column {attribute!r} not found")
    return ScoredPredictions(
        scores=[float(r["score"]) for r in rows],
        predictions=[int(r["pred"]) for r in rows],
        labels=[int(r["label"]) for r in rows],
        groups=[r[attribute] for r in rows],
        ids=[r["id"] for r in rows],
    )
