"""Seeded clip-only vs debiased comparison on a planted-bias synthetic mix."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import bias_preset, gen_synthetic, split, strip_attributes, synthetic_prompts
from .metrics import SCHEMA_VERSION
from .trainer import TrainConfig, evaluate, train


@dataclass
class RunOutcome:
    seed: int
    mode: str
    minority_auc: float
    majority_auc: float
    overall_auc: float
    es_auc: float
    eod: float | None
    seconds: float


@dataclass
class DirectionalResult:
    runs: list[RunOutcome]
    settings: dict = field(default_factory=dict)

    def median(self, mode: str, metric: str) -> float:
        return float(np.median([getattr(r, metric) for r in self.runs if r.mode == mode]))

    def passed(self) -> dict[str, bool]:
        return {
            m: self.median("debiased", m) >= self.median("clip", m)
            for m in ("minority_auc", "es_auc")
        }

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "settings": self.settings,
            "runs": [asdict(r) for r in self.runs],
            "medians": {
                mode: {m: self.median(mode, m) for m in ("minority_auc", "es_auc", "overall_auc")}
                for mode in ("clip", "debiased")
            },
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def run_once(seed: int, mode: str, n: int = 2000, epochs: int = 10, **overrides) -> RunOutcome:
    start = time.perf_counter()
    spec = bias_preset(n=n, seed=seed)
    data = gen_synthetic(spec)
    tr, _, te = split(data, (0.5, 0.1, 0.4), seed=seed)
    prompts = synthetic_prompts(spec)
    config = TrainConfig(mode=mode, epochs=epochs, seed=seed, **overrides)
    model = train(config, strip_attributes(tr), prompts=prompts).model
    rep = evaluate(model, te, prompts, [spec.attribute]).reports[spec.attribute]
    return RunOutcome(seed, mode, rep.group_auc["minority"], rep.group_auc["majority"],
                      rep.overall_auc, rep.es_auc, rep.eod, time.perf_counter() - start)


def directional_experiment(seeds=range(5), n: int = 2000, epochs: int = 10, **overrides) -> DirectionalResult:
    """Train both modes on the same seeds; validation data is unused (no early stopping)."""
    runs = [run_once(s, mode, n=n, epochs=epochs, **overrides)
            for s in seeds for mode in ("clip", "debiased")]
    settings = {"seeds": list(seeds), "n": n, "epochs": epochs, "preset": "bias_preset",
                "split": [0.5, 0.1, 0.4], **overrides}
    return DirectionalResult(runs, settings)
