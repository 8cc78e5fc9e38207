"""Command-line entry point: gen-data, train, evaluate, cluster, metrics, compare.

Errors are reported on stderr as one JSON line ``{"error": ..., "message": ...}``
with exit status 1; usage errors exit 2. ``DEBIASED_CLIP_SEED`` and
``DEBIASED_CLIP_OUT`` override the default seed and output directory when the
corresponding flag is not given.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cluster import cluster_report, kmeans
from .data import (
    DEFAULT_TEXT_DIM,
    GroupSpec,
    SyntheticSpec,
    bias_preset,
    gen_synthetic,
    load_jsonl,
    load_prompts,
    note_prompts,
    save_jsonl,
    save_prompts,
    strip_attributes,
    synthetic_prompts,
)
from .metrics import (
    ES_AUC_MODES,
    SCHEMA_VERSION,
    FairnessReport,
    fairness_report,
    read_predictions,
    read_reports,
    write_radar_csv,
    write_reports,
)
from .model import load_checkpoint
from .trainer import TrainConfig, evaluate, load_config, train

SEED_ENV = "DEBIASED_CLIP_SEED"
OUT_ENV = "DEBIASED_CLIP_OUT"


class CliError(Exception):
    pass


def _seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _out_dir(value: str | None, default: str) -> Path:
    path = Path(value or os.environ.get(OUT_ENV) or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _prompts_for(data_path: str, explicit: str | None, q: int):
    path = Path(explicit) if explicit else Path(str(data_path) + ".prompts.json")
    if path.exists():
        return load_prompts(path)
    if explicit:
        raise CliError(f"prompt file not found: {path}")
    return note_prompts(q)


def _attrs(values: list[str] | None) -> list[str]:
    out = []
    for v in values or []:
        out += [a for a in v.split(",") if a]
    return out


# ----------------------------------------------------------------------------
# compare
# ----------------------------------------------------------------------------


@dataclass
class CompareSummary:
    run_a: str
    run_b: str
    rows: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "run_a": self.run_a, "run_b": self.run_b, "rows": self.rows}


def _pct(v: float | None) -> str:
    return "" if v is None else f"{100 * v:.2f}"


def _winner(metric: str, a: float | None, b: float | None) -> str:
    if a is None or b is None or a == b:
        return ""
    if metric == "eod":
        return "a" if a < b else "b"
    if metric == "es_auc":
        return "a" if a > b else "b"
    return ""


def compare(reports_a: dict[str, FairnessReport], reports_b: dict[str, FairnessReport],
            run_a: str = "a", run_b: str = "b") -> CompareSummary:
    """Side-by-side metrics per attribute with b - a deltas and winner flags.

    EOD: lower wins. ES-AUC: higher wins. Other rows carry no flag.
    """
    if set(reports_a) != set(reports_b):
        only_a = sorted(set(reports_a) - set(reports_b))
        only_b = sorted(set(reports_b) - set(reports_a))
        raise CliError(f"attribute mismatch: only in {run_a}: {only_a}; only in {run_b}: {only_b}")
    summary = CompareSummary(run_a, run_b)
    for attr in sorted(reports_a):
        ra, rb = reports_a[attr], reports_b[attr]
        items = [("eod", "", ra.eod, rb.eod), ("es_auc", "", ra.es_auc, rb.es_auc),
                 ("overall_auc", "", ra.overall_auc, rb.overall_auc)]
        groups = sorted(set(ra.group_auc) | set(rb.group_auc))
        items += [("group_auc", g, ra.group_auc.get(g), rb.group_auc.get(g)) for g in groups]
        for metric, group, a, b in items:
            delta = None if a is None or b is None else b - a
            summary.rows.append({
                "attribute": attr, "metric": metric, "group": group,
                "a": a, "b": b, "delta": delta,
                "a_percent": _pct(a), "b_percent": _pct(b),
                "delta_percent": "" if delta is None else f"{100 * b - 100 * a:.2f}",
                "winner": _winner(metric, a, b),
            })
    return summary


def write_compare_csv(summary: CompareSummary, path) -> None:
    cols = ["schema_version", "attribute", "metric", "group", "a", "b", "delta",
            "a_percent", "b_percent", "delta_percent", "winner"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in summary.rows:
            vals = {k: ("" if row[k] is None else repr(float(row[k]))) for k in ("a", "b", "delta")}
            w.writerow([SCHEMA_VERSION, row["attribute"], row["metric"], row["group"], vals["a"], vals["b"],
                        vals["delta"], row["a_percent"], row["b_percent"], row["delta_percent"], row["winner"]])


def format_compare(summary: CompareSummary) -> str:
    lines = [f"{'attribute':<12} {'metric':<12} {'group':<10} {summary.run_a:>10} {summary.run_b:>10} "
             f"{'delta':>8}  winner"]
    for r in summary.rows:
        flag = {"a": summary.run_a, "b": summary.run_b}.get(r["winner"], "")
        lines.append(f"{r['attribute']:<12} {r['metric']:<12} {r['group']:<10} {r['a_percent']:>10} "
                     f"{r['b_percent']:>10} {r['delta_percent']:>8}  {flag}")
    return "\n".join(lines)


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    seed = _seed(args.seed)
    if args.groups:
        try:
            groups = [GroupSpec(**g) for g in json.loads(args.groups)]
        except (json.JSONDecodeError, TypeError) as exc:
            raise CliError(f"--groups must be a JSON list of group objects ({exc})") from None
        spec = SyntheticSpec(n=args.n, p=args.p, q=args.q, groups=groups, seed=seed,
                             positive_rate=args.positive_rate)
    else:
        spec = bias_preset(n=args.n, p=args.p, q=args.q, seed=seed)
    data = gen_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(data, out)
    save_prompts(synthetic_prompts(spec), str(out) + ".prompts.json")
    print(json.dumps({"schema_version": SCHEMA_VERSION, "records": len(data), "out": str(out)}))


TRAIN_OVERRIDES = ["mode", "batch_size", "k", "beta", "lr", "optimizer", "epochs", "aug_strength",
                   "grad_scope", "weight_variant", "granularity", "ema", "d", "depth"]


def cmd_train(args) -> None:
    values = load_config(args.config).to_dict() if args.config else TrainConfig().to_dict()
    for key in TRAIN_OVERRIDES:
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    # flag, then environment, then config file
    if args.seed is not None or os.environ.get(SEED_ENV) is not None:
        values["seed"] = _seed(args.seed)
    if args.weight_trace:
        values["weight_trace"] = args.weight_trace
    # attributes are never parsed on the training path
    train_set = strip_attributes(load_jsonl(args.data, args.q, attributes=False))
    val_set = strip_attributes(load_jsonl(args.val, args.q, attributes=False)) if args.val else None
    TrainConfig(**values).validate()
    values["out_dir"] = str(_out_dir(args.out, values.get("out_dir") or "run"))
    config = TrainConfig(**values)
    prompts = _prompts_for(args.data, args.prompts, train_set.q) if val_set is not None else None
    result = train(config, train_set, val_set, prompts)
    print(json.dumps({"schema_version": SCHEMA_VERSION, "checkpoint": str(result.checkpoint),
                      "steps": len(result.log), "best_val_auc": result.best_val_auc}))


def cmd_evaluate(args) -> None:
    model = load_checkpoint(args.ckpt)
    data = load_jsonl(args.data, args.q)
    prompts = _prompts_for(args.data, args.prompts, data.q)
    attrs = _attrs(args.attr) or data.attribute_names()
    out = _out_dir(args.out, "eval")
    ev = evaluate(model, data, prompts, attrs, es_mode=args.es_mode, rule=args.rule,
                  threshold=args.threshold, predictions_path=out / "predictions.csv")
    write_reports(ev.reports, out / "reports.json")
    write_radar_csv(ev.reports, out / "radar.csv", run=args.run or "")
    print(json.dumps({"schema_version": SCHEMA_VERSION, "out": str(out),
                      "es_auc": {a: r.es_auc for a, r in ev.reports.items()}}))


def cmd_cluster(args) -> None:
    model = load_checkpoint(args.ckpt)
    data = load_jsonl(args.data, args.q)
    assignment = kmeans(model.embed_images(data.images), args.k, seed=_seed(args.seed))
    out = _out_dir(args.out, "clusters")
    with open(out / "assignments.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "cluster"])
        for rid, c in zip(data.ids, assignment.labels):
            w.writerow([rid, int(c)])
    payload = {"schema_version": SCHEMA_VERSION, "k": args.k, "inertia": assignment.inertia,
               "n_iter": assignment.n_iter, "attributes": {}}
    for a in _attrs(args.attr):
        if a not in data.attribute_names():
            raise CliError(f"attribute {a!r} is absent from every record")
        values = data.attribute(a)
        has = values != ""
        payload["attributes"][a] = cluster_report(assignment.labels[has], values[has])
    _write_json(out / "cluster_report.json", payload)
    print(json.dumps({"schema_version": SCHEMA_VERSION, "out": str(out),
                      "nmi": {a: r["nmi"] for a, r in payload["attributes"].items()}}))


def cmd_metrics(args) -> None:
    reports = {a: fairness_report(read_predictions(args.inp, a), a, args.es_mode, "from-file")
               for a in _attrs(args.attr)}
    if not reports:
        raise CliError("at least one --attr is required")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_reports(reports, str(out) + ".json")
        write_radar_csv(reports, str(out) + ".radar.csv", run=args.run or "")
    print(json.dumps({"schema_version": SCHEMA_VERSION,
                      "reports": {a: r.to_dict() for a, r in sorted(reports.items())}}, sort_keys=True))


def cmd_compare(args) -> None:
    names = args.names or ["a", "b"]
    summary = compare(read_reports(args.a), read_reports(args.b), names[0], names[1])
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_json(Path(str(out) + ".json"), summary.to_dict())
        write_compare_csv(summary, str(out) + ".csv")
    print(format_compare(summary))


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="debiased-clip", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic JSONL dataset and its prompt file")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--p", type=int, default=16, help="image feature dimension")
    g.add_argument("--q", type=int, default=16, help="text feature dimension")
    g.add_argument("--groups", help='JSON list, e.g. [{"proportion": 0.9, "strength": 2, "name": "maj"}, ...]')
    g.add_argument("--positive-rate", type=float, default=0.5)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a dual encoder (clip-only or debiased)")
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--prompts")
    t.add_argument("--config", help="key = value file of training settings")
    t.add_argument("--out", help="run directory")
    t.add_argument("--q", type=int, default=DEFAULT_TEXT_DIM, help="featurizer size for raw notes")
    t.add_argument("--seed", type=int)
    t.add_argument("--weight-trace")
    t.add_argument("--mode", choices=["clip", "debiased"])
    t.add_argument("--batch-size", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--beta", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--optimizer", choices=["adam", "sgd"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--aug-strength", type=float)
    t.add_argument("--grad-scope", choices=["final", "all"])
    t.add_argument("--weight-variant", choices=["alignment", "table1-norm"])
    t.add_argument("--granularity", choices=["example", "view"])
    t.add_argument("--ema", type=float)
    t.add_argument("--d", type=int)
    t.add_argument("--depth", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="zero-shot predictions and fairness reports")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--prompts")
    e.add_argument("--attr", action="append", help="attribute name (repeatable or comma-separated)")
    e.add_argument("--es-mode", choices=ES_AUC_MODES, default="ratio")
    e.add_argument("--rule", choices=["argmax", "threshold"], default="argmax")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--q", type=int, default=DEFAULT_TEXT_DIM)
    e.add_argument("--run", help="run label for the radar CSV")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("cluster", help="k-means on image embeddings, NMI against attributes")
    c.add_argument("--data", required=True)
    c.add_argument("--ckpt", required=True)
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--attr", action="append")
    c.add_argument("--seed", type=int)
    c.add_argument("--q", type=int, default=DEFAULT_TEXT_DIM)
    c.add_argument("--out")
    c.set_defaults(func=cmd_cluster)

    m = sub.add_parser("metrics", help="fairness metrics from a predictions CSV")
    m.add_argument("--in", dest="inp", required=True)
    m.add_argument("--attr", action="append", required=True)
    m.add_argument("--es-mode", choices=ES_AUC_MODES, default="ratio")
    m.add_argument("--run")
    m.add_argument("--out", help="output prefix; writes <out>.json and <out>.radar.csv")
    m.set_defaults(func=cmd_metrics)

    k = sub.add_parser("compare", help="side-by-side comparison of two report files")
    k.add_argument("--a", required=True)
    k.add_argument("--b", required=True)
    k.add_argument("--names", nargs=2, metavar=("A", "B"))
    k.add_argument("--out", help="output prefix; writes <out>.json and <out>.csv")
    k.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with np.errstate(all="ignore"):
            args.func(args)
    except (CliError, ValueError, TypeError, KeyError, OSError, FloatingPointError, RuntimeError) as exc:
        message = str(exc).replace("\n", " ")
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": message}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
