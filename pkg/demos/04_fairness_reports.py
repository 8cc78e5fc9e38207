"""
Subgroup fairness reports
=========================

Zero-shot scores come from cosine similarity with two class prompts. From the
scores we compute overall and per-group AUC, the equalized-odds distance and
ES-AUC, then write JSON reports and a long-format CSV for radar plots.
"""

import tempfile
from pathlib import Path

from debiased_clip import TrainConfig, bias_preset, evaluate, gen_synthetic, split, strip_attributes, train
from debiased_clip.data import synthetic_prompts
from debiased_clip.metrics import write_radar_csv, write_reports

spec = bias_preset(n=600, seed=1)
tr, te = split(gen_synthetic(spec), (0.5, 0.5), seed=1)
prompts = synthetic_prompts(spec)

model = train(TrainConfig(epochs=5), strip_attributes(tr)).model
ev = evaluate(model, te, prompts, ["group"])
report = ev.reports["group"]

print("overall AUC", round(report.overall_auc, 4))
print("group AUC  ", {g: round(v, 4) for g, v in report.group_auc.items()})
print("EOD", round(report.eod, 4), "ES-AUC", round(report.es_auc, 4))

# %%
# Fractions are stored; the percent block uses the x100 convention of result tables.
print(report.to_dict()["percent"])

out = Path(tempfile.mkdtemp())
write_reports(ev.reports, out / "reports.json")
write_radar_csv(ev.reports, out / "radar.csv", run="clip")
print((out / "radar.csv").read_text())
