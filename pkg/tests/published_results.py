"""Per-attribute values of the published zero-shot comparison table, as fractions."""
from debiased_clip.metrics import FairnessReport

# attribute: (groups, clip (eod, es_auc, group aucs), debiased (...)), all in percent
TABLE = {
    "race": (["asian", "black", "white"], (24.00, 64.90, [70.85, 65.99, 67.99]),
             (36.36, 65.49, [68.52, 67.29, 66.42])),
    "gender": (["female", "male"], (5.23, 66.21, [66.93, 70.03]), (11.47, 62.77, [64.09, 70.88])),
    "ethnicity": (["non-hispanic", "hispanic"], (17.10, 61.64, [68.66, 57.92]),
                  (3.50, 64.40, [67.18, 63.09])),
    "language": (["english", "spanish", "others"], (22.28, 57.66, [68.44, 58.24, 60.08]),
                 (16.00, 60.97, [66.74, 70.17, 60.52])),
    "age": (["young", "old"], (27.72, 58.26, [53.79, 70.95]), (16.24, 58.89, [54.59, 68.42])),
}


def reports(which: int) -> dict[str, FairnessReport]:
    """which=0 for the clip-only column, 1 for the debiased column."""
    out = {}
    for attr, (groups, *runs) in TABLE.items():
        eod, es, aucs = runs[which]
        out[attr] = FairnessReport(
            attribute=attr, overall_auc=None, es_auc=es / 100, eod=eod / 100,
            group_auc={g: a / 100 for g, a in zip(groups, aucs)},
            group_n={g: 0 for g in groups}, group_auc_std=0.0,
        )
    return out
