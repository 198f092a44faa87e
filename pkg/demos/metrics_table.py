"""Sensitivity, specificity, accuracy and Youden's index with exact
95% intervals for three published confusion matrices.

    python3 demos/metrics_table.py
"""

from screenpipe import evalkit

MATRICES = {
    "vgg-ish": evalkit.ConfusionMatrix(tp=139, fp=9, fn=8, tn=121),
    "inception-ish": evalkit.ConfusionMatrix(tp=143, fp=6, fn=4, tn=124),
    "ensemble": evalkit.ConfusionMatrix(tp=144, fp=5, fn=3, tn=125),
}

if __name__ == "__main__":
    for name, cm in MATRICES.items():
        print(f"== {name}")
        print(evalkit.report(cm).to_text())
