"""Plain-text rendering of cross-validation report JSON."""
from __future__ import annotations

import json

import numpy as np

from .exceptions import FormatError


def load_report(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"report is not valid JSON: {exc.msg}", exc.pos) from None
    validate_report(doc)
    return doc


def validate_report(doc):
    if not isinstance(doc, dict):
        raise FormatError("report must be a JSON object")
    for key in ("scenario", "folds", "mean_accuracy"):
        if key not in doc:
            raise FormatError(f"report is missing {key!r}")
    folds = doc["folds"]
    if not isinstance(folds, list) or not folds:
        raise FormatError("report 'folds' must be a non-empty list")
    for i, fold in enumerate(folds, start=1):
        if not isinstance(fold, dict) or "accuracy" not in fold or "confusion_counts" not in fold:
            raise FormatError(f"fold {i} needs 'accuracy' and 'confusion_counts'")
        counts = np.asarray(fold["confusion_counts"])
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise FormatError(f"fold {i}: confusion_counts must be a square matrix")


def row_percentages(counts):
    counts = np.asarray(counts, dtype=np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    return np.where(rows > 0, 100.0 * counts / np.maximum(rows, 1), 0.0)


def accuracy_table(doc):
    accs = [float(f["accuracy"]) for f in doc["folds"]]
    mean = sum(accs) / len(accs)
    head = ["Model"] + [f"Fold {i}" for i in range(1, len(accs) + 1)] + ["Mean"]
    row = [doc["scenario"]] + [f"{a:.2f}" for a in accs] + [f"{mean:.2f}"]
    widths = [max(len(h), len(r)) for h, r in zip(head, row)]
    fmt = " | ".join(f"{{:>{w}}}" for w in widths)
    return "\n".join([fmt.format(*head), "-+-".join("-" * w for w in widths), fmt.format(*row)])


def confusion_panels(counts):
    """Counts and per-true-class percentages; columns are true labels, rows predictions."""
    counts = np.asarray(counts)
    pct = row_percentages(counts)
    n = counts.shape[0]
    lines = []
    for title, cells in (("counts", [[str(int(c)) for c in r] for r in counts.T]),
                         ("percent of true class", [[f"{c:.2f}" for c in r] for r in pct.T])):
        width = max(6, max(len(c) for r in cells for c in r))
        lines.append(f"{title} (columns: true label, rows: predicted label)")
        lines.append("pred\\true " + " ".join(f"{j:>{width}}" for j in range(n)))
        for i, r in enumerate(cells):
            lines.append(f"{i:>10} " + " ".join(f"{c:>{width}}" for c in r))
        lines.append("")
    return "\n".join(lines).rstrip("\n")


def render_report(doc, fold=1):
    validate_report(doc)
    if not 1 <= fold <= len(doc["folds"]):
        raise FormatError(f"fold {fold} out of range 1..{len(doc['folds'])}")
    f = doc["folds"][fold - 1]
    counts = np.asarray(f["confusion_counts"])
    acc = 100.0 * np.trace(counts) / max(counts.sum(), 1)
    parts = [
        accuracy_table(doc),
        "",
        f"Confusion matrix, {doc['scenario']} fold {fold} (acc {acc:.2f}%)",
        confusion_panels(counts),
    ]
    return "\n".join(parts) + "\n"
