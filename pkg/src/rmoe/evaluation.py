"""AUPRC, macro averages, occurrence ratios and gain tables.

CSV layouts (floats with 6 decimals, ``n/a`` where undefined):

``metrics.csv``            ``event,occurrence_ratio,positives,auprc``; the final
                           row has event ``__macro__``.
``gains.csv``              ``event,occurrence_ratio,base_auprc,challenger_auprc,gain_pct``;
                           final row ``__macro__``.
``gain_vs_occurrence.csv`` ``event,occurrence_ratio,gain_pct`` (one row per
                           event type with a defined gain).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import make_batch, occurrence_counts, oracle_sequence

MACRO = "__macro__"
NA = "n/a"
METRICS_HEADER = ["event", "occurrence_ratio", "positives", "auprc"]
GAINS_HEADER = ["event", "occurrence_ratio", "base_auprc", "challenger_auprc", "gain_pct"]
PLOT_HEADER = ["event", "occurrence_ratio", "gain_pct"]


class UndefinedMetric(ValueError):
    """Raised for an event type without positive labels."""


def auprc(scores, labels) -> float:
    """Average precision with tied scores handled as one threshold.

    Sort by score descending; for every distinct score the recall step is
    weighted by the precision after admitting the whole tie group.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetric("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[s[1:] != s[:-1], True]   # end of each tie group
    tp = np.cumsum(y)[last]
    seen = np.flatnonzero(last) + 1
    dtp = np.diff(np.r_[0, tp])
    return float(np.sum(dtp * (tp / seen)) / n_pos)


@dataclass
class MetricsReport:
    names: list
    auprc: dict                       # event -> AUPRC, evaluated types only
    occurrence: dict                  # event -> ratio
    positives: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)

    @property
    def macro(self) -> float:
        return macro_auprc(self.auprc)

    @property
    def n_evaluated(self) -> int:
        return len(self.auprc)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            for name in self.names:
                a = self.auprc.get(name)
                w.writerow([name, _fmt(self.occurrence.get(name)),
                            self.positives.get(name, 0), NA if a is None else _fmt(a)])
            w.writerow([MACRO, NA, sum(self.positives.values()), _fmt(self.macro)])

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != METRICS_HEADER:
            raise ValueError(f"{path}: expected header {','.join(METRICS_HEADER)}")
        names, scores, occ, pos, excluded = [], {}, {}, {}, []
        for row in rows[1:]:
            if row[0] == MACRO:
                continue
            name = row[0]
            names.append(name)
            occ[name] = None if row[1] == NA else float(row[1])
            pos[name] = int(row[2])
            if row[3] == NA:
                excluded.append(name)
            else:
                scores[name] = float(row[3])
        return cls(names, scores, occ, pos, excluded)


def _fmt(x) -> str:
    return NA if x is None else f"{x:.6f}"


def macro_auprc(per_type: dict) -> float:
    """Unweighted mean over the evaluated event types."""
    if not per_type:
        raise ValueError("no event type has a positive label; macro AUPRC undefined")
    return float(np.mean([per_type[k] for k in sorted(per_type)]))


def occurrence_ratio(sequences: list, n_events: int) -> np.ndarray:
    """Fraction of all windows (pooled over sequences) in which each event is set."""
    counts, total = occurrence_counts(sequences, n_events)
    if total == 0:
        raise ValueError("occurrence ratio needs at least one window")
    return counts / total


def pooled_pairs(predict, sequences: list, target_indices):
    """Stack predictions and next-window labels over every step of every sequence.

    ``predict(sequence_index, windows)`` returns ``(T-1, |E'|)`` probabilities.
    """
    tgt = np.asarray(target_indices)
    scores, labels = [], []
    for i, s in enumerate(sequences):
        if len(s) < 2:
            continue
        scores.append(np.asarray(predict(i, s.windows)))
        labels.append(s.windows[1:, tgt])
    if not scores:
        raise ValueError("no sequence with at least two windows")
    return np.concatenate(scores), np.concatenate(labels)


def evaluate_scores(scores: np.ndarray, labels: np.ndarray, names: list,
                    occurrence: dict | None = None) -> MetricsReport:
    per, pos, excluded = {}, {}, []
    for j, name in enumerate(names):
        pos[name] = int(labels[:, j].sum())
        if pos[name] == 0:
            excluded.append(name)
            continue
        per[name] = auprc(scores[:, j], labels[:, j])
    return MetricsReport(list(names), per, dict(occurrence or {}), pos, excluded)


def evaluate_model(model, sequences: list, vocab, batch_size: int = 256) -> MetricsReport:
    """Per-event AUPRC of ``model`` on ``sequences`` plus occurrence ratios."""

    tgt = vocab.target_indices
    scores, labels = [], []
    for i in range(0, len(sequences), batch_size):
        chunk = [s for s in sequences[i:i + batch_size] if len(s) >= 2]
        if not chunk:
            continue
        b = make_batch(chunk, tgt)
        P = model.predict(b.X)
        m = b.mask
        scores.append(P.transpose(1, 0, 2)[m.T])
        labels.append(b.Y.transpose(1, 0, 2)[m.T])
    return evaluate_scores(np.concatenate(scores), np.concatenate(labels), vocab.target_names,
                           _target_occurrence(sequences, vocab))


def evaluate_oracle(world, labels_by_id: dict, sequences: list, vocab) -> MetricsReport:
    tgt = np.asarray(vocab.target_indices)
    scores, labels = pooled_pairs(
        lambda i, w: oracle_sequence(world, labels_by_id[sequences[i].admission_id], w)[:, tgt],
        sequences, tgt)
    return evaluate_scores(scores, labels, vocab.target_names,
                           _target_occurrence(sequences, vocab))


def _target_occurrence(sequences, vocab) -> dict:
    ratios = occurrence_ratio(sequences, vocab.n_inputs)
    return {vocab.input_names[j]: float(ratios[j]) for j in vocab.target_indices}


def gain_pct(base: float, challenger: float):
    return None if base == 0 else 100.0 * (challenger - base) / base


def gain_report(base: MetricsReport, challenger: MetricsReport) -> list:
    """Rows ``(event, occurrence, base, challenger, gain%)`` plus a macro row."""
    if base.names != challenger.names or set(base.auprc) != set(challenger.auprc):
        raise ValueError("reports cover different event types")
    rows = []
    for name in base.names:
        if name not in base.auprc:
            continue
        b, c = base.auprc[name], challenger.auprc[name]
        rows.append((name, base.occurrence.get(name), b, c, gain_pct(b, c)))
    mb, mc = base.macro, challenger.macro
    rows.append((MACRO, None, mb, mc, gain_pct(mb, mc)))
    return rows


def write_gain_files(rows: list, gains_path, plot_path) -> None:
    with open(gains_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GAINS_HEADER)
        for name, occ, b, c, g in rows:
            w.writerow([name, _fmt(occ), _fmt(b), _fmt(c), _fmt(g)])
    with open(plot_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLOT_HEADER)
        for name, occ, _, _, g in rows:
            if name != MACRO and g is not None and occ is not None:
                w.writerow([name, _fmt(occ), _fmt(g)])
