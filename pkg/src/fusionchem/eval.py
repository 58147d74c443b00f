"""Confusion counts, balanced error rate, ensembles and abstention.

The positive class is RB (label 1).  The error rate is the balanced error
``Er = 1 - (Sn + Sp) / 2``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FusionError, UndefinedMetricError, ValidationError

ABSTAIN = -1
DECISION_THRESHOLD = 0.5
DEFAULT_ABSTAIN_THRESHOLD = 0.8

# Prior consensus models quoted for comparison in report footers:
# average-output consensus, and the unanimous consensus with its coverage.
REFERENCE_CONSENSUS_ER = 0.170
REFERENCE_UNANIMOUS_ER = 0.130
REFERENCE_UNANIMOUS_COVERAGE = 0.87


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def confusion(predictions, labels):
    predictions = np.asarray(predictions).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if predictions.shape != labels.shape:
        raise ValidationError(f"{len(predictions)} predictions for {len(labels)} labels")
    for name, arr in (("predictions", predictions), ("labels", labels)):
        if not np.all((arr == 0) | (arr == 1)):
            raise ValidationError(f"{name} must be 0/1 (abstentions removed upstream)")
    pos, pred = labels == 1, predictions == 1
    return ConfusionCounts(int(np.sum(pos & pred)), int(np.sum(~pos & pred)),
                           int(np.sum(~pos & ~pred)), int(np.sum(pos & ~pred)))


def metrics(counts):
    """Return ``(Sn, Sp, Er)``."""
    if counts.tp + counts.fn == 0:
        raise UndefinedMetricError("sensitivity undefined: TP + FN = 0 (no positive samples scored)")
    if counts.tn + counts.fp == 0:
        raise UndefinedMetricError("specificity undefined: TN + FP = 0 (no negative samples scored)")
    sn = counts.tp / (counts.tp + counts.fn)
    sp = counts.tn / (counts.tn + counts.fp)
    return sn, sp, 1.0 - (sn + sp) / 2.0


def classify(probabilities, threshold=DECISION_THRESHOLD):
    """RB (1) iff probability >= threshold."""
    return (np.asarray(probabilities) >= threshold).astype(int)


def threshold_filter(probabilities, tau=DEFAULT_ABSTAIN_THRESHOLD):
    """Abstain where ``max(p, 1 - p) < tau``.

    Returns ``(decisions, coverage)`` with abstentions marked ``ABSTAIN``.
    """
    if not 0.5 <= tau <= 1.0:
        raise ValidationError(f"abstention threshold must be in [0.5, 1], got {tau}")
    p = np.asarray(probabilities, dtype=float).reshape(-1)
    decisions = classify(p)
    decisions[np.maximum(p, 1.0 - p) < tau] = ABSTAIN
    coverage = float(np.mean(decisions != ABSTAIN)) if len(p) else 0.0
    return decisions, coverage


@dataclass(eq=False)
class Ensemble:
    """Members share one family and feature set; outputs are averaged."""

    members: list
    seeds: list = field(default_factory=list)
    decision_threshold: float = DECISION_THRESHOLD
    abstain_threshold: float | None = DEFAULT_ABSTAIN_THRESHOLD

    def __post_init__(self):
        if not self.members:
            raise ValidationError("an ensemble needs at least one member")
        families = {m.family for m in self.members}
        if len(families) != 1:
            raise ValidationError(f"ensemble members mix families {sorted(families)}")
        features = {None if m.pipeline is None else m.pipeline.features for m in self.members}
        if len(features) != 1:
            raise ValidationError("ensemble members use different feature sets")

    @property
    def family(self):
        return self.members[0].family

    def member_probabilities(self, samples):
        out = []
        for i, member in enumerate(self.members):
            try:
                out.append(member.predict_proba(samples))
            except FusionError as exc:
                label = self.seeds[i] if i < len(self.seeds) else i
                raise type(exc)(f"ensemble member {label}: {exc}") from exc
        return np.vstack(out)

    def predict_proba(self, samples):
        return ensemble_predict(self.member_probabilities(samples))


def ensemble_predict(member_probabilities):
    """Arithmetic mean over members (rows) for every sample (columns)."""
    probs = np.asarray(member_probabilities, dtype=float)
    if probs.ndim == 1:
        return float(probs.mean())
    return probs.mean(axis=0)


@dataclass(eq=False)
class EvalReport:
    counts: ConfusionCounts
    sensitivity: float
    specificity: float
    error_rate: float
    coverage: float
    ids: list
    probabilities: np.ndarray
    decisions: np.ndarray
    labels: np.ndarray
    tau: float | None = None

    def per_sample_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "probability", "prediction", "label"])
        for sid, p, d, y in zip(self.ids, self.probabilities, self.decisions, self.labels):
            pred = "abstain" if d == ABSTAIN else ("RB" if d == 1 else "NRB")
            writer.writerow([sid, repr(float(p)), pred, "RB" if y == 1 else "NRB"])
        return buf.getvalue()

    def summary(self):
        c = self.counts
        lines = [
            f"samples: {len(self.ids)}",
            f"threshold: {'none' if self.tau is None else f'{self.tau:.4f}'}",
            f"TP: {c.tp}  FP: {c.fp}  TN: {c.tn}  FN: {c.fn}",
            f"Sn: {self.sensitivity:.4f}",
            f"Sp: {self.specificity:.4f}",
            f"Er: {self.error_rate:.4f}",
            f"coverage: {self.coverage:.4f}",
            f"reference consensus Er: {REFERENCE_CONSENSUS_ER:.4f}",
            f"reference unanimous consensus Er: {REFERENCE_UNANIMOUS_ER:.4f} "
            f"at coverage {REFERENCE_UNANIMOUS_COVERAGE:.4f}",
        ]
        return "\n".join(lines) + "\n"


def report_from_probabilities(ids, probabilities, labels, tau=None):
    p = np.asarray(probabilities, dtype=float).reshape(-1)
    y = np.asarray(labels).astype(int).reshape(-1)
    if tau is None:
        decisions, coverage = classify(p), 1.0
    else:
        decisions, coverage = threshold_filter(p, tau)
    kept = decisions != ABSTAIN
    counts = confusion(decisions[kept], y[kept])
    try:
        sn, sp, er = metrics(counts)
    except UndefinedMetricError:
        sn = sp = er = math.nan
    return EvalReport(counts, sn, sp, er, coverage, list(ids), p, decisions, y, tau)


def evaluate(model, samples, tau=None):
    """Score a model or ensemble on labelled samples."""
    if samples.labels is None:
        raise ValidationError("evaluation needs labelled samples")
    probs = model.predict_proba(samples)
    return report_from_probabilities(samples.ids, probs, samples.labels, tau)
