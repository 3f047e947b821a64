"""Confusion-matrix accumulation, accuracy, and false-negative rate.

Cautery is the positive class throughout. Pairs where either side is
excluded are skipped: only voted, labeled regions are scored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .aggregate import Decision, RegionDecision
from .annotation import PatchLabel
from .errors import EmptyMatrix, MisalignedRegions, NoPositives


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def add(self, predicted_positive: bool, truth_positive: bool) -> None:
        if truth_positive:
            if predicted_positive:
                self.tp += 1
            else:
                self.fn += 1
        else:
            if predicted_positive:
                self.fp += 1
            else:
                self.tn += 1

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


def accumulate(
    decisions: Sequence[RegionDecision],
    truths: Sequence[tuple[tuple[int, int], Decision]],
    matrix: ConfusionMatrix | None = None,
) -> ConfusionMatrix:
    """Score aligned (decision, truth) region pairs; excluded on either side
    skips the pair."""
    if len(decisions) != len(truths):
        raise MisalignedRegions(f"{len(decisions)} decisions vs {len(truths)} truths")
    matrix = matrix or ConfusionMatrix()
    for dec, (truth_id, truth) in zip(decisions, truths):
        if dec.region_id != truth_id:
            raise MisalignedRegions(f"decision {dec.region_id} paired with truth {truth_id}")
        if dec.decision == Decision.EXCLUDED or truth == Decision.EXCLUDED:
            continue
        matrix.add(dec.decision == Decision.CAUTERY, truth == Decision.CAUTERY)
    return matrix


def accumulate_patches(
    predictions: Sequence[int],
    labels: Sequence[PatchLabel],
    matrix: ConfusionMatrix | None = None,
) -> ConfusionMatrix:
    """Patch-scale counterpart: score binary predictions against patch labels,
    skipping equivocal and unlabeled ground truth."""
    if len(predictions) != len(labels):
        raise MisalignedRegions(f"{len(predictions)} predictions vs {len(labels)} labels")
    matrix = matrix or ConfusionMatrix()
    for pred, label in zip(predictions, labels):
        if label not in (PatchLabel.CAUTERY, PatchLabel.NON_CAUTERY):
            continue
        matrix.add(pred == 1, label == PatchLabel.CAUTERY)
    return matrix


def accuracy(m: ConfusionMatrix) -> float:
    if m.total == 0:
        raise EmptyMatrix("no scored pairs")
    return (m.tp + m.tn) / m.total


def fnr(m: ConfusionMatrix) -> float:
    if m.tp + m.fn == 0:
        raise NoPositives("no positive ground truth")
    return m.fn / (m.tp + m.fn)


def report(m: ConfusionMatrix, scope: str) -> dict:
    """Metrics report; undefined values are null rather than fabricated."""
    return {
        "scope": scope,
        "tp": m.tp,
        "fp": m.fp,
        "tn": m.tn,
        "fn": m.fn,
        "accuracy": accuracy(m) if m.total > 0 else None,
        "fnr": fnr(m) if m.tp + m.fn > 0 else None,
    }


def write_report(rep: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
