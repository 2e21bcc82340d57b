"""Repeated stratified hold-out evaluation (per-run reports plus their mean)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from upfwatch.metrics import ClassifierReport, classification_report
from upfwatch.ml.data import Dataset, stratified_split
from upfwatch.ml.models import ModelSpec, TrainedModel, fit


@dataclass(frozen=True)
class EvalProtocol:
    runs: int = 10
    test_fraction: float = 0.2
    stratified: bool = True
    base_seed: int = 0

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in (0, 1)")


@dataclass
class RunOutcome:
    seed: int
    report: ClassifierReport
    test_rows: np.ndarray
    proba: np.ndarray


@dataclass
class EvalResult:
    spec: ModelSpec
    runs: list[RunOutcome]
    mean: ClassifierReport
    last_model: Optional[TrainedModel] = field(default=None, repr=False)

    @property
    def accuracies(self) -> list[float]:
        return [r.report.accuracy for r in self.runs]

    @property
    def spread(self) -> float:
        acc = self.accuracies
        return max(acc) - min(acc)


def evaluate(spec: ModelSpec, data: Dataset, protocol: EvalProtocol = EvalProtocol()) -> EvalResult:
    """Run ``protocol.runs`` split/fit/score rounds.

    Run ``i`` splits with seed ``base_seed + i`` and fits with
    ``spec.seed + i`` so ensembles vary between runs like the splits do.
    """
    classes = list(range(len(data.class_names)))
    outcomes = []
    model = None
    for i in range(protocol.runs):
        seed = protocol.base_seed + i
        train_rows, test_rows = stratified_split(data.labels, protocol.test_fraction, seed, protocol.stratified)
        run_spec = ModelSpec(spec.kind, spec.params, spec.seed + i)
        model = fit(run_spec, data.subset(train_rows))
        proba = model.predict_proba(data.features[test_rows])
        predicted = np.argmax(proba, axis=1)
        _, report = classification_report(data.labels[test_rows].tolist(), predicted.tolist(), classes)
        outcomes.append(RunOutcome(seed, report, test_rows, proba))
    return EvalResult(spec, outcomes, ClassifierReport.mean([o.report for o in outcomes]), model)
