"""Dice similarity and backward transfer over the task stream.

The ledger is the lower-triangular T x T matrix R with R[t][j] = test
Dice (%) on task j after training through task t. Backward transfer uses
the additive retention form

    BWT = 100 + mean_{j<T} (R[T][j] - R[j][j])

so a stream with no degradation scores exactly 100. A ratio form
(100 * mean(final/diagonal)) is available behind a flag for sensitivity
checks.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import ParameterError, ShapeError


def dsc(pred: np.ndarray, target: np.ndarray) -> float:
    """Dice similarity coefficient in percent.

    Two empty masks agree perfectly (100); empty vs nonempty is 0.
    """
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise ShapeError(f"mask shapes disagree: {pred.shape} vs {target.shape}")
    p = int(pred.sum())
    t = int(target.sum())
    if p + t == 0:
        return 100.0
    inter = int((pred & target).sum())
    return 100.0 * 2.0 * inter / (p + t)


class MetricsLedger:
    """Lower-triangular accuracy matrix over the stream."""

    def __init__(self, task_names: list[str]):
        if not task_names:
            raise ParameterError("ledger needs at least one task")
        self.task_names = list(task_names)
        self.T = len(task_names)
        self.R = np.full((self.T, self.T), np.nan)

    def set(self, after_task: int, on_task: int, value: float) -> None:
        """Record DSC (%) on `on_task` after training `after_task` (1-based)."""
        if not (1 <= on_task <= after_task <= self.T):
            raise ParameterError(
                f"ledger entry ({after_task}, {on_task}) outside the lower triangle")
        if not (0.0 <= value <= 100.0):
            raise ParameterError(f"DSC must lie in [0, 100], got {value}")
        self.R[after_task - 1, on_task - 1] = value

    def final_row(self) -> np.ndarray:
        return self.R[self.T - 1, :]

    def diagonal(self) -> np.ndarray:
        return np.diagonal(self.R)

    def average_dsc(self) -> float:
        row = self.final_row()
        if np.isnan(row).any():
            raise ParameterError("final ledger row is not fully populated")
        return float(row.mean())

    def to_dict(self) -> dict:
        return {"task_names": self.task_names,
                "R": [[None if np.isnan(v) else float(v) for v in row]
                      for row in self.R]}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsLedger":
        led = cls(d["task_names"])
        for i, row in enumerate(d["R"]):
            for j, v in enumerate(row):
                if v is not None:
                    led.R[i, j] = float(v)
        return led


def bwt(ledger: MetricsLedger, form: str = "additive") -> float:
    """Backward transfer (%) from the diagonal and the final row."""
    if ledger.T < 2:
        raise ParameterError("BWT is undefined for fewer than two tasks")
    if form not in ("additive", "ratio"):
        raise ParameterError(f"unknown BWT form {form!r}")
    final = ledger.final_row()[: ledger.T - 1]
    diag = ledger.diagonal()[: ledger.T - 1]
    if np.isnan(final).any() or np.isnan(diag).any():
        raise ParameterError("ledger diagonal/final row not fully populated")
    if form == "additive":
        return 100.0 + float(np.mean(final - diag))
    safe = np.where(diag == 0.0, 1.0, diag)
    ratios = np.where(diag == 0.0, 1.0, final / safe)
    return 100.0 * float(np.mean(ratios))


def write_report(ledger: MetricsLedger, out_dir, run_id: str,
                 bwt_form: str = "additive") -> dict[str, str]:
    """Emit the CSV summary and the JSON matrix; returns the file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{run_id}_report.csv"
    json_path = out / f"{run_id}_ledger.json"
    final = ledger.final_row()
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ledger.task_names + ["Average", "BWT"])
        row = [f"{v:.4f}" for v in final]
        row.append(f"{ledger.average_dsc():.4f}")
        row.append(f"{bwt(ledger, bwt_form):.4f}" if ledger.T >= 2 else "")
        writer.writerow(row)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(ledger.to_dict(), fh, indent=1)
        fh.write("\n")
    return {"csv": str(csv_path), "json": str(json_path)}
