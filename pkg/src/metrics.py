# src/metrics.py

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from src.errors import InputError

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["epoch", "slice_case", "eta", "loss", "accuracy", "f1_macro", "auroc", "seconds"]
HASH_PREFIX = "# config_hash="


def _aligned(preds: np.ndarray, labels: np.ndarray) -> None:
    if preds.shape[0] == 0:
        raise InputError("metrics need at least one prediction")
    if preds.shape != labels.shape:
        raise InputError(f"predictions {preds.shape} and labels {labels.shape} are not aligned")


def accuracy(preds: Sequence, labels: Sequence) -> float:
    """Top-1 accuracy; for 2-D bit matrices, exact-match (subset) accuracy."""
    p, y = np.asarray(preds), np.asarray(labels)
    _aligned(p, y)
    if p.ndim == 2:
        return float(np.mean(np.all(p == y, axis=1)))
    return float(np.mean(p == y))


def _f1_from_counts(tp: np.ndarray, fp: np.ndarray, fn: np.ndarray) -> np.ndarray:
    denom = 2 * tp + fp + fn
    # A class nobody predicted and nobody has scores 0.
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def f1_macro(preds: Sequence[int], labels: Sequence[int], n_classes: int) -> float:
    """Unweighted mean of per-class F1 over all ``n_classes`` classes."""
    p, y = np.asarray(preds, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    _aligned(p, y)
    if p.min() < 0 or y.min() < 0 or p.max() >= n_classes or y.max() >= n_classes:
        raise InputError(f"class ids must lie in [0, {n_classes})")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y, p), 1)
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    return float(_f1_from_counts(tp, fp, fn).mean())


def f1_macro_multilabel(pred_bits: np.ndarray, label_bits: np.ndarray) -> float:
    """Mean over label bits of the F1 of the positive value."""
    p, y = np.asarray(pred_bits, dtype=bool), np.asarray(label_bits, dtype=bool)
    _aligned(p, y)
    tp = np.sum(p & y, axis=0).astype(np.float64)
    fp = np.sum(p & ~y, axis=0).astype(np.float64)
    fn = np.sum(~p & y, axis=0).astype(np.float64)
    return float(_f1_from_counts(tp, fp, fn).mean())


def auroc(scores: Sequence[float], binary_labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC; tied scores share their mid-rank."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(binary_labels)
    _aligned(s, y)
    positives = y == 1
    n_pos = int(positives.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise InputError("auroc needs both classes among the labels")
    ranks = rankdata(s, method="average")
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class EvalRow:
    epoch: int
    slice_case: str
    eta: float
    loss: float
    accuracy: float
    f1_macro: float
    auroc: Optional[float]
    seconds: float


@dataclass
class MetricsReport:
    """Per-epoch, per-slice evaluation results of one training run."""
    rows: List[EvalRow] = field(default_factory=list)
    trainable_params: int = 0
    total_params: int = 0

    def add(self, row: EvalRow) -> None:
        for name in ("accuracy", "f1_macro", "auroc"):
            value = getattr(row, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise InputError(f"{name} {value} outside [0, 1] for {row.slice_case} at epoch {row.epoch}")
        self.rows.append(row)

    def last_epoch(self) -> List[EvalRow]:
        if not self.rows:
            return []
        final = max(r.epoch for r in self.rows)
        return [r for r in self.rows if r.epoch == final]

    def find(self, epoch: int, slice_case: str) -> EvalRow:
        for row in self.rows:
            if row.epoch == epoch and row.slice_case == slice_case:
                return row
        raise KeyError(f"no row for epoch {epoch}, slice {slice_case}")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows], columns=REPORT_COLUMNS)

    def to_csv(self, path: str | Path, config_hash: str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"{HASH_PREFIX}{config_hash}\n")
            self.to_frame().to_csv(f, index=False, float_format="%.10g", lineterminator="\n")
        logger.debug(f"Metrics report with {len(self.rows)} rows written to '{path}'.")

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricsReport":
        frame = pd.read_csv(path, comment="#")
        if list(frame.columns) != REPORT_COLUMNS:
            raise InputError(f"'{path}' header {list(frame.columns)} does not match {REPORT_COLUMNS}")
        report = cls()
        for rec in frame.to_dict(orient="records"):
            auroc_value = rec["auroc"]
            report.rows.append(EvalRow(
                epoch=int(rec["epoch"]),
                slice_case=str(rec["slice_case"]),
                eta=float(rec["eta"]),
                loss=float(rec["loss"]),
                accuracy=float(rec["accuracy"]),
                f1_macro=float(rec["f1_macro"]),
                auroc=None if pd.isna(auroc_value) else float(auroc_value),
                seconds=float(rec["seconds"]),
            ))
        return report


def read_config_hash(path: str | Path) -> str:
    with open(path, encoding="utf-8") as f:
        first = f.readline().rstrip("\n")
    if not first.startswith(HASH_PREFIX):
        raise InputError(f"'{path}' does not start with a '{HASH_PREFIX}' line")
    return first[len(HASH_PREFIX):]
