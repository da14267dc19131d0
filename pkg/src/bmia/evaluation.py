"""ROC curves, TPR at fixed FPR, AUC, and report files."""
from __future__ import annotations

import csv
import dataclasses
from pathlib import Path

import numpy as np

REPORT_HEADER = ("attack", "tpr_at_0.1pct", "tpr_at_1pct", "tpr_at_5pct", "auc",
                 "train_seconds", "attack_seconds")
REPORT_FPRS = (0.001, 0.01, 0.05)


@dataclasses.dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_curve(statistics, is_member) -> RocCurve:
    """ROC from sweeping a threshold down through the unique statistic values.

    A query is called a member when its statistic is at or above the threshold,
    so equal statistics always switch together. The curve starts at (0, 0) and
    ends at (1, 1).
    """
    stats = np.asarray(statistics, dtype=np.float64)
    members = np.asarray(is_member, dtype=bool)
    if stats.shape != members.shape or stats.ndim != 1:
        raise ValueError("statistics and is_member must be 1-D arrays of equal length")
    if np.isnan(stats).any():
        raise ValueError("statistics contain NaN")
    n_pos = int(members.sum())
    n_neg = members.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both members and non-members")
    order = np.argsort(-stats, kind="stable")
    s = stats[order]
    m = members[order]
    tp = np.cumsum(m)
    fp = np.cumsum(~m)
    # Last position of each run of equal statistics.
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    fpr = np.r_[0.0, fp[ends] / n_neg]
    tpr = np.r_[0.0, tp[ends] / n_pos]
    return RocCurve(fpr, tpr)


def tpr_at_fpr(curve: RocCurve, alpha: float) -> float:
    """Highest TPR among operating points with FPR <= alpha (no interpolation)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    ok = curve.fpr <= alpha
    return float(curve.tpr[ok].max()) if ok.any() else 0.0


def auc(curve: RocCurve) -> float:
    return float(np.trapezoid(curve.tpr, curve.fpr))


@dataclasses.dataclass
class AttackReport:
    attack_name: str
    tpr_at: dict[float, float]
    auc: float
    n_members: int
    n_nonmembers: int
    wall_clock_train_seconds: float = 0.0
    wall_clock_attack_seconds: float = 0.0
    curve: RocCurve | None = dataclasses.field(default=None, repr=False)


def make_report(name: str, statistics, is_member, train_seconds: float = 0.0,
                attack_seconds: float = 0.0, fprs=REPORT_FPRS) -> AttackReport:
    curve = roc_curve(statistics, is_member)
    members = np.asarray(is_member, dtype=bool)
    return AttackReport(name, {a: tpr_at_fpr(curve, a) for a in fprs}, auc(curve),
                        int(members.sum()), int((~members).sum()),
                        train_seconds, attack_seconds, curve)


def write_report(reports: list[AttackReport], path, roc_path=None) -> None:
    """Write the summary CSV and, when ``roc_path`` is given, the ROC plot data."""
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in reports:
                w.writerow([r.attack_name]
                           + [f"{r.tpr_at.get(a, float('nan')):.6f}" for a in REPORT_FPRS]
                           + [f"{r.auc:.6f}", f"{r.wall_clock_train_seconds:.6f}",
                              f"{r.wall_clock_attack_seconds:.6f}"])
    except OSError as exc:
        raise OSError(f"could not write report {exc.filename or path}: {exc.strerror}") from exc
    if roc_path is not None:
        write_roc(reports, roc_path)


def write_roc(reports: list[AttackReport], path) -> None:
    """ROC plot data: ``attack,fpr,tpr`` rows at 9 decimals, one block per attack."""
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["attack", "fpr", "tpr"])
            for r in reports:
                if r.curve is None:
                    continue
                for x, y in r.curve.points:
                    w.writerow([r.attack_name, f"{x:.9f}", f"{y:.9f}"])
    except OSError as exc:
        raise OSError(f"could not write ROC data {exc.filename or path}: {exc.strerror}") from exc


def read_report(path) -> list[dict[str, float | str]]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != REPORT_HEADER:
            raise ValueError(f"unexpected report header {reader.fieldnames}")
        return [{k: (v if k == "attack" else float(v)) for k, v in row.items()} for row in reader]
