"""Dice scoring, patient-wise folds, and pathology statistics.

The significance pipeline runs a Welch two-sample t-test per
(pathology, structure) pair and corrects the whole family with the
Benjamini-Hochberg step-up procedure at a single alpha.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as scipy_stats

from .data import (
    DISC_DEGENERATION,
    PATHOLOGY_COLUMNS,
    PFIRRMANN_CUTOFF,
    STRUCTURES,
    PatientRecord,
)

FOLD_COUNT = 5
ALPHA = 0.05
PATHOLOGIES_TESTED = PATHOLOGY_COLUMNS + (DISC_DEGENERATION,)


class EvaluationError(ValueError):
    """Raised on malformed scores, degenerate groups, or bad splits."""


# ---------------------------------------------------------------------------
# Dice


def dice_score(pred_labels: np.ndarray, true_labels: np.ndarray, class_id: int) -> float:
    """2|A n B| / (|A| + |B|) for one class; 1.0 when both sides are empty."""

    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise EvaluationError(f"shape mismatch: {pred.shape} vs {true.shape}")
    a = pred == class_id
    b = true == class_id
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldSplit:
    """Patient-wise partition into k folds.

    Oblique patients belong to exactly one fold for bookkeeping but are
    never part of any validation set; they train in every split.
    """

    folds: tuple[frozenset[str], ...]
    oblique: frozenset[str]
    seed: int

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for fold in self.folds:
            if seen & fold:
                raise EvaluationError("folds overlap")
            seen |= fold
        if not self.oblique <= seen:
            raise EvaluationError("oblique ids missing from the partition")
        for i, fold in enumerate(self.folds):
            if not fold - self.oblique:
                raise EvaluationError(f"fold {i} has no eligible validation patient")

    @property
    def k(self) -> int:
        return len(self.folds)

    @property
    def patients(self) -> frozenset[str]:
        return frozenset().union(*self.folds)

    def validation(self, fold: int) -> set[str]:
        return set(self.folds[fold]) - self.oblique

    def training(self, fold: int) -> set[str]:
        return set(self.patients) - self.validation(fold)


def make_folds(records: list[PatientRecord], k: int = FOLD_COUNT, seed: int = 42) -> FoldSplit:
    """Deterministic patient-wise split; both scans of a patient share a fold."""

    if k <= 0:
        raise EvaluationError("k must be positive")
    ids = sorted({r.patient_id for r in records})
    if len(ids) != len(records):
        raise EvaluationError("duplicate patient ids in the roster")
    oblique = frozenset(r.patient_id for r in records if r.oblique)
    eligible = [pid for pid in ids if pid not in oblique]
    if len(eligible) < k:
        raise EvaluationError(
            f"need at least {k} non-oblique patients, found {len(eligible)}"
        )
    rng = np.random.default_rng(seed)
    eligible = [eligible[i] for i in rng.permutation(len(eligible))]
    extras = [pid for pid in ids if pid in oblique]
    extras = [extras[i] for i in rng.permutation(len(extras))]
    folds: list[set[str]] = [set() for _ in range(k)]
    for i, pid in enumerate(eligible + extras):
        folds[i % k].add(pid)
    return FoldSplit(
        folds=tuple(frozenset(f) for f in folds), oblique=oblique, seed=seed
    )


# ---------------------------------------------------------------------------
# hypothesis testing


def welch_t_test(group_a, group_b) -> tuple[float, float]:
    """Two-sided Welch t-test: hand-computed t and df, Student-t tail for p."""

    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise EvaluationError("each group needs at least 2 observations")
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    if va == 0 or vb == 0:
        raise EvaluationError("a group has zero variance")
    sa = va / a.size
    sb = vb / b.size
    t = (a.mean() - b.mean()) / math.sqrt(sa + sb)
    # Welch-Satterthwaite effective degrees of freedom
    df = (sa + sb) ** 2 / (sa**2 / (a.size - 1) + sb**2 / (b.size - 1))
    p = 2.0 * float(scipy_stats.t.sf(abs(t), df))
    return float(t), min(1.0, p)


def benjamini_hochberg(p_values, alpha: float = ALPHA) -> list[bool]:
    """Step-up FDR control: flag the k smallest p with p_(k) <= k*alpha/m."""

    p = np.asarray(list(p_values), dtype=np.float64)
    if p.size == 0:
        return []
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise EvaluationError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order]
    thresholds = alpha * (np.arange(1, m + 1) / m)
    passing = np.nonzero(ranked <= thresholds)[0]
    flags = np.zeros(m, dtype=bool)
    if passing.size:
        k = passing[-1]
        flags[order[: k + 1]] = True
    return flags.tolist()


@dataclass(frozen=True)
class StatTestResult:
    pathology: str
    structure: str
    n_with: int
    n_without: int
    t: float
    p: float
    significant: bool


def pool_by_patient(
    scores: list[tuple[str, str, str, float]]
) -> dict[str, dict[str, float]]:
    """Average ``(patient, modality, structure, dice)`` rows per patient.

    A patient scanned in both modalities contributes one pooled Dice per
    structure to the statistics.
    """

    acc: dict[str, dict[str, list[float]]] = {}
    for patient, _modality, structure, value in scores:
        if structure not in STRUCTURES:
            raise EvaluationError(f"unknown structure '{structure}'")
        acc.setdefault(patient, {}).setdefault(structure, []).append(float(value))
    return {
        patient: {s: float(np.mean(vals)) for s, vals in per.items()}
        for patient, per in acc.items()
    }


def pathology_analysis(
    dice_by_patient: dict[str, dict[str, float]],
    records: list[PatientRecord],
    alpha: float = ALPHA,
    cutoff: int = PFIRRMANN_CUTOFF,
    pathologies: tuple[str, ...] = PATHOLOGIES_TESTED,
) -> tuple[list[StatTestResult], list[str]]:
    """Welch test per (pathology, structure), BH-corrected across the family.

    Returns the results plus a log of skipped pairs (group smaller than 2).
    """

    by_id = {r.patient_id: r for r in records}
    missing = sorted(set(dice_by_patient) - set(by_id))
    if missing:
        raise EvaluationError(f"scored patients without records: {missing}")

    pending: list[tuple[str, str, list[float], list[float]]] = []
    skipped: list[str] = []
    for pathology in pathologies:
        for structure in STRUCTURES:
            with_flag: list[float] = []
            without_flag: list[float] = []
            for patient, per_structure in dice_by_patient.items():
                if structure not in per_structure:
                    continue
                value = per_structure[structure]
                if by_id[patient].has_pathology(pathology, cutoff=cutoff):
                    with_flag.append(value)
                else:
                    without_flag.append(value)
            if len(with_flag) < 2 or len(without_flag) < 2:
                skipped.append(
                    f"{pathology}/{structure}: group sizes "
                    f"{len(with_flag)}/{len(without_flag)} too small"
                )
                continue
            pending.append((pathology, structure, with_flag, without_flag))

    raw: list[tuple[str, str, int, int, float, float]] = []
    for pathology, structure, with_flag, without_flag in pending:
        try:
            t, p = welch_t_test(with_flag, without_flag)
        except EvaluationError as exc:
            skipped.append(f"{pathology}/{structure}: {exc}")
            continue
        raw.append((pathology, structure, len(with_flag), len(without_flag), t, p))

    flags = benjamini_hochberg([row[5] for row in raw], alpha=alpha)
    results = [
        StatTestResult(
            pathology=row[0],
            structure=row[1],
            n_with=row[2],
            n_without=row[3],
            t=row[4],
            p=row[5],
            significant=flag,
        )
        for row, flag in zip(raw, flags)
    ]
    return results, skipped


def write_stats_csv(path: str | Path, results: list[StatTestResult]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["pathology", "structure", "n_with", "n_without", "t", "p_raw", "significant"]
        )
        for r in results:
            writer.writerow(
                [r.pathology, r.structure, r.n_with, r.n_without,
                 f"{r.t:.6g}", f"{r.p:.6g}", int(r.significant)]
            )
    return path


def plot_pathology_boxplots(
    dice_by_patient: dict[str, dict[str, float]],
    records: list[PatientRecord],
    out_dir: str | Path,
    cutoff: int = PFIRRMANN_CUTOFF,
    pathologies: tuple[str, ...] = PATHOLOGIES_TESTED,
) -> list[Path]:
    """One box-plot figure per pathology: Dice with vs without, per structure."""

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {r.patient_id: r for r in records}
    paths: list[Path] = []
    for pathology in pathologies:
        groups = []
        labels = []
        for structure in STRUCTURES:
            with_flag = []
            without_flag = []
            for patient, per in dice_by_patient.items():
                if structure not in per or patient not in by_id:
                    continue
                if by_id[patient].has_pathology(pathology, cutoff=cutoff):
                    with_flag.append(per[structure])
                else:
                    without_flag.append(per[structure])
            groups.extend([without_flag or [np.nan], with_flag or [np.nan]])
            labels.extend([f"{structure}\nno", f"{structure}\nyes"])
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.boxplot(groups, tick_labels=labels)
        ax.set_ylabel("Dice")
        ax.set_title(pathology.replace("_", " "))
        ax.set_ylim(0.0, 1.05)
        fig.tight_layout()
        path = out_dir / f"boxplot_{pathology}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# summary tables


@dataclass
class MetricsRecord:
    """Per (model, modality, structure) Dice scores over patients."""

    model: str
    modality: str
    structure: str
    scores: list[float]

    def __post_init__(self) -> None:
        if self.structure not in STRUCTURES:
            raise EvaluationError(f"unknown structure '{self.structure}'")
        if not self.scores:
            raise EvaluationError("empty score list")
        arr = np.asarray(self.scores, dtype=np.float64)
        if np.any((arr < 0) | (arr > 1)):
            raise EvaluationError("Dice scores must lie in [0, 1]")

    def mean(self) -> float:
        return float(np.mean(self.scores))

    def std(self) -> float:
        arr = np.asarray(self.scores, dtype=np.float64)
        return float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def mdice(structure_means) -> float:
    """Mean of the per-structure mean Dice values."""

    values = list(structure_means)
    if not values:
        raise EvaluationError("mdice needs at least one structure mean")
    return float(np.mean(values))


def modality_comparison(records: list[MetricsRecord]) -> list[dict]:
    """Fold MetricsRecords into one summary row per (model, modality)."""

    cells: dict[tuple[str, str], dict[str, MetricsRecord]] = {}
    for record in records:
        cell = cells.setdefault((record.model, record.modality), {})
        if record.structure in cell:
            raise EvaluationError(
                f"duplicate cell {record.model}/{record.modality}/{record.structure}"
            )
        cell[record.structure] = record
    rows = []
    for (model, modality), cell in sorted(cells.items()):
        missing = [s for s in STRUCTURES if s not in cell]
        if missing:
            raise EvaluationError(
                f"cell {model}/{modality} is missing structures: {missing}"
            )
        row: dict = {"model": model, "modality": modality}
        means = []
        for structure in STRUCTURES:
            record = cell[structure]
            row[f"{structure}_mean"] = record.mean()
            row[f"{structure}_std"] = record.std()
            means.append(record.mean())
        row["mdice"] = mdice(means)
        rows.append(row)
    return rows


def write_table_csv(path: str | Path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["model", "modality"]
    for structure in STRUCTURES:
        fields.extend([f"{structure}_mean", f"{structure}_std"])
    fields.append("mdice")
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})
    return path


METRICS_FIELDS = ("model", "arm", "patient_id", "modality", "structure", "dice")


def write_metrics_csv(path: str | Path, rows: list[dict]) -> Path:
    """Raw per-scan scores, one row per (scan, structure)."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(METRICS_FIELDS))
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out["dice"] = f"{float(row['dice']):.6f}"
            writer.writerow(out)
    return path


def read_metrics_csv(path: str | Path) -> list[dict]:
    path = Path(path)
    rows: list[dict] = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(METRICS_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise EvaluationError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            row["dice"] = float(row["dice"])
            rows.append(row)
    return rows


def records_from_metrics(rows: list[dict]) -> list[MetricsRecord]:
    """Group metric rows into per-(model, arm, structure) records.

    A patient's scans within one cell are pooled (averaged) first, so
    each patient contributes one score.
    """

    pooled: dict[tuple[str, str, str], dict[str, list[float]]] = {}
    for row in rows:
        cell = pooled.setdefault((row["model"], row["arm"], row["structure"]), {})
        cell.setdefault(row["patient_id"], []).append(float(row["dice"]))
    return [
        MetricsRecord(
            model=model,
            modality=arm,
            structure=structure,
            scores=[float(np.mean(v)) for _, v in sorted(per_patient.items())],
        )
        for (model, arm, structure), per_patient in sorted(pooled.items())
    ]
