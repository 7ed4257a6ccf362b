"""Segmentation overlap and group-fairness metrics.

DSC is the usual 2|A n B| / (|A| + |B|) overlap; fairness of a model is
summarized by the sample standard deviation (SD) of the per-group average
DSC values and by the skewed error ratio

    SER = max_g(1 - DSC_g) / min_g(1 - DSC_g),

both computed over protected groups. Group significance mirrors the
asterisk convention of the reference tables: a group is flagged when an
unpaired t-test between the full test population and that group rejects
at the chosen alpha.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateStatisticsError
from .phantom import FOREGROUND_CLASSES, PHASES
from .stats import welch_ttest

N_SEG_CLASSES = 4


def dice(pred_mask, gt_mask, class_id: int) -> float:
    """DSC for one class; both-empty convention returns 1.0."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not 0 <= class_id < N_SEG_CLASSES:
        raise ContractError(f"class id {class_id} outside 0..{N_SEG_CLASSES - 1}")
    a = pred == class_id
    b = gt == class_id
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def subject_average_dsc(values) -> float:
    """Mean of the six (3 classes x 2 phases) DSC values of a table row."""
    vals = [float(v) for v in values]
    if len(vals) != 6:
        raise ContractError(f"expected 6 class/phase DSC values, got {len(vals)}")
    if any(math.isnan(v) for v in vals):
        raise ContractError("missing class/phase DSC entry")
    return sum(vals) / 6.0


def unweighted_group_avg(group_averages) -> float:
    vals = [float(v) for v in group_averages]
    if not vals:
        raise ContractError("no group averages given")
    return sum(vals) / len(vals)


def fairness_sd(group_averages) -> float:
    """Sample standard deviation (n-1 denominator) of group averages."""
    vals = np.asarray(list(group_averages), dtype=np.float64)
    if vals.size < 2:
        raise ContractError("fairness SD needs at least 2 groups")
    return float(vals.std(ddof=1))


def fairness_ser(group_averages) -> float:
    """Skewed error ratio over group averages given as fractions in [0, 1]."""
    vals = [float(v) for v in group_averages]
    if len(vals) < 2:
        raise ContractError("SER needs at least 2 groups")
    errors = [1.0 - v for v in vals]
    if min(errors) <= 0.0:
        raise DegenerateStatisticsError(
            "perfect-group degenerate case: a group has DSC = 1, SER undefined"
        )
    return max(errors) / min(errors)


@dataclass
class ClassifierMetrics:
    accuracy: float
    precision: list  # per group; None when the group was never predicted
    recall: list  # per group; None when the group has no true members
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "confusion": self.confusion.tolist(),
        }


def classifier_metrics(pred_groups, true_groups, n_groups: int | None = None) -> ClassifierMetrics:
    pred = np.asarray(pred_groups, dtype=np.int64)
    true = np.asarray(true_groups, dtype=np.int64)
    if pred.shape != true.shape:
        raise ContractError("prediction and label arrays differ in length")
    if pred.size == 0:
        raise ContractError("empty prediction array")
    if n_groups is None:
        n_groups = int(max(pred.max(), true.max())) + 1
    if pred.min() < 0 or true.min() < 0 or pred.max() >= n_groups or true.max() >= n_groups:
        raise ContractError(f"labels outside 0..{n_groups - 1}")

    confusion = np.zeros((n_groups, n_groups), dtype=np.int64)
    for t, p in zip(true, pred):
        confusion[t, p] += 1
    accuracy = float(np.trace(confusion)) / pred.size
    precision = []
    recall = []
    for g in range(n_groups):
        n_pred = int(confusion[:, g].sum())
        n_true = int(confusion[g, :].sum())
        precision.append(float(confusion[g, g]) / n_pred if n_pred else None)
        recall.append(float(confusion[g, g]) / n_true if n_true else None)
    return ClassifierMetrics(accuracy, precision, recall, confusion)


@dataclass
class GroupDiceTable:
    """Per-group DSC aggregates over an evaluated split.

    class_phase_mean[g, c, p] is the mean DSC (percent) of foreground
    class c (0=LVBP, 1=LVM, 2=RVBP) at phase p (0=ED, 1=ES) over the
    group's subjects imaged at that phase; NaN marks empty cells.
    subject_avgs[g] holds each subject's average DSC (percent) across the
    three classes of its own phase.
    """

    class_phase_mean: np.ndarray  # (G, 3, 2), percent
    subject_avgs: list  # list of np.ndarray per group, percent
    subject_ids: list  # parallel list of sample-id lists
    counts: list  # subjects per group

    @property
    def n_groups(self) -> int:
        return len(self.counts)

    def group_averages(self) -> np.ndarray:
        """Mean per-subject average DSC per group, in percent."""
        return np.array(
            [float(np.mean(v)) if len(v) else math.nan for v in self.subject_avgs]
        )

    def all_subject_avgs(self) -> np.ndarray:
        if not any(len(v) for v in self.subject_avgs):
            return np.array([])
        return np.concatenate([v for v in self.subject_avgs if len(v)])


def build_group_dice_table(entries, n_groups: int) -> GroupDiceTable:
    """Aggregate per-subject evaluations into a GroupDiceTable.

    `entries` is an iterable of (sample_id, group, phase, dices) where
    dices holds the three foreground-class DSC fractions for the subject.
    """
    sums = np.zeros((n_groups, len(FOREGROUND_CLASSES), len(PHASES)))
    nums = np.zeros_like(sums)
    subject_avgs = [[] for _ in range(n_groups)]
    subject_ids = [[] for _ in range(n_groups)]
    for sample_id, group, phase, dices in entries:
        p = PHASES.index(phase)
        for c, d in enumerate(dices):
            sums[group, c, p] += d
            nums[group, c, p] += 1
        subject_avgs[group].append(100.0 * float(np.mean(dices)))
        subject_ids[group].append(sample_id)
    with np.errstate(invalid="ignore"):
        mean = np.where(nums > 0, 100.0 * sums / np.maximum(nums, 1), math.nan)
    return GroupDiceTable(
        class_phase_mean=mean,
        subject_avgs=[np.array(v) for v in subject_avgs],
        subject_ids=subject_ids,
        counts=[len(v) for v in subject_avgs],
    )


def significance_flags(full_sample, group_samples, alpha: float = 0.01):
    """Welch-test each group's per-subject averages against the full set."""
    flags = []
    pvalues = []
    full = np.asarray(full_sample, dtype=np.float64)
    for sample in group_samples:
        sample = np.asarray(sample, dtype=np.float64)
        if sample.size < 2 or full.size < 2:
            flags.append(False)
            pvalues.append(math.nan)
            continue
        res = welch_ttest(full, sample)
        flags.append(bool(res.pvalue < alpha))
        pvalues.append(res.pvalue)
    return flags, pvalues


@dataclass
class FairnessSummary:
    group_averages: list  # percent
    average: float  # unweighted mean over groups, percent
    sd: float
    ser: float  # math.inf on the perfect-group degenerate case
    significant: list
    pvalues: list
    alpha: float
    counts: list
    ser_degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "group_averages": [round(v, 6) if not math.isnan(v) else None for v in self.group_averages],
            "average": round(self.average, 6),
            "sd": round(self.sd, 6),
            "ser": None if math.isinf(self.ser) else round(self.ser, 6),
            "ser_degenerate": self.ser_degenerate,
            "significant": list(self.significant),
            "pvalues": [None if math.isnan(p) else round(p, 10) for p in self.pvalues],
            "alpha": self.alpha,
            "counts": list(self.counts),
        }


def summarize_fairness(table: GroupDiceTable, alpha: float = 0.01) -> FairnessSummary:
    group_avgs = table.group_averages()
    valid = [float(v) for v in group_avgs if not math.isnan(v)]
    if len(valid) < 2:
        raise ContractError("fairness summary needs at least 2 populated groups")
    avg = unweighted_group_avg(valid)
    sd = fairness_sd(valid)
    try:
        ser = fairness_ser([v / 100.0 for v in valid])
        degenerate = False
    except DegenerateStatisticsError:
        ser = math.inf
        degenerate = True
    flags, pvalues = significance_flags(table.all_subject_avgs(), table.subject_avgs, alpha)
    return FairnessSummary(
        group_averages=[float(v) for v in group_avgs],
        average=avg,
        sd=sd,
        ser=ser,
        significant=flags,
        pvalues=pvalues,
        alpha=alpha,
        counts=list(table.counts),
        ser_degenerate=degenerate,
    )
