"""Published reference values for the fairness-metric arithmetic.

These are the printed per-group average DSC tables from the cardiac-MR
segmentation bias study this framework reproduces at desk scale. The
recomputation helpers regression-check our metric implementations against
the printed Avg / SD / SER columns (rounding slack 0.02, since printed
cells were rounded before the summary columns were derived from the
unrounded values).
"""

from __future__ import annotations

from dataclasses import dataclass

from .metrics import fairness_sd, fairness_ser, subject_average_dsc, unweighted_group_avg

TABLE1_CELL_LABELS = ("ED LVBP", "ED LVM", "ED RVBP", "ES LVBP", "ES LVM", "ES RVBP")

# Per-row: six class/phase mean DSC values (percent) and the printed Avg.
TABLE1_ROWS: dict[str, tuple] = {
    "Total": ((93.48, 83.12, 89.37, 89.37, 86.31, 80.61), 87.05),
    "Male": ((93.58, 83.51, 88.82, 90.68, 85.31, 81.00), 87.02),
    "Female": ((93.39, 82.71, 89.90, 89.59, 86.60, 80.21), 87.07),
    "White": ((97.33, 93.08, 94.09, 95.06, 90.58, 90.88), 93.51),
    "Mixed": ((92.70, 78.94, 86.91, 86.70, 82.54, 79.32), 84.52),
    "Asian": ((94.53, 87.33, 90.51, 90.13, 88.94, 81.94), 88.90),
    "Black": ((92.77, 85.93, 89.49, 89.42, 85.74, 71.91), 85.88),
    "Chinese": ((91.81, 74.51, 85.74, 86.39, 85.12, 79.34), 83.82),
    "Others": ((91.74, 78.94, 89.50, 88.53, 84.96, 80.27), 85.66),
}

# Rows whose printed Avg is reproducible from the printed cells within the
# rounding slack; the Male row is known to disagree (87.15 recomputed vs
# 87.02 printed) and is reported but not asserted.
TABLE1_CONSISTENT_ROWS = ("Total", "Female", "White", "Mixed", "Asian", "Black", "Chinese", "Others")

TABLE2_GROUP_LABELS = ("White", "Mixed", "Asian", "Black", "Chinese", "Others")

# Per-row: six per-group average DSC values (percent) and the printed
# (Avg, SD, SER) summary columns.
TABLE2_ROWS: dict[str, tuple] = {
    "baseline": ((93.51, 84.52, 88.90, 85.88, 87.63, 85.66), (87.68, 3.25, 2.38)),
    "stratified": ((90.88, 93.84, 93.65, 93.07, 94.35, 93.50), (93.22, 1.22, 1.62)),
    "meta": ((92.75, 88.03, 90.64, 89.60, 88.18, 88.27), (89.58, 1.86, 1.65)),
    "protected": ((91.03, 93.17, 93.34, 92.15, 93.04, 93.08), (92.64, 0.89, 1.35)),
    "balanced": ((79.32, 80.98, 80.37, 79.78, 80.82, 80.72), (80.33, 0.65, 1.09)),
}

ROUNDING_SLACK = 0.02


def recompute_table2_summary(group_values) -> tuple[float, float, float]:
    """(Avg, SD, SER) from six per-group average DSC values in percent."""
    avg = unweighted_group_avg(group_values)
    sd = fairness_sd(group_values)
    ser = fairness_ser([v / 100.0 for v in group_values])
    return avg, sd, ser


@dataclass
class CheckLine:
    name: str
    recomputed: float
    printed: float
    tolerance: float
    asserted: bool

    @property
    def ok(self) -> bool:
        return abs(self.recomputed - self.printed) <= self.tolerance

    def render(self) -> str:
        status = "OK" if self.ok else "MISMATCH"
        note = "" if self.asserted else " (informational)"
        return (
            f"{status:8s} {self.name}: recomputed {self.recomputed:.3f} "
            f"vs printed {self.printed:.2f} (tol {self.tolerance}){note}"
        )


def verify_published_arithmetic(tolerance: float = ROUNDING_SLACK) -> list[CheckLine]:
    """Recompute every summary column from the printed cells.

    Table 2 rows and the internally consistent Table 1 rows are asserted;
    the known-discrepant Male row is reported as informational.
    """
    lines = []
    for label, (cells, printed_avg) in TABLE1_ROWS.items():
        lines.append(
            CheckLine(
                name=f"table1 {label} Avg",
                recomputed=subject_average_dsc(cells),
                printed=printed_avg,
                tolerance=tolerance,
                asserted=label in TABLE1_CONSISTENT_ROWS,
            )
        )
    for label, (values, (avg, sd, ser)) in TABLE2_ROWS.items():
        r_avg, r_sd, r_ser = recompute_table2_summary(values)
        lines.append(CheckLine(f"table2 {label} Avg", r_avg, avg, tolerance, True))
        lines.append(CheckLine(f"table2 {label} SD", r_sd, sd, tolerance, True))
        lines.append(CheckLine(f"table2 {label} SER", r_ser, ser, tolerance, True))
    return lines
