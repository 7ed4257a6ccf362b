"""Rendered outputs: CSV tables, markdown comparisons, and figures."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError, ContractError
from .metrics import FairnessSummary, GroupDiceTable
from .phantom import CLASS_NAMES, FOREGROUND_CLASSES, PHASES, DatasetManifest

TABLE_CELL_HEADERS = [f"{p}_{CLASS_NAMES[c]}" for p in PHASES for c in FOREGROUND_CLASSES]


def _fmt(v, digits=2) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.{digits}f}"


def table1_rows(
    total_table: GroupDiceTable,
    attr2_table: GroupDiceTable | None,
    group_table: GroupDiceTable,
    significant=None,
) -> list[dict]:
    """Row dicts for the per-group class/phase DSC table."""

    def row(label, table, g, starred):
        cells = {}
        for p_idx, p in enumerate(PHASES):
            for c_idx, c in enumerate(FOREGROUND_CLASSES):
                cells[f"{p}_{CLASS_NAMES[c]}"] = float(table.class_phase_mean[g, c_idx, p_idx])
        avg = float(np.mean(table.subject_avgs[g])) if len(table.subject_avgs[g]) else math.nan
        return {
            "row": label,
            "n": table.counts[g],
            **cells,
            "avg": avg,
            "significant": starred,
        }

    rows = [row("total", total_table, 0, None)]
    if attr2_table is not None:
        for g in range(attr2_table.n_groups):
            rows.append(row(f"attr2_{g}", attr2_table, g, None))
    for g in range(group_table.n_groups):
        starred = bool(significant[g]) if significant is not None else None
        rows.append(row(f"group_{g}", group_table, g, starred))
    return rows


def write_dsc_table_csv(path: Path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    headers = ["row", "n", *TABLE_CELL_HEADERS, "avg", "significant"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        for r in rows:
            writer.writerow(
                [
                    r["row"],
                    r["n"],
                    *[_fmt(r[h]) for h in TABLE_CELL_HEADERS],
                    _fmt(r["avg"]),
                    "" if r["significant"] is None else ("*" if r["significant"] else ""),
                ]
            )
    return path


def write_fairness_row_csv(path: Path, label: str, summary: FairnessSummary) -> Path:
    """Single comparison-table row: per-group Avg DSC plus Avg/SD/SER."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(summary.group_averages)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["approach", *[f"group_{g}" for g in range(n)], "avg", "sd", "ser"])
        writer.writerow(
            [
                label,
                *[_fmt(v) for v in summary.group_averages],
                _fmt(summary.average),
                _fmt(summary.sd),
                "inf" if math.isinf(summary.ser) else _fmt(summary.ser),
            ]
        )
    return path


@dataclass
class ComparisonTable:
    group_labels: list
    rows: list  # (label, group_averages, avg, sd, ser)

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["approach", *self.group_labels, "avg", "sd", "ser"])
            for label, avgs, avg, sd, ser in self.rows:
                writer.writerow([label, *[_fmt(v) for v in avgs], _fmt(avg), _fmt(sd), _fmt(ser)])
        return path

    def to_markdown(self) -> str:
        """Markdown rendering; the fairness columns (SD, SER) are bold."""
        head = ["approach", *self.group_labels, "Avg", "**SD**", "**SER**"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for label, avgs, avg, sd, ser in self.rows:
            cells = [label, *[_fmt(v) for v in avgs], _fmt(avg), f"**{_fmt(sd)}**", f"**{_fmt(ser)}**"]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def build_comparison(reports: list[dict]) -> ComparisonTable:
    """Comparison table from loaded report dicts (one row per run)."""
    if not reports:
        raise ConfigError("compare needs at least one report")
    n_groups = None
    rows = []
    for rep in reports:
        summary = rep["metrics"]["group"]
        avgs = summary["group_averages"]
        if n_groups is None:
            n_groups = len(avgs)
        elif len(avgs) != n_groups:
            raise ConfigError("reports disagree on the group set; cannot compare")
        ser = summary["ser"]
        rows.append(
            (
                rep.get("regime", "run"),
                [math.nan if v is None else float(v) for v in avgs],
                float(summary["average"]),
                float(summary["sd"]),
                math.inf if ser is None else float(ser),
            )
        )
    return ComparisonTable(group_labels=[f"group_{g}" for g in range(n_groups)], rows=rows)


# ---------------------------------------------------------------------------
# Figures


def render_distribution_plot(manifest: DatasetManifest, out_path: Path) -> Path:
    """Bar chart of attr2 and protected-group percentages."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n = manifest.n_subjects
    group_counts = manifest.group_counts()
    attr2_counts = [0, 0]
    for r in manifest.records:
        attr2_counts[r.attr2] += 1

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2), gridspec_kw={"width_ratios": [1, 2.2]})
    axes[0].bar(["attr2=0", "attr2=1"], [100 * c / n for c in attr2_counts], color="#4878a8")
    axes[0].set_ylabel("%")
    axes[0].set_title("secondary attribute")
    axes[1].bar(
        [f"g{g}" for g in range(manifest.n_groups)],
        [100 * c / n for c in group_counts],
        color="#a85454",
    )
    axes[1].set_title("protected groups")
    for ax in axes:
        ax.set_ylim(0, 100)
        for patch in ax.patches:
            ax.annotate(
                f"{patch.get_height():.1f}",
                (patch.get_x() + patch.get_width() / 2, patch.get_height()),
                ha="center",
                va="bottom",
                fontsize=8,
            )
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def select_extreme_subjects(table: GroupDiceTable, manifest: DatasetManifest, phase: str = "ED"):
    """Best and worst test subject per group by average DSC.

    Prefers subjects of the requested phase; ties break toward the lowest
    sample id. Returns a list of (group, best_id, worst_id).
    """
    phase_of = {r.sample_id: r.phase for r in manifest.records}
    picks = []
    for g in range(table.n_groups):
        pairs = sorted(zip(table.subject_ids[g], table.subject_avgs[g]))
        preferred = [(sid, v) for sid, v in pairs if phase_of.get(sid) == phase] or pairs
        if not preferred:
            raise ContractError(f"group {g} has no evaluated subjects")
        best = worst = preferred[0]
        for sid, v in preferred[1:]:  # strict comparisons keep the lowest id on ties
            if v > best[1]:
                best = (sid, v)
            if v < worst[1]:
                worst = (sid, v)
        picks.append((g, best[0], worst[0]))
    return picks


def render_qualitative_panel(picks, images: dict, gts: dict, preds: dict, out_path: Path) -> Path:
    """G columns x 2 rows of (image, GT overlay, prediction overlay).

    `picks` comes from select_extreme_subjects; top row holds each group's
    best test subject, bottom row its worst. Ground truth is drawn as
    solid contours, predictions as dashed.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n_groups = len(picks)
    fig, axes = plt.subplots(2, n_groups, figsize=(2.1 * n_groups, 4.6), squeeze=False)
    colors = {1: "#00d000", 2: "#ffa500", 3: "#00bfff"}
    for col, (g, best_id, worst_id) in enumerate(picks):
        for row, sid in enumerate((best_id, worst_id)):
            ax = axes[row][col]
            ax.imshow(images[sid], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            for c in FOREGROUND_CLASSES:
                if (gts[sid] == c).any():
                    ax.contour(gts[sid] == c, levels=[0.5], colors=[colors[c]], linewidths=1.2)
                if (preds[sid] == c).any():
                    ax.contour(
                        preds[sid] == c, levels=[0.5], colors=[colors[c]], linewidths=1.0, linestyles="dashed"
                    )
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(f"group {g}", fontsize=9)
            ax.set_xlabel(sid, fontsize=7)
    axes[0][0].set_ylabel("best", fontsize=9)
    axes[1][0].set_ylabel("worst", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
