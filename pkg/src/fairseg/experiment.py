"""Experiment orchestration: validated configs, staged pipeline, reports.

A run is fully described by one JSON config (schema-checked, unknown keys
rejected, seed mandatory). `run_experiment` generates the dataset if
needed, trains the configured regime, evaluates the test split, and
writes `report.json`, `table1.csv`, `table2_row.csv`, `train_log.jsonl`
and the checkpoints under one output directory. Identical (config, seed)
pairs reproduce the report byte-for-byte once the `timing` block is
redacted.
"""

from __future__ import annotations

import copy
import importlib.metadata
import importlib.resources
import json
import subprocess
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import numpy as np
import torch

from .errors import ConfigError, FairsegError, RoutingError, StageError
from .metrics import (
    ClassifierMetrics,
    FairnessSummary,
    GroupDiceTable,
    build_group_dice_table,
    classifier_metrics,
    summarize_fairness,
)
from .nets import (
    Checkpoint,
    ClsNetConfig,
    SegNetConfig,
    cls_forward,
    compose_classifier_input,
    load_checkpoint,
    net_from_checkpoint,
    save_checkpoint,
    seg_forward,
)
from .phantom import (
    DatasetManifest,
    DatasetSpec,
    GeometryConfig,
    GroupAppearance,
    GroupDistribution,
    balanced_subset,
    build_dataset,
    canonical_json,
    load_manifest,
)
from .reporting import (
    ComparisonTable,
    build_comparison,
    render_distribution_plot,
    render_qualitative_panel,
    select_extreme_subjects,
    table1_rows,
    write_dsc_table_csv,
    write_fairness_row_csv,
)
from .training import (
    LoadedDataset,
    RegimeResult,
    TrainConfig,
    predict_records,
    predict_routed,
    subject_dice_entries,
    train_regime,
)

CONFIG_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1
REPORT_NAME = "report.json"

# The single documented redaction rule for determinism comparisons: the
# whole `timing` block is replaced before byte comparison.
REDACTED_KEYS = ("timing",)


def _schema(name: str) -> dict:
    path = importlib.resources.files("fairseg") / "schemas" / name
    return json.loads(path.read_text(encoding="utf-8"))


def validate_config_dict(d: dict):
    try:
        jsonschema.validate(d, _schema("config.schema.json"))
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid experiment config: {exc.message}") from exc
    ds = d["dataset"]
    if "path" not in ds and "n_subjects" not in ds:
        raise ConfigError("dataset needs either a 'path' or an 'n_subjects' generation spec")


def validate_report_dict(d: dict):
    try:
        jsonschema.validate(d, _schema("report.schema.json"))
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"report does not match schema: {exc.message}") from exc


@dataclass
class ExperimentConfig:
    raw: dict
    seed: int
    out_dir: str | None
    alpha: float = 0.01
    eval_attr2: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        validate_config_dict(d)
        ev = d.get("evaluation", {})
        return cls(
            raw=copy.deepcopy(d),
            seed=int(d["seed"]),
            out_dir=d.get("out_dir"),
            alpha=float(ev.get("alpha", 0.01)),
            eval_attr2=bool(ev.get("attr2", True)),
        )

    @classmethod
    def from_file(cls, path: Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    @property
    def regime(self) -> str:
        return self.raw["train"]["regime"]

    @property
    def dataset_path(self) -> str | None:
        return self.raw["dataset"].get("path")

    def with_overrides(self, seed: int | None = None, regime: str | None = None) -> "ExperimentConfig":
        d = copy.deepcopy(self.raw)
        if seed is not None:
            d["seed"] = int(seed)
        if regime is not None:
            d.setdefault("train", {})["regime"] = regime
        return ExperimentConfig.from_dict(d)

    def dataset_spec(self) -> DatasetSpec:
        ds = self.raw["dataset"]
        if "n_subjects" not in ds:
            raise ConfigError("config has no dataset generation spec (dataset.path only)")
        if "proportions" in ds:
            dist = GroupDistribution(tuple(ds["proportions"]))
        else:
            dist = GroupDistribution.imbalanced_default()
        if "appearance" in ds:
            appearance = GroupAppearance(**{k: tuple(v) for k, v in ds["appearance"].items()})
        else:
            appearance = GroupAppearance.default()
        geometry_kwargs = dict(ds.get("geometry", {}))
        for key in ("lv_radius_range", "rv_radius_range"):
            if key in geometry_kwargs:
                geometry_kwargs[key] = tuple(geometry_kwargs[key])
        geometry = GeometryConfig(**geometry_kwargs)
        split = tuple(ds.get("split_fractions", (0.8, 0.1, 0.1)))
        return DatasetSpec(
            n_subjects=int(ds["n_subjects"]),
            distribution=dist,
            appearance=appearance,
            geometry=geometry,
            split_fractions=split,
            seed=self.seed,
        )

    def train_config(self, n_groups: int) -> TrainConfig:
        t = dict(self.raw["train"])
        seg_kwargs = {"deep_supervision": True, **t.pop("seg", {})}
        cls_kwargs = {**t.pop("cls", {}), "num_groups": n_groups}
        regime = t.pop("regime")
        return TrainConfig(
            regime=regime,
            seed=self.seed,
            seg=SegNetConfig(**seg_kwargs),
            cls=ClsNetConfig(**cls_kwargs),
            **t,
        )


def package_version() -> str:
    try:
        return importlib.metadata.version("fairseg")
    except importlib.metadata.PackageNotFoundError:  # pragma: no cover
        return "0.0.0"


def code_version() -> str:
    """git-describe-style version string, falling back to the package version."""
    version = package_version()
    try:
        out = subprocess.run(
            ["git", "-C", str(Path(__file__).resolve().parent), "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{version}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return version


def _jsonable(obj):
    """Recursively convert numpy scalars/arrays and NaN to JSON-safe values."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float) and (obj != obj):  # NaN
        return None
    return obj


def redact_report(report: dict) -> dict:
    """Apply the documented redaction rule for determinism comparisons."""
    out = copy.deepcopy(report)
    for key in REDACTED_KEYS:
        if key in out:
            out[key] = "REDACTED"
    return out


@dataclass
class EvalOutputs:
    preds: dict
    group_table: GroupDiceTable
    group_summary: FairnessSummary
    total_table: GroupDiceTable
    attr2_table: GroupDiceTable | None
    attr2_summary: FairnessSummary | None
    classifier: ClassifierMetrics | None

    @property
    def total_average(self) -> float:
        return float(self.total_table.all_subject_avgs().mean())


def evaluate_result(
    result: RegimeResult,
    data: LoadedDataset,
    manifest: DatasetManifest,
    alpha: float = 0.01,
    eval_attr2: bool = True,
    split: str = "test",
) -> EvalOutputs:
    records = manifest.records_for(split)
    if not records:
        raise ConfigError(f"no records in split {split!r}")

    if result.regime == "protected":
        models = {g: net_from_checkpoint(c) for g, c in result.group_models.items()}
        missing = sorted({r.group for r in records} - set(models))
        if missing:
            raise RoutingError(f"no model for group {missing[0]}; routing requires one model per group")
        preds = predict_routed(models, data, records)
        seg_net = None
    else:
        seg_net = net_from_checkpoint(result.seg)
        preds = predict_records(seg_net, data, records)

    entries = subject_dice_entries(preds, data, records)
    group_table = build_group_dice_table(entries, manifest.n_groups)
    group_summary = summarize_fairness(group_table, alpha)
    total_table = build_group_dice_table(
        [(sid, 0, phase, d) for sid, _, phase, d in entries], 1
    )

    attr2_table = attr2_summary = None
    if eval_attr2:
        attr2_entries = subject_dice_entries(preds, data, records, group_key=lambda r: r.attr2)
        attr2_table = build_group_dice_table(attr2_entries, 2)
        attr2_summary = summarize_fairness(attr2_table, alpha)

    cls_metrics = None
    if result.cls is not None:
        cls_net = net_from_checkpoint(result.cls)
        cls_net.eval()
        live_seg = seg_net if seg_net is not None else net_from_checkpoint(result.seg)
        live_seg.eval()
        pred_groups = []
        true_groups = []
        with torch.no_grad():
            for i in range(0, len(records), 64):
                chunk = records[i : i + 64]
                images, _, groups = data.batch([r.sample_id for r in chunk])
                out = seg_forward(live_seg, images)
                probs = out[0] if isinstance(out, tuple) else out
                logits = cls_forward(cls_net, compose_classifier_input(images, probs))
                pred_groups.extend(int(v) for v in logits.argmax(dim=1))
                true_groups.extend(int(v) for v in groups)
        cls_metrics = classifier_metrics(pred_groups, true_groups, n_groups=manifest.n_groups)

    return EvalOutputs(
        preds=preds,
        group_table=group_table,
        group_summary=group_summary,
        total_table=total_table,
        attr2_table=attr2_table,
        attr2_summary=attr2_summary,
        classifier=cls_metrics,
    )


def _write_tables(out_dir: Path, regime: str, ev: EvalOutputs) -> dict:
    rows = table1_rows(ev.total_table, ev.attr2_table, ev.group_table, ev.group_summary.significant)
    write_dsc_table_csv(out_dir / "table1.csv", rows)
    write_fairness_row_csv(out_dir / "table2_row.csv", regime, ev.group_summary)
    return {"table1": "table1.csv", "table2_row": "table2_row.csv"}


def run_experiment(config: ExperimentConfig, out_dir: Path) -> dict:
    """Execute the full pipeline; returns the report dict (also written to
    report.json). Any stage failure writes an `incomplete.json` marker and
    raises StageError naming the stage."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    stage = "dataset"
    try:
        if config.dataset_path:
            manifest = load_manifest(Path(config.dataset_path))
            dataset_path_str = config.dataset_path
        else:
            manifest = build_dataset(config.dataset_spec(), out_dir / "dataset")
            dataset_path_str = "dataset"

        stage = "train"
        data = LoadedDataset.load(manifest)
        train_config = config.train_config(manifest.n_groups)
        train_records = None
        train_group_counts = manifest.group_counts("train")
        if config.regime == "balanced":
            balanced = balanced_subset(manifest, np.random.default_rng([config.seed, 4]))
            train_records = balanced.records_for("train")
            train_group_counts = balanced.group_counts("train")
        result = train_regime(train_config, data, train_records=train_records, log_path=out_dir / "train_log.jsonl")
        checkpoint_paths = {}
        for name, ckpt in result.checkpoints().items():
            rel = f"checkpoints/{name}.ckpt"
            save_checkpoint(ckpt, out_dir / rel)
            checkpoint_paths[name] = rel

        stage = "evaluate"
        ev = evaluate_result(result, data, manifest, alpha=config.alpha, eval_attr2=config.eval_attr2)

        stage = "report"
        artifacts = {
            "checkpoints": checkpoint_paths,
            "train_log": "train_log.jsonl",
            **_write_tables(out_dir, config.regime, ev),
        }
        finished = datetime.now(timezone.utc).isoformat(timespec="seconds")
        report = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "status": "complete",
            "package_version": package_version(),
            "code_version": code_version(),
            "timing": {
                "started_at": started,
                "finished_at": finished,
                "duration_seconds": round(time.perf_counter() - t0, 3),
            },
            "seed": config.seed,
            "regime": config.regime,
            "config": config.raw,
            "dataset": {
                "path": dataset_path_str,
                "n_subjects": manifest.n_subjects,
                "n_groups": manifest.n_groups,
                "group_counts": manifest.group_counts(),
                "split_counts": manifest.split_counts(),
                "train_group_counts": train_group_counts,
            },
            "artifacts": artifacts,
            "metrics": {
                "group": ev.group_summary.to_dict(),
                "attr2": ev.attr2_summary.to_dict() if ev.attr2_summary else None,
                "total_average": round(ev.total_average, 6),
                "group_class_phase_mean": _jsonable(np.round(ev.group_table.class_phase_mean, 6)),
                "classifier": _jsonable(ev.classifier.to_dict()) if ev.classifier else None,
            },
        }
        report = _jsonable(report)
        validate_report_dict(report)
        (out_dir / REPORT_NAME).write_text(canonical_json(report), encoding="utf-8")
        return report
    except FairsegError as exc:
        _write_incomplete(out_dir, stage, exc)
        raise StageError(stage, str(exc)) from exc
    except Exception as exc:  # non-package failure: still name the stage
        _write_incomplete(out_dir, stage, exc)
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc


def _write_incomplete(out_dir: Path, stage: str, exc: Exception):
    marker = {
        "status": "incomplete",
        "failed_stage": stage,
        "error": f"{type(exc).__name__}: {exc}",
    }
    try:
        (Path(out_dir) / "incomplete.json").write_text(canonical_json(marker), encoding="utf-8")
    except OSError:  # pragma: no cover
        pass


def load_report(path: Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / REPORT_NAME
    if not path.exists():
        raise ConfigError(f"no report at {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def compare_runs(report_paths) -> ComparisonTable:
    """One comparison row per run, in the given order."""
    reports = [load_report(p) for p in report_paths]
    return build_comparison(reports)


def _load_result_from_run(run_dir: Path, report: dict) -> RegimeResult:
    ck = report["artifacts"]["checkpoints"]
    regime = report["regime"]
    loaded = {name: load_checkpoint(run_dir / rel) for name, rel in ck.items()}
    group_models = {
        int(name.split("_", 1)[1]): c for name, c in loaded.items() if name.startswith("group_")
    }
    return RegimeResult(
        regime=regime,
        seg=loaded.get("seg"),
        cls=loaded.get("cls"),
        base=loaded.get("base"),
        group_models=group_models or None,
        history=[],
    )


def _load_run_dataset(run_dir: Path, report: dict, data_dir: Path | None):
    if data_dir is not None:
        manifest = load_manifest(Path(data_dir))
    else:
        raw = report["dataset"]["path"]
        path = Path(raw)
        if not path.is_absolute():
            path = run_dir / raw
        manifest = load_manifest(path)
    return manifest, LoadedDataset.load(manifest)


def evaluate_run(run_dir: Path, data_dir: Path | None = None, alpha: float | None = None, out_dir: Path | None = None) -> dict:
    """Recompute the metrics of a finished run from its checkpoints.

    Writes refreshed tables and an eval report into out_dir (default: the
    run directory itself).
    """
    run_dir = Path(run_dir)
    report = load_report(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    alpha = float(alpha) if alpha is not None else float(report["metrics"]["group"]["alpha"])
    manifest, data = _load_run_dataset(run_dir, report, data_dir)
    result = _load_result_from_run(run_dir, report)
    ev = evaluate_result(result, data, manifest, alpha=alpha, eval_attr2=report["metrics"]["attr2"] is not None)
    _write_tables(out_dir, report["regime"], ev)
    metrics = {
        "group": ev.group_summary.to_dict(),
        "attr2": ev.attr2_summary.to_dict() if ev.attr2_summary else None,
        "total_average": round(ev.total_average, 6),
        "group_class_phase_mean": _jsonable(np.round(ev.group_table.class_phase_mean, 6)),
        "classifier": _jsonable(ev.classifier.to_dict()) if ev.classifier else None,
    }
    report["metrics"] = _jsonable(metrics)
    validate_report_dict(report)
    (out_dir / REPORT_NAME).write_text(canonical_json(report), encoding="utf-8")
    return report


def render_run(run_dir: Path, out_dir: Path | None = None) -> dict:
    """Render the distribution plot, qualitative panel, and markdown
    summary for a finished run; returns the artifact paths."""
    run_dir = Path(run_dir)
    report = load_report(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest, data = _load_run_dataset(run_dir, report, None)
    result = _load_result_from_run(run_dir, report)
    ev = evaluate_result(
        result,
        data,
        manifest,
        alpha=float(report["metrics"]["group"]["alpha"]),
        eval_attr2=False,
    )
    dist_path = render_distribution_plot(manifest, out_dir / "distribution.png")
    picks = select_extreme_subjects(ev.group_table, manifest)
    wanted = {sid for _, best, worst in picks for sid in (best, worst)}
    images = {sid: data.images[data.index[sid], 0].numpy() for sid in wanted}
    gts = {sid: data.masks[data.index[sid]].numpy() for sid in wanted}
    panel_path = render_qualitative_panel(picks, images, gts, ev.preds, out_dir / "qualitative.png")
    md = build_comparison([report]).to_markdown()
    md_path = out_dir / "summary.md"
    md_path.write_text(md, encoding="utf-8")
    return {
        "distribution": str(dist_path),
        "qualitative": str(panel_path),
        "summary": str(md_path),
    }
