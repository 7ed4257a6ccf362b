"""Synthetic short-axis cardiac phantoms with group-conditional appearance.

Each phantom is a 64x64 (configurable) intensity image containing three
foreground structures built from analytic geometry:

  LVBP (class 1)  filled disk of radius r_b
  LVM  (class 2)  annulus of thickness t around the LVBP disk
  RVBP (class 3)  crescent: a left-offset disk minus the epicardial disk

End-systole (ES) reuses the same subject geometry with the LVBP radius
shrunk and the wall thickened, so ES blood-pool area is always below the
ED area for the same subject draw.

Groups differ in appearance (myocardium contrast, intensity gain, noise
level) and morphology (mean wall thickness). The secondary binary
attribute attr2 is intentionally NOT an input to image synthesis; it only
exists in dataset records.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, GenerationError

BACKGROUND, LVBP, LVM, RVBP = 0, 1, 2, 3
CLASS_NAMES = {BACKGROUND: "BG", LVBP: "LVBP", LVM: "LVM", RVBP: "RVBP"}
FOREGROUND_CLASSES = (LVBP, LVM, RVBP)
PHASES = ("ED", "ES")

# Per-class base intensities before group shift.
BASE_INTENSITY = {BACKGROUND: 0.2, LVBP: 0.9, LVM: 0.5, RVBP: 0.9}

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"

DISTRIBUTION_TOLERANCE = 1e-9


@dataclass(frozen=True)
class GroupDistribution:
    """Discrete distribution over protected-group ids 0..G-1."""

    proportions: tuple[float, ...]

    def __post_init__(self):
        p = tuple(float(x) for x in self.proportions)
        object.__setattr__(self, "proportions", p)
        if len(p) < 2:
            raise ConfigError("group distribution needs at least 2 groups")
        if any(x < 0 for x in p):
            raise ConfigError("group proportions must be non-negative")
        if abs(sum(p) - 1.0) > DISTRIBUTION_TOLERANCE:
            raise ConfigError(f"group proportions sum to {sum(p)!r}, expected 1")

    @property
    def n_groups(self) -> int:
        return len(self.proportions)

    @classmethod
    def uniform(cls, n_groups: int = 6) -> "GroupDistribution":
        return cls(tuple(1.0 / n_groups for _ in range(n_groups)))

    @classmethod
    def imbalanced_default(cls) -> "GroupDistribution":
        """Six groups with an 80% majority and a 1.5% smallest group."""
        return cls((0.80, 0.06, 0.05, 0.045, 0.03, 0.015))


@dataclass(frozen=True)
class GroupAppearance:
    """Per-group appearance and morphology parameters.

    contrast scales the myocardium/background intensity gap (1.0 keeps the
    base LVM intensity, lower values sink the myocardium toward the
    background), gain multiplies the whole image, noise_sigma is the
    additive Gaussian noise level, wall_thickness is the mean LVM
    thickness in pixels.
    """

    contrast: tuple[float, ...]
    gain: tuple[float, ...]
    noise_sigma: tuple[float, ...]
    wall_thickness: tuple[float, ...]

    def __post_init__(self):
        lengths = {
            len(self.contrast),
            len(self.gain),
            len(self.noise_sigma),
            len(self.wall_thickness),
        }
        if len(lengths) != 1:
            raise ConfigError("appearance parameter tuples must share one length")
        if any(s < 0 for s in self.noise_sigma):
            raise ConfigError("noise_sigma must be non-negative")
        if any(t < 1.0 for t in self.wall_thickness):
            raise ConfigError("wall_thickness must be at least 1 pixel")

    @property
    def n_groups(self) -> int:
        return len(self.contrast)

    @classmethod
    def default(cls) -> "GroupAppearance":
        # Group 0 is the reference look. The minority looks are chosen to
        # CONFLICT with it, not merely to be harder: group 3's blood pools
        # sit at the reference myocardium intensity, groups 2 and 5 have
        # bright myocardium near pool intensity, group 4 a faint thin
        # wall. A group-blind model must resolve these conflicting
        # intensity->class mappings from context, which is exactly where
        # training imbalance bites.
        return cls(
            contrast=(1.00, 1.00, 1.95, 1.00, 0.27, 1.60),
            gain=(1.00, 0.80, 1.00, 0.62, 1.00, 1.12),
            noise_sigma=(0.05, 0.05, 0.05, 0.05, 0.06, 0.05),
            wall_thickness=(4.2, 3.6, 4.8, 3.0, 2.4, 5.4),
        )

    @classmethod
    def neutral(cls, n_groups: int) -> "GroupAppearance":
        """Identical appearance for every group (no group shift)."""
        return cls(
            contrast=(1.0,) * n_groups,
            gain=(1.0,) * n_groups,
            noise_sigma=(0.04,) * n_groups,
            wall_thickness=(4.0,) * n_groups,
        )


@dataclass(frozen=True)
class GeometryConfig:
    height: int = 64
    width: int = 64
    lv_radius_range: tuple[float, float] = (7.0, 9.5)
    rv_radius_range: tuple[float, float] = (5.5, 8.0)
    center_jitter: float = 3.0
    thickness_jitter: float = 0.25
    rv_overlap: float = 0.25
    es_lv_scale: float = 0.6
    es_thickness_scale: float = 1.3
    margin: float = 1.0

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ConfigError("grid must be at least 32x32")
        if not (0.0 < self.es_lv_scale < 1.0):
            raise ConfigError("es_lv_scale must lie in (0, 1)")
        if self.lv_radius_range[0] > self.lv_radius_range[1]:
            raise ConfigError("lv_radius_range must be (lo, hi)")
        if self.rv_radius_range[0] > self.rv_radius_range[1]:
            raise ConfigError("rv_radius_range must be (lo, hi)")


@dataclass(frozen=True)
class RealizedGeometry:
    """Phase-resolved geometry actually used for one sample."""

    cx: float
    cy: float
    lv_radius: float
    thickness: float
    epi_radius: float
    rv_cx: float
    rv_cy: float
    rv_radius: float


@dataclass
class Sample:
    image: np.ndarray  # HxW float32 in [0, 1]
    mask: np.ndarray  # HxW uint8 in {0..3}
    phase: str
    group: int
    attr2: int
    subject_id: str
    geometry: RealizedGeometry | None = None


def sample_group(dist: GroupDistribution, rng: np.random.Generator) -> int:
    """Draw one group id with the distribution's probabilities."""
    edges = np.cumsum(dist.proportions)
    g = int(np.searchsorted(edges, rng.random(), side="right"))
    return min(g, dist.n_groups - 1)


def _draw_subject_geometry(geometry: GeometryConfig, t_mean: float, rng: np.random.Generator):
    # Fixed draw order so that ED and ES calls sharing an rng state share
    # the subject's geometry.
    cx = (geometry.width - 1) / 2 + rng.uniform(-geometry.center_jitter, geometry.center_jitter)
    cy = (geometry.height - 1) / 2 + rng.uniform(-geometry.center_jitter, geometry.center_jitter)
    lv_radius = rng.uniform(*geometry.lv_radius_range)
    rv_radius = rng.uniform(*geometry.rv_radius_range)
    thickness = max(1.0, rng.normal(t_mean, geometry.thickness_jitter))
    return cx, cy, lv_radius, rv_radius, thickness


def _realize_phase(geometry: GeometryConfig, cx, cy, lv_radius, rv_radius, thickness, phase: str) -> RealizedGeometry:
    if phase == "ES":
        lv_radius = lv_radius * geometry.es_lv_scale
        thickness = thickness * geometry.es_thickness_scale
    epi_radius = lv_radius + thickness
    rv_distance = (1.0 - geometry.rv_overlap) * (epi_radius + rv_radius)
    return RealizedGeometry(
        cx=cx,
        cy=cy,
        lv_radius=lv_radius,
        thickness=thickness,
        epi_radius=epi_radius,
        rv_cx=cx - rv_distance,
        rv_cy=cy,
        rv_radius=rv_radius,
    )


def _check_bounds(geometry: GeometryConfig, realized: RealizedGeometry):
    m = geometry.margin
    extents = [
        (realized.cx, realized.cy, realized.epi_radius),
        (realized.rv_cx, realized.rv_cy, realized.rv_radius),
    ]
    for cx, cy, r in extents:
        if cx - r < m or cx + r > geometry.width - 1 - m:
            raise GenerationError(
                f"structure of radius {r:.2f} at x={cx:.2f} clips the grid (width {geometry.width})"
            )
        if cy - r < m or cy + r > geometry.height - 1 - m:
            raise GenerationError(
                f"structure of radius {r:.2f} at y={cy:.2f} clips the grid (height {geometry.height})"
            )


def rasterize_mask(geometry: GeometryConfig, realized: RealizedGeometry) -> np.ndarray:
    """Class mask from the disk/annulus/crescent predicates."""
    yy, xx = np.mgrid[0 : geometry.height, 0 : geometry.width]
    d_lv = np.hypot(xx - realized.cx, yy - realized.cy)
    d_rv = np.hypot(xx - realized.rv_cx, yy - realized.rv_cy)
    mask = np.zeros((geometry.height, geometry.width), dtype=np.uint8)
    mask[(d_rv < realized.rv_radius) & (d_lv >= realized.epi_radius)] = RVBP
    mask[(d_lv >= realized.lv_radius) & (d_lv < realized.epi_radius)] = LVM
    mask[d_lv < realized.lv_radius] = LVBP
    return mask


def generate_sample(
    geometry: GeometryConfig,
    appearance: GroupAppearance,
    group: int,
    phase: str,
    rng: np.random.Generator,
    attr2: int = 0,
    subject_id: str = "s00000",
) -> Sample:
    """Generate one phantom sample. Deterministic given the rng state.

    The same rng state produces the same subject geometry for either
    phase; noise fields are phase-specific. attr2 is carried through as
    metadata, never consumed.
    """
    if phase not in PHASES:
        raise ConfigError(f"unknown phase {phase!r}")
    if not 0 <= group < appearance.n_groups:
        raise ConfigError(f"group {group} outside appearance table of size {appearance.n_groups}")

    t_mean = appearance.wall_thickness[group]
    cx, cy, lv_radius, rv_radius, thickness = _draw_subject_geometry(geometry, t_mean, rng)
    noise_rng = rng.spawn(2)[PHASES.index(phase)]
    realized = _realize_phase(geometry, cx, cy, lv_radius, rv_radius, thickness, phase)
    _check_bounds(geometry, realized)

    mask = rasterize_mask(geometry, realized)

    kappa = appearance.contrast[group]
    lvm_intensity = BASE_INTENSITY[BACKGROUND] + kappa * (BASE_INTENSITY[LVM] - BASE_INTENSITY[BACKGROUND])
    levels = np.array(
        [BASE_INTENSITY[BACKGROUND], BASE_INTENSITY[LVBP], lvm_intensity, BASE_INTENSITY[RVBP]],
        dtype=np.float64,
    )
    image = levels[mask]
    image *= appearance.gain[group]
    sigma = appearance.noise_sigma[group]
    if sigma > 0:
        image += noise_rng.normal(0.0, sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0, out=image)

    return Sample(
        image=image.astype(np.float32),
        mask=mask,
        phase=phase,
        group=group,
        attr2=attr2,
        subject_id=subject_id,
        geometry=realized,
    )


# ---------------------------------------------------------------------------
# Dataset materialization


@dataclass(frozen=True)
class DatasetSpec:
    n_subjects: int
    distribution: GroupDistribution = field(default_factory=GroupDistribution.imbalanced_default)
    appearance: GroupAppearance = field(default_factory=GroupAppearance.default)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < self.distribution.n_groups:
            raise ConfigError(
                f"n_subjects={self.n_subjects} below group count {self.distribution.n_groups}"
            )
        if abs(sum(self.split_fractions) - 1.0) > DISTRIBUTION_TOLERANCE:
            raise ConfigError("split fractions must sum to 1")
        if self.appearance.n_groups != self.distribution.n_groups:
            raise ConfigError("appearance table and distribution disagree on group count")


SPLITS = ("train", "val", "test")


@dataclass
class SampleRecord:
    sample_id: str
    subject_index: int
    group: int
    attr2: int
    phase: str
    split: str
    image_file: str
    mask_file: str


@dataclass
class DatasetManifest:
    schema_version: int
    seed: int
    height: int
    width: int
    n_groups: int
    proportions: list[float]
    realized_group_counts: list[int]
    split_fractions: list[float]
    geometry: dict
    appearance: dict
    records: list[SampleRecord]
    root: Path | None = None  # directory holding the sample files; not serialized

    @property
    def n_subjects(self) -> int:
        return len(self.records)

    def records_for(self, split: str | None = None, group: int | None = None) -> list[SampleRecord]:
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if group is not None:
            out = [r for r in out if r.group == group]
        return out

    def group_counts(self, split: str | None = None) -> list[int]:
        counts = [0] * self.n_groups
        for r in self.records_for(split):
            counts[r.group] += 1
        return counts

    def split_counts(self) -> dict[str, int]:
        return {s: len(self.records_for(s)) for s in SPLITS}

    def to_dict(self) -> dict:
        d = {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "height": self.height,
            "width": self.width,
            "n_groups": self.n_groups,
            "proportions": self.proportions,
            "realized_group_counts": self.realized_group_counts,
            "split_fractions": self.split_fractions,
            "geometry": self.geometry,
            "appearance": self.appearance,
            "records": [dataclasses.asdict(r) for r in self.records],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict, root: Path | None = None) -> "DatasetManifest":
        records = [SampleRecord(**r) for r in d["records"]]
        return cls(
            schema_version=d["schema_version"],
            seed=d["seed"],
            height=d["height"],
            width=d["width"],
            n_groups=d["n_groups"],
            proportions=list(d["proportions"]),
            realized_group_counts=list(d["realized_group_counts"]),
            split_fractions=list(d["split_fractions"]),
            geometry=dict(d["geometry"]),
            appearance=dict(d["appearance"]),
            records=records,
            root=root,
        )


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def save_manifest(manifest: DatasetManifest, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / MANIFEST_NAME
    path.write_text(canonical_json(manifest.to_dict()), encoding="utf-8")
    manifest.root = directory
    return path


def load_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    d = json.loads(path.read_text(encoding="utf-8"))
    manifest = DatasetManifest.from_dict(d, root=path.parent)
    missing = [
        r.sample_id
        for r in manifest.records
        if not (path.parent / r.image_file).exists() or not (path.parent / r.mask_file).exists()
    ]
    if missing:
        raise ConfigError(f"manifest references missing sample files, e.g. {missing[0]}")
    return manifest


def read_image(path: Path, height: int, width: int) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != height * width:
        raise ConfigError(f"{path} holds {data.size} floats, expected {height * width}")
    return data.reshape(height, width)


def read_mask(path: Path, height: int, width: int) -> np.ndarray:
    data = np.fromfile(path, dtype=np.uint8)
    if data.size != height * width:
        raise ConfigError(f"{path} holds {data.size} bytes, expected {height * width}")
    return data.reshape(height, width)


def largest_remainder(total: int, weights) -> list[int]:
    """Integer counts summing exactly to `total`, proportional to weights.

    Remainder units go to the largest fractional parts; ties break toward
    the lower index so the result is deterministic.
    """
    ideals = [total * w for w in weights]
    counts = [math.floor(x) for x in ideals]
    short = total - sum(counts)
    order = sorted(range(len(weights)), key=lambda i: (-(ideals[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def stratified_split_counts(group_sizes: list[int], fractions) -> list[list[int]]:
    """Per-group split counts: every entry within +-1 of n_g * f_s, exact
    global split totals (largest-remainder of the grand total).

    Starts from per-group largest remainder and repairs the column sums by
    moving single subjects along augmenting chains between splits.
    """
    n_splits = len(fractions)
    total = sum(group_sizes)
    targets = largest_remainder(total, fractions)
    counts = [largest_remainder(n_g, fractions) for n_g in group_sizes]

    def can_give(g, s):
        return counts[g][s] - 1 >= math.floor(group_sizes[g] * fractions[s])

    def can_take(g, s):
        return counts[g][s] + 1 <= math.ceil(group_sizes[g] * fractions[s])

    def sums():
        return [sum(counts[g][s] for g in range(len(group_sizes))) for s in range(n_splits)]

    col = sums()
    while col != targets:
        over = next(s for s in range(n_splits) if col[s] > targets[s])
        # BFS over splits: an edge a->b means one subject of some group can
        # move from split a to split b without leaving its +-1 band.
        parent: dict[int, tuple[int, int]] = {}
        queue = deque([over])
        end = None
        while queue and end is None:
            a = queue.popleft()
            for b in range(n_splits):
                if b == a or b in parent or b == over:
                    continue
                move_group = next(
                    (g for g in range(len(group_sizes)) if can_give(g, a) and can_take(g, b)),
                    None,
                )
                if move_group is None:
                    continue
                parent[b] = (a, move_group)
                if col[b] < targets[b]:
                    end = b
                    break
                queue.append(b)
        if end is None:  # cannot happen for a feasible rounding problem
            raise ConfigError("stratified split repair failed to converge")
        b = end
        while b != over:
            a, g = parent[b]
            counts[g][a] -= 1
            counts[g][b] += 1
            b = a
        col = sums()
    return counts


def _subject_rng(seed: int, subject_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, subject_index])


def build_dataset(spec: DatasetSpec, out_dir: Path) -> DatasetManifest:
    """Materialize a dataset directory: manifest.json plus raw sample files.

    Group counts are the largest-remainder rounding of N x proportions;
    splits are stratified by group; phases alternate within each
    (group, split) cell. Byte-identical for identical (spec, seed).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = spec.n_subjects
    n_groups = spec.distribution.n_groups

    assign_rng = np.random.default_rng([spec.seed, 1])
    group_counts = largest_remainder(n, spec.distribution.proportions)
    labels = np.repeat(np.arange(n_groups), group_counts)
    assign_rng.shuffle(labels)
    attr2 = assign_rng.integers(0, 2, size=n)

    split_table = stratified_split_counts(group_counts, spec.split_fractions)
    split_of = {}
    phase_of = {}
    for g in range(n_groups):
        members = [i for i in range(n) if labels[i] == g]
        perm = assign_rng.permutation(len(members))
        members = [members[j] for j in perm]
        start = 0
        for s_idx, split in enumerate(SPLITS):
            cell = members[start : start + split_table[g][s_idx]]
            start += split_table[g][s_idx]
            for k, subject in enumerate(cell):
                split_of[subject] = split
                phase_of[subject] = PHASES[k % 2]

    records = []
    for i in range(n):
        sid = f"s{i:05d}"
        sample = generate_sample(
            spec.geometry,
            spec.appearance,
            group=int(labels[i]),
            phase=phase_of[i],
            rng=_subject_rng(spec.seed, i),
            attr2=int(attr2[i]),
            subject_id=sid,
        )
        image_file = f"img_{sid}.f32"
        mask_file = f"seg_{sid}.u8"
        (out_dir / image_file).write_bytes(sample.image.astype("<f4").tobytes(order="C"))
        (out_dir / mask_file).write_bytes(sample.mask.astype(np.uint8).tobytes(order="C"))
        records.append(
            SampleRecord(
                sample_id=sid,
                subject_index=i,
                group=int(labels[i]),
                attr2=int(attr2[i]),
                phase=phase_of[i],
                split=split_of[i],
                image_file=image_file,
                mask_file=mask_file,
            )
        )

    manifest = DatasetManifest(
        schema_version=MANIFEST_SCHEMA_VERSION,
        seed=spec.seed,
        height=spec.geometry.height,
        width=spec.geometry.width,
        n_groups=n_groups,
        proportions=list(spec.distribution.proportions),
        realized_group_counts=group_counts,
        split_fractions=list(spec.split_fractions),
        geometry=dataclasses.asdict(spec.geometry),
        appearance=dataclasses.asdict(spec.appearance),
        records=records,
        root=out_dir,
    )
    save_manifest(manifest, out_dir)
    return manifest


def balanced_subset(manifest: DatasetManifest, rng: np.random.Generator) -> DatasetManifest:
    """Shrink the training split to the smallest group's training count.

    Every group keeps exactly m = min_g(train count) training subjects,
    sampled without replacement; validation and test records are kept
    unchanged.
    """
    per_group = [manifest.records_for("train", g) for g in range(manifest.n_groups)]
    for g, recs in enumerate(per_group):
        if not recs:
            raise ConfigError(f"group {g} has no training subjects; cannot balance")
    m = min(len(recs) for recs in per_group)
    kept: list[SampleRecord] = []
    for recs in per_group:
        idx = rng.choice(len(recs), size=m, replace=False)
        kept.extend(recs[i] for i in sorted(int(j) for j in idx))

    others = [r for r in manifest.records if r.split != "train"]
    records = sorted(kept + others, key=lambda r: r.subject_index)
    counts = [0] * manifest.n_groups
    for r in records:
        counts[r.group] += 1
    return DatasetManifest(
        schema_version=manifest.schema_version,
        seed=manifest.seed,
        height=manifest.height,
        width=manifest.width,
        n_groups=manifest.n_groups,
        proportions=manifest.proportions,
        realized_group_counts=counts,
        split_fractions=manifest.split_fractions,
        geometry=manifest.geometry,
        appearance=manifest.appearance,
        records=records,
        root=manifest.root,
    )
