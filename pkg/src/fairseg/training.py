"""The five training regimes and their shared SGD engine.

Regimes:
  baseline    plain shuffled batches over the full training split
  balanced    same dynamics, fed a group-balanced training subset
  stratified  every batch carries equal group representation
  meta        segmentation net jointly optimized with a protected-group
              classifier fed (image, segmentation output)
  protected   a shared pretrained model fine-tuned per group, routed by
              the group attribute at inference

All randomness is explicit: parameter init comes from the config seed,
batch plans from per-epoch streams keyed by (seed, salt, epoch), so any
regime re-run with the same config and seed reproduces its checkpoints
and logged metrics exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ContractError, DivergenceError, RoutingError
from .losses import cls_loss, seg_loss
from .metrics import build_group_dice_table, dice
from .nets import (
    Checkpoint,
    ClsNetConfig,
    SegNetConfig,
    build_cls_net,
    build_seg_net,
    checkpoint_from_net,
    cls_forward,
    compose_classifier_input,
    mask_to_channel,
    net_from_checkpoint,
    predict_mask,
    seg_forward,
)
from .phantom import FOREGROUND_CLASSES, DatasetManifest, read_image, read_mask
from .sampling import epoch_batches, stratified_batches

REGIMES = ("baseline", "balanced", "stratified", "meta", "protected")

# Batch-plan stream salts; one per independently-planned training phase.
SALT_BASELINE = 10
SALT_META_P1_SEG = 20
SALT_META_P1_CLS = 21
SALT_META_P2 = 22
SALT_PROTECTED_BASE = 30
SALT_PROTECTED_FT = 40  # + group id


@dataclass(frozen=True)
class TrainConfig:
    regime: str
    epochs: int = 60
    phase1_epochs: int = 30
    phase2_epochs: int = 30
    batch_size: int = 12
    lr0: float = 0.01
    momentum: float = 0.99
    poly_power: float = 0.9
    meta_lambda: float = 0.1
    seed: int = 0
    detach_cls_input: bool = False
    seg: SegNetConfig = field(default_factory=lambda: SegNetConfig(deep_supervision=True))
    cls: ClsNetConfig = field(default_factory=ClsNetConfig)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if min(self.epochs, self.phase1_epochs, self.phase2_epochs) < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")
        if self.meta_lambda < 0:
            raise ConfigError("meta_lambda must be non-negative")
        if self.lr0 <= 0:
            raise ConfigError("initial learning rate must be positive")


def poly_lr(epoch: int, max_epochs: int, lr0: float = 0.01, power: float = 0.9) -> float:
    """lr0 * (1 - epoch/max_epochs)^power."""
    if max_epochs < 1:
        raise ContractError("max_epochs must be at least 1")
    if epoch < 0 or epoch > max_epochs:
        raise ContractError(f"epoch {epoch} outside 0..{max_epochs}")
    return lr0 * (1.0 - epoch / max_epochs) ** power


# ---------------------------------------------------------------------------
# In-memory dataset


@dataclass
class LoadedDataset:
    manifest: DatasetManifest
    ids: list
    index: dict
    images: torch.Tensor  # (n, 1, H, W) float32
    masks: torch.Tensor  # (n, H, W) int64
    groups: np.ndarray
    attr2: np.ndarray
    phases: list

    @classmethod
    def load(cls, manifest: DatasetManifest) -> "LoadedDataset":
        if manifest.root is None:
            raise ConfigError("manifest has no root directory; load it from disk first")
        n = len(manifest.records)
        h, w = manifest.height, manifest.width
        images = np.empty((n, 1, h, w), dtype=np.float32)
        masks = np.empty((n, h, w), dtype=np.int64)
        ids, phases = [], []
        groups = np.empty(n, dtype=np.int64)
        attr2 = np.empty(n, dtype=np.int64)
        for i, rec in enumerate(manifest.records):
            images[i, 0] = read_image(manifest.root / rec.image_file, h, w)
            masks[i] = read_mask(manifest.root / rec.mask_file, h, w)
            ids.append(rec.sample_id)
            phases.append(rec.phase)
            groups[i] = rec.group
            attr2[i] = rec.attr2
        return cls(
            manifest=manifest,
            ids=ids,
            index={sid: i for i, sid in enumerate(ids)},
            images=torch.from_numpy(images),
            masks=torch.from_numpy(masks),
            groups=groups,
            attr2=attr2,
            phases=phases,
        )

    def items(self, records) -> list:
        return [(r.sample_id, r.group) for r in records]

    def batch(self, sample_ids):
        idx = [self.index[sid] for sid in sample_ids]
        return self.images[idx], self.masks[idx], torch.as_tensor(self.groups[idx])


def _plan_rng(seed: int, salt: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 3, salt, epoch])


def _make_optimizer(params, lr0: float, momentum: float):
    if momentum > 0:
        return torch.optim.SGD(params, lr=lr0, momentum=momentum, nesterov=True)
    return torch.optim.SGD(params, lr=lr0)


def _set_lr(optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr


def set_deep_supervision(net, flag: bool):
    net.config = dataclasses.replace(net.config, deep_supervision=flag)


def _run_epochs(
    *,
    parameters,
    epochs: int,
    batch_size: int,
    lr0: float,
    momentum: float,
    power: float,
    seed: int,
    salt: int,
    plan_builder,
    batch_loss,
    phase: str,
    on_epoch_end=None,
    epoch_offset: int = 0,
    schedule_epochs: int | None = None,
) -> list:
    """Shared SGD loop: poly LR per epoch, fresh batch plan per epoch.

    Multi-phase regimes pass epoch_offset/schedule_epochs so that their
    phases walk one continuous poly schedule (second phases continue
    where pretraining left off instead of restarting at lr0).
    """
    history = []
    if schedule_epochs is None:
        schedule_epochs = epochs
    optimizer = _make_optimizer(parameters, lr0, momentum)
    for local_epoch in range(epochs):
        epoch = epoch_offset + local_epoch
        lr = poly_lr(epoch, schedule_epochs, lr0, power)
        _set_lr(optimizer, lr)
        plan = plan_builder(batch_size, _plan_rng(seed, salt, epoch))
        losses = []
        extras: dict[str, list] = {}
        for b, batch_ids in enumerate(plan.batches):
            optimizer.zero_grad()
            loss, parts = batch_loss(batch_ids)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss in phase {phase!r}", epoch=epoch, batch=b
                )
            loss.backward()
            optimizer.step()
            losses.append(loss.detach().item())
            for k, v in parts.items():
                extras.setdefault(k, []).append(v)
        entry = {
            "phase": phase,
            "epoch": epoch,
            "lr": lr,
            "loss": float(np.mean(losses)) if losses else math.nan,
        }
        for k, vals in extras.items():
            entry[k] = float(np.mean(vals))
        if on_epoch_end is not None:
            entry.update(on_epoch_end())
        history.append(entry)
    return history


# ---------------------------------------------------------------------------
# Inference and validation helpers


def _net_output_probs(net, images: torch.Tensor) -> torch.Tensor:
    out = seg_forward(net, images)
    return out[0] if isinstance(out, tuple) else out


def predict_records(net, data: LoadedDataset, records, batch: int = 64) -> dict:
    """Predicted label maps keyed by sample id."""
    was_training = net.training
    net.eval()
    preds = {}
    with torch.no_grad():
        for i in range(0, len(records), batch):
            chunk = records[i : i + batch]
            images, _, _ = data.batch([r.sample_id for r in chunk])
            probs = _net_output_probs(net, images)
            labels = predict_mask(probs)
            for r, m in zip(chunk, labels):
                preds[r.sample_id] = m
    if was_training:
        net.train()
    return preds


def route_and_segment(group_models: dict, image, group: int) -> np.ndarray:
    """Predict with the checkpointed model of the sample's group."""
    if group not in group_models:
        raise RoutingError(f"no model for group {group}; routing requires one model per group")
    model = group_models[group]
    net = net_from_checkpoint(model) if isinstance(model, Checkpoint) else model
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(image.astype(np.float32))
    if image.dim() == 2:
        image = image.unsqueeze(0).unsqueeze(0)
    net.eval()
    with torch.no_grad():
        probs = _net_output_probs(net, image)
    return predict_mask(probs)[0]


def predict_routed(group_models: dict, data: LoadedDataset, records, batch: int = 64) -> dict:
    """Routing-based prediction for a record list (protected regime)."""
    nets = {}
    for g, model in group_models.items():
        nets[g] = net_from_checkpoint(model) if isinstance(model, Checkpoint) else model
        nets[g].eval()
    preds = {}
    by_group: dict[int, list] = {}
    for r in records:
        by_group.setdefault(r.group, []).append(r)
    for g, recs in sorted(by_group.items()):
        if g not in nets:
            raise RoutingError(f"no model for group {g}; routing requires one model per group")
        preds.update(predict_records(nets[g], data, recs, batch=batch))
    return preds


def subject_dice_entries(preds: dict, data: LoadedDataset, records, group_key=None):
    """(sample_id, group, phase, per-class dice fractions) per record."""
    entries = []
    for r in records:
        gt = data.masks[data.index[r.sample_id]].numpy()
        dices = [dice(preds[r.sample_id], gt, c) for c in FOREGROUND_CLASSES]
        g = r.group if group_key is None else group_key(r)
        entries.append((r.sample_id, g, r.phase, dices))
    return entries


def validation_dsc(net_or_models, data: LoadedDataset, records, n_groups: int) -> dict:
    """Overall and per-group mean subject DSC (percent) on a record list."""
    if not records:
        return {"val_dsc": math.nan, "val_dsc_per_group": [math.nan] * n_groups}
    if isinstance(net_or_models, dict):
        preds = predict_routed(net_or_models, data, records)
    else:
        preds = predict_records(net_or_models, data, records)
    table = build_group_dice_table(subject_dice_entries(preds, data, records), n_groups)
    overall = float(table.all_subject_avgs().mean())
    per_group = [
        float(np.mean(v)) if len(v) else math.nan for v in table.subject_avgs
    ]
    return {"val_dsc": overall, "val_dsc_per_group": per_group}


def classifier_accuracy(net, data: LoadedDataset, records, num_classes: int, batch: int = 64) -> float:
    """Accuracy of group prediction from (image, ground-truth channel)."""
    if not records:
        return math.nan
    net.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(records), batch):
            chunk = records[i : i + batch]
            images, masks, groups = data.batch([r.sample_id for r in chunk])
            probs = cls_forward(net, torch.cat([images, mask_to_channel(masks, num_classes)], dim=1))
            correct += int((probs.argmax(dim=1) == groups).sum())
    net.train()
    return correct / len(records)


# ---------------------------------------------------------------------------
# Regimes


@dataclass
class RegimeResult:
    regime: str
    seg: Checkpoint | None = None
    cls: Checkpoint | None = None
    base: Checkpoint | None = None
    group_models: dict | None = None
    history: list = field(default_factory=list)

    def checkpoints(self) -> dict:
        out = {}
        if self.seg is not None:
            out["seg"] = self.seg
        if self.cls is not None:
            out["cls"] = self.cls
        if self.base is not None:
            out["base"] = self.base
        if self.group_models:
            for g, ckpt in sorted(self.group_models.items()):
                out[f"group_{g}"] = ckpt
        return out


def _seg_batch_loss(net, data: LoadedDataset):
    def fn(batch_ids):
        images, masks, _ = data.batch(batch_ids)
        out = seg_forward(net, images)
        if isinstance(out, tuple):
            loss = seg_loss(out[0], masks, aux_probs=out[1])
        else:
            loss = seg_loss(out, masks)
        return loss, {}

    return fn


def _shuffle_plan(items):
    return lambda batch_size, rng: epoch_batches(items, batch_size, rng)


def _stratified_plan(items, n_groups):
    return lambda batch_size, rng: stratified_batches(items, batch_size, rng, n_groups=n_groups)


def train_baseline(config: TrainConfig, data: LoadedDataset, train_records=None, val_records=None) -> RegimeResult:
    """Fairness-through-unawareness training (also backs `balanced` when
    handed a balanced training subset, and `stratified` via plan choice)."""
    manifest = data.manifest
    train_records = manifest.records_for("train") if train_records is None else train_records
    val_records = manifest.records_for("val") if val_records is None else val_records
    if not train_records:
        raise ConfigError("empty training split")
    items = data.items(train_records)
    n_groups = manifest.n_groups

    net = build_seg_net(config.seg, config.seed)
    if config.regime == "stratified":
        plan_builder = _stratified_plan(items, n_groups)
    else:
        plan_builder = _shuffle_plan(items)
    history = _run_epochs(
        parameters=list(net.parameters()),
        epochs=config.epochs,
        batch_size=config.batch_size,
        lr0=config.lr0,
        momentum=config.momentum,
        power=config.poly_power,
        seed=config.seed,
        salt=SALT_BASELINE,
        plan_builder=plan_builder,
        batch_loss=_seg_batch_loss(net, data),
        phase=config.regime,
        on_epoch_end=lambda: validation_dsc(net, data, val_records, n_groups),
    )
    ckpt = checkpoint_from_net(net, config.seed, config.regime, config.epochs)
    return RegimeResult(regime=config.regime, seg=ckpt, history=history)


def train_stratified(config: TrainConfig, data: LoadedDataset) -> RegimeResult:
    if config.batch_size < data.manifest.n_groups:
        raise ConfigError("stratified regime requires batch_size >= number of groups")
    return train_baseline(config, data)


def train_meta(config: TrainConfig, data: LoadedDataset) -> RegimeResult:
    """Two-phase multi-task regime: independent pretraining, then joint
    optimization of combined loss seg + lambda * cls without deep
    supervision."""
    manifest = data.manifest
    train_records = manifest.records_for("train")
    val_records = manifest.records_for("val")
    if not train_records:
        raise ConfigError("empty training split")
    items = data.items(train_records)
    n_groups = manifest.n_groups
    num_classes = config.seg.num_classes

    seg_net = build_seg_net(config.seg, config.seed)
    cls_net = build_cls_net(config.cls, config.seed + 1)
    total_epochs = config.phase1_epochs + config.phase2_epochs

    history = _run_epochs(
        parameters=list(seg_net.parameters()),
        epochs=config.phase1_epochs,
        batch_size=config.batch_size,
        lr0=config.lr0,
        momentum=config.momentum,
        power=config.poly_power,
        seed=config.seed,
        salt=SALT_META_P1_SEG,
        plan_builder=_shuffle_plan(items),
        batch_loss=_seg_batch_loss(seg_net, data),
        phase="meta/seg_pretrain",
        on_epoch_end=lambda: validation_dsc(seg_net, data, val_records, n_groups),
        schedule_epochs=total_epochs,
    )

    def cls_batch_loss(batch_ids):
        images, masks, groups = data.batch(batch_ids)
        probs = cls_forward(cls_net, torch.cat([images, mask_to_channel(masks, num_classes)], dim=1))
        return cls_loss(probs, groups), {}

    history += _run_epochs(
        parameters=list(cls_net.parameters()),
        epochs=config.phase1_epochs,
        batch_size=config.batch_size,
        lr0=config.lr0,
        momentum=config.momentum,
        power=config.poly_power,
        seed=config.seed,
        salt=SALT_META_P1_CLS,
        plan_builder=_shuffle_plan(items),
        batch_loss=cls_batch_loss,
        phase="meta/cls_pretrain",
        on_epoch_end=lambda: {
            "val_cls_acc": classifier_accuracy(cls_net, data, val_records, num_classes)
        },
        schedule_epochs=total_epochs,
    )

    set_deep_supervision(seg_net, False)

    def joint_batch_loss(batch_ids):
        images, masks, groups = data.batch(batch_ids)
        probs = seg_forward(seg_net, images)
        l_seg = seg_loss(probs, masks)
        cls_in = compose_classifier_input(
            images, probs.detach() if config.detach_cls_input else probs
        )
        l_cls = cls_loss(cls_forward(cls_net, cls_in), groups)
        total = l_seg + config.meta_lambda * l_cls
        return total, {"seg_loss": l_seg.detach().item(), "cls_loss": l_cls.detach().item()}

    history += _run_epochs(
        parameters=list(seg_net.parameters()) + list(cls_net.parameters()),
        epochs=config.phase2_epochs,
        batch_size=config.batch_size,
        lr0=config.lr0,
        momentum=config.momentum,
        power=config.poly_power,
        seed=config.seed,
        salt=SALT_META_P2,
        plan_builder=_shuffle_plan(items),
        batch_loss=joint_batch_loss,
        phase="meta/joint",
        on_epoch_end=lambda: validation_dsc(seg_net, data, val_records, n_groups),
        epoch_offset=config.phase1_epochs,
        schedule_epochs=total_epochs,
    )

    return RegimeResult(
        regime="meta",
        seg=checkpoint_from_net(seg_net, config.seed, "meta", total_epochs),
        cls=checkpoint_from_net(cls_net, config.seed + 1, "meta", total_epochs),
        history=history,
    )


def finetune_group_models(config: TrainConfig, data: LoadedDataset) -> RegimeResult:
    """Protected-group models: shared pretraining, per-group fine-tuning."""
    manifest = data.manifest
    train_records = manifest.records_for("train")
    val_records = manifest.records_for("val")
    if not train_records:
        raise ConfigError("empty training split")
    n_groups = manifest.n_groups
    for g in range(n_groups):
        if not manifest.records_for("train", g):
            raise ConfigError(f"group {g} has no training subjects; cannot fine-tune")

    total_epochs = config.phase1_epochs + config.phase2_epochs
    base_net = build_seg_net(config.seg, config.seed)
    history = _run_epochs(
        parameters=list(base_net.parameters()),
        epochs=config.phase1_epochs,
        batch_size=config.batch_size,
        lr0=config.lr0,
        momentum=config.momentum,
        power=config.poly_power,
        seed=config.seed,
        salt=SALT_PROTECTED_BASE,
        plan_builder=_shuffle_plan(data.items(train_records)),
        batch_loss=_seg_batch_loss(base_net, data),
        phase="protected/base",
        on_epoch_end=lambda: validation_dsc(base_net, data, val_records, n_groups),
        schedule_epochs=total_epochs,
    )
    base_ckpt = checkpoint_from_net(base_net, config.seed, "protected", config.phase1_epochs)

    group_models = {}
    for g in range(n_groups):
        records_g = manifest.records_for("train", g)
        val_g = manifest.records_for("val", g)
        net_g = net_from_checkpoint(base_ckpt)
        batch_size = min(config.batch_size, len(records_g))
        history += [
            dict(entry, group=g)
            for entry in _run_epochs(
                parameters=list(net_g.parameters()),
                epochs=config.phase2_epochs,
                batch_size=batch_size,
                lr0=config.lr0,
                momentum=config.momentum,
                power=config.poly_power,
                seed=config.seed,
                salt=SALT_PROTECTED_FT + g,
                plan_builder=_shuffle_plan(data.items(records_g)),
                batch_loss=_seg_batch_loss(net_g, data),
                phase=f"protected/finetune_{g}",
                on_epoch_end=lambda net_g=net_g, val_g=val_g: validation_dsc(
                    net_g, data, val_g or val_records, n_groups
                ),
                epoch_offset=config.phase1_epochs,
                schedule_epochs=total_epochs,
            )
        ]
        group_models[g] = checkpoint_from_net(
            net_g, config.seed, "protected", total_epochs, extra={"group": g}
        )
    return RegimeResult(
        regime="protected",
        base=base_ckpt,
        group_models=group_models,
        history=history,
    )


def train_regime(config: TrainConfig, data: LoadedDataset, train_records=None, log_path: Path | None = None) -> RegimeResult:
    """Dispatch a regime run; optionally stream the epoch log to JSONL."""
    if config.regime in ("baseline", "balanced"):
        result = train_baseline(config, data, train_records=train_records)
    elif config.regime == "stratified":
        result = train_stratified(config, data)
    elif config.regime == "meta":
        result = train_meta(config, data)
    elif config.regime == "protected":
        result = finetune_group_models(config, data)
    else:  # pragma: no cover - guarded by TrainConfig validation
        raise ConfigError(f"unknown regime {config.regime!r}")
    if log_path is not None:
        write_train_log(result.history, log_path)
    return result


def write_train_log(history, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
