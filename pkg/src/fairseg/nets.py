"""Small segmentation and group-classification networks.

SegNet is a compact encoder-decoder (skip connections, instance norm,
leaky ReLU) standing in for a full-scale segmentation framework at desk
scale; ClsNet is a small strided convnet with a global-average-pool head
that classifies the protected group from a 2-channel input (image plus a
differentiable encoding of the segmentation output).

All parameters are initialized deterministically from a seed with
fan-in-scaled normals and zero biases. Checkpoints are a JSON header plus
a raw little-endian parameter blob and round-trip bit-identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, ContractError, GradientError

CHECKPOINT_MAGIC = b"FSEGCKPT"
CHECKPOINT_FORMAT_VERSION = 1

_NORMS = ("instance", "batch", "none")
_NONLINS = ("leaky_relu", "relu")


@dataclass(frozen=True)
class SegNetConfig:
    levels: int = 3
    base_channels: int = 16
    num_classes: int = 4
    in_channels: int = 1
    norm: str = "instance"
    nonlinearity: str = "leaky_relu"
    deep_supervision: bool = False

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError("segmentation net needs at least 2 levels")
        if self.base_channels < 2:
            raise ConfigError("base_channels must be at least 2")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 output classes")
        if self.norm not in _NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.nonlinearity not in _NONLINS:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.levels - 1)

    def check_spatial(self, height: int, width: int):
        f = self.downsample_factor
        if height % f or width % f:
            raise ContractError(
                f"input {height}x{width} not divisible by {f} (levels={self.levels})"
            )


@dataclass(frozen=True)
class ClsNetConfig:
    in_channels: int = 2
    stages: int = 3
    base_channels: int = 16
    num_groups: int = 6
    norm: str = "instance"
    nonlinearity: str = "relu"

    def __post_init__(self):
        if self.stages < 1:
            raise ConfigError("classifier needs at least 1 stage")
        if self.num_groups < 2:
            raise ConfigError("classifier needs at least 2 groups")
        if self.base_channels < 2:
            raise ConfigError("base_channels must be at least 2")
        if self.norm not in _NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.nonlinearity not in _NONLINS:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")


def _norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True, track_running_stats=False)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.Identity()


def _nonlin(kind: str) -> nn.Module:
    if kind == "leaky_relu":
        return nn.LeakyReLU(0.01, inplace=True)
    return nn.ReLU(inplace=True)


def _conv_block(cin: int, cout: int, norm: str, nonlin: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        _norm_layer(norm, cout),
        _nonlin(nonlin),
        nn.Conv2d(cout, cout, 3, padding=1),
        _norm_layer(norm, cout),
        _nonlin(nonlin),
    )


class SegNet(nn.Module):
    def __init__(self, config: SegNetConfig):
        super().__init__()
        self.config = config
        c0 = config.base_channels
        channels = [c0 * 2**i for i in range(config.levels)]

        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for c in channels:
            self.encoders.append(_conv_block(cin, c, config.norm, config.nonlinearity))
            cin = c
        self.pool = nn.MaxPool2d(2)

        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in range(config.levels - 2, -1, -1):
            self.upsamplers.append(nn.ConvTranspose2d(channels[i + 1], channels[i], 2, stride=2))
            self.decoders.append(_conv_block(2 * channels[i], channels[i], config.norm, config.nonlinearity))

        self.head = nn.Conv2d(channels[0], config.num_classes, 1)
        # Auxiliary heads for deep supervision, one per decoder stage that
        # is below full resolution (coarsest first).
        self.aux_heads = nn.ModuleList(
            nn.Conv2d(channels[i], config.num_classes, 1)
            for i in range(config.levels - 2, 0, -1)
        )

    def forward(self, x: torch.Tensor):
        self.config.check_spatial(x.shape[-2], x.shape[-1])
        skips = []
        for i, enc in enumerate(self.encoders):
            if i > 0:
                x = self.pool(x)
            x = enc(x)
            skips.append(x)

        x = skips[-1]
        aux_logits = []
        for j, (up, dec) in enumerate(zip(self.upsamplers, self.decoders)):
            skip = skips[len(self.encoders) - 2 - j]
            x = dec(torch.cat([up(x), skip], dim=1))
            if j < len(self.aux_heads):
                aux_logits.append(self.aux_heads[j](x))
        logits = self.head(x)
        if self.config.deep_supervision:
            # Finest auxiliary scale first, matching the (1, 1/2, 1/4, ...)
            # loss weighting below the full-resolution head.
            return logits, list(reversed(aux_logits))
        return logits


class ClsNet(nn.Module):
    def __init__(self, config: ClsNetConfig):
        super().__init__()
        self.config = config
        layers = []
        cin = config.in_channels
        c = config.base_channels
        for _ in range(config.stages):
            layers += [
                nn.Conv2d(cin, c, 3, stride=2, padding=1),
                _norm_layer(config.norm, c),
                _nonlin(config.nonlinearity),
            ]
            cin, c = c, c * 2
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(cin, config.num_groups)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.config.in_channels:
            raise ContractError(
                f"classifier expects {self.config.in_channels} input channels, got {x.shape[1]}"
            )
        h = self.pool(self.features(x)).flatten(1)
        return self.fc(h)


def _fan_in(module: nn.Module) -> int:
    w = module.weight
    if isinstance(module, nn.ConvTranspose2d):
        return w.shape[0] * w.shape[2] * w.shape[3]
    if isinstance(module, nn.Conv2d):
        return w.shape[1] * w.shape[2] * w.shape[3]
    return w.shape[1]  # Linear


def init_params(net: nn.Module, seed: int) -> nn.Module:
    """Deterministic in-place init: fan-in-scaled normals, zero biases."""
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                gain = 2.0 ** 0.5
                std = gain / _fan_in(module) ** 0.5
                module.weight.normal_(0.0, std, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, (nn.InstanceNorm2d, nn.BatchNorm2d)):
                if module.weight is not None:
                    module.weight.fill_(1.0)
                if module.bias is not None:
                    module.bias.zero_()
    return net


def build_seg_net(config: SegNetConfig, seed: int) -> SegNet:
    return init_params(SegNet(config), seed)


def build_cls_net(config: ClsNetConfig, seed: int) -> ClsNet:
    return init_params(ClsNet(config), seed)


def seg_forward(net: SegNet, images: torch.Tensor):
    """Class-probability maps (N, K, H, W); with deep supervision also a
    list of lower-resolution probability maps, finest first."""
    if images.dim() != 4 or images.shape[1] != net.config.in_channels:
        raise ContractError(f"expected (N, {net.config.in_channels}, H, W) batch, got {tuple(images.shape)}")
    if not torch.isfinite(images).all():
        raise ContractError("non-finite values in input batch")
    out = net(images)
    if net.config.deep_supervision:
        logits, aux = out
        return torch.softmax(logits, dim=1), [torch.softmax(a, dim=1) for a in aux]
    return torch.softmax(out, dim=1)


def cls_forward(net: ClsNet, batch: torch.Tensor) -> torch.Tensor:
    """Group probabilities (N, G)."""
    return torch.softmax(net(batch), dim=1)


def predict_mask(probs) -> np.ndarray:
    """Per-pixel argmax labels; ties resolve to the lowest class index."""
    if isinstance(probs, torch.Tensor):
        probs = probs.detach().cpu().numpy()
    probs = np.asarray(probs)
    if probs.ndim == 3:
        return np.argmax(probs, axis=0).astype(np.uint8)
    if probs.ndim == 4:
        return np.argmax(probs, axis=1).astype(np.uint8)
    raise ContractError(f"probability maps must be (K,H,W) or (N,K,H,W), got shape {probs.shape}")


def compose_classifier_input(image: torch.Tensor, seg_probs: torch.Tensor) -> torch.Tensor:
    """2-channel classifier input: the image and the expected class index
    of the segmentation output scaled into [0, 1]."""
    if image.shape[-2:] != seg_probs.shape[-2:]:
        raise ContractError(
            f"spatial shapes differ: image {tuple(image.shape)} vs probs {tuple(seg_probs.shape)}"
        )
    k = seg_probs.shape[1]
    index = torch.arange(k, dtype=seg_probs.dtype, device=seg_probs.device).view(1, k, 1, 1)
    expected = (seg_probs * index).sum(dim=1, keepdim=True) / (k - 1)
    return torch.cat([image, expected], dim=1)


def mask_to_channel(mask: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Ground-truth analog of the expected-class-index channel."""
    return (mask.to(torch.float32) / (num_classes - 1)).unsqueeze(1)


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class CheckpointMeta:
    kind: str  # "seg" | "cls"
    config: dict
    seed: int
    regime: str
    epoch: int
    format_version: int = CHECKPOINT_FORMAT_VERSION
    extra: dict = field(default_factory=dict)


@dataclass
class Checkpoint:
    state: dict  # name -> np.ndarray
    meta: CheckpointMeta

    def clone(self) -> "Checkpoint":
        return Checkpoint(
            state={k: v.copy() for k, v in self.state.items()},
            meta=CheckpointMeta(**{**asdict(self.meta)}),
        )


def checkpoint_from_net(net: nn.Module, seed: int, regime: str, epoch: int, extra: dict | None = None) -> Checkpoint:
    kind = "seg" if isinstance(net, SegNet) else "cls"
    state = {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}
    for name, arr in state.items():
        if not np.isfinite(arr).all():
            raise GradientError(f"non-finite parameter {name!r} in checkpoint", parameter=name)
    return Checkpoint(
        state=state,
        meta=CheckpointMeta(kind=kind, config=asdict(net.config), seed=seed, regime=regime, epoch=epoch, extra=extra or {}),
    )


def net_from_checkpoint(ckpt: Checkpoint) -> nn.Module:
    if ckpt.meta.kind == "seg":
        net = SegNet(SegNetConfig(**ckpt.meta.config))
    elif ckpt.meta.kind == "cls":
        net = ClsNet(ClsNetConfig(**ckpt.meta.config))
    else:
        raise ConfigError(f"unknown checkpoint kind {ckpt.meta.kind!r}")
    net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.state.items()})
    return net


def save_checkpoint(ckpt: Checkpoint, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.state):
        arr = np.ascontiguousarray(ckpt.state[name])
        data = arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="C")
        tensors.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        blobs.append(data)
        offset += len(data)
    header = {
        "format_version": ckpt.meta.format_version,
        "kind": ckpt.meta.kind,
        "config": ckpt.meta.config,
        "seed": ckpt.meta.seed,
        "regime": ckpt.meta.regime,
        "epoch": ckpt.meta.epoch,
        "extra": ckpt.meta.extra,
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a checkpoint file")
    (header_len,) = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))
    header_start = len(CHECKPOINT_MAGIC) + 4
    header = json.loads(raw[header_start : header_start + header_len].decode("utf-8"))
    if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format version {header['format_version']}")
    blob_start = header_start + header_len
    state = {}
    for t in header["tensors"]:
        start = blob_start + t["offset"]
        arr = np.frombuffer(raw[start : start + t["nbytes"]], dtype=np.dtype(t["dtype"]))
        state[t["name"]] = arr.reshape(t["shape"]).copy()
    meta = CheckpointMeta(
        kind=header["kind"],
        config=header["config"],
        seed=header["seed"],
        regime=header["regime"],
        epoch=header["epoch"],
        format_version=header["format_version"],
        extra=header.get("extra", {}),
    )
    return Checkpoint(state=state, meta=meta)


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_parameter: str
    n_coordinates: int


def gradient_check(net: nn.Module, loss_fn, n_coordinates: int = 120, step: float = 1e-5, seed: int = 0) -> GradCheckResult:
    """Compare autograd gradients with central finite differences.

    `loss_fn(net)` must return a deterministic scalar. The net is moved to
    double precision; `n_coordinates` parameter entries are sampled at
    random across all tensors and perturbed by +-step.
    """
    net = net.double()
    params = [(name, p) for name, p in net.named_parameters() if p.requires_grad]
    loss = loss_fn(net)
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for (_, p), g in zip(params, grads)]
    for (name, _), g in zip(params, grads):
        if not torch.isfinite(g).all():
            raise GradientError(f"non-finite gradient for parameter {name!r}", parameter=name)

    coords = [(i, j) for i, (_, p) in enumerate(params) for j in range(p.numel())]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coordinates:
        chosen = rng.choice(len(coords), size=n_coordinates, replace=False)
        coords = [coords[int(c)] for c in chosen]

    max_rel = 0.0
    worst = params[0][0]
    with torch.no_grad():
        flat_views = [p.view(-1) for _, p in params]
    for i, j in coords:
        with torch.no_grad():
            orig = float(flat_views[i][j])
            flat_views[i][j] = orig + step
            loss_plus = float(loss_fn(net))
            flat_views[i][j] = orig - step
            loss_minus = float(loss_fn(net))
            flat_views[i][j] = orig
        fd = (loss_plus - loss_minus) / (2.0 * step)
        analytic = float(grads[i].view(-1)[j])
        rel = abs(analytic - fd) / max(1e-8, abs(analytic) + abs(fd))
        if rel > max_rel:
            max_rel = rel
            worst = params[i][0]
    return GradCheckResult(max_rel_error=max_rel, worst_parameter=worst, n_coordinates=len(coords))
