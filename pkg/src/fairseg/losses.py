"""Training losses: compound cross-entropy + soft Dice, classifier CE.

Both losses act on probability maps (not logits) so they compose directly
with the forward functions and with hand-computed fixtures. Soft Dice is
averaged per sample and foreground class; deep-supervision head losses
are weighted (1, 1/2, 1/4, ...) from fine to coarse and renormalized.
"""

from __future__ import annotations

import torch

from .errors import ContractError

DICE_EPS = 1e-5
_LOG_FLOOR = 1e-12


def _check_targets(targets: torch.Tensor, num_classes: int):
    if targets.numel() == 0:
        raise ContractError("empty target tensor")
    if int(targets.min()) < 0 or int(targets.max()) >= num_classes:
        raise ContractError(f"invalid class index in targets (valid: 0..{num_classes - 1})")


def cross_entropy_from_probs(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the target class per pixel."""
    if probs.shape[0] != targets.shape[0] or probs.shape[-2:] != targets.shape[-2:]:
        raise ContractError(f"probs {tuple(probs.shape)} do not match targets {tuple(targets.shape)}")
    _check_targets(targets, probs.shape[1])
    picked = probs.gather(1, targets.unsqueeze(1).long()).clamp_min(_LOG_FLOOR)
    return -picked.log().mean()


def soft_dice_loss(probs: torch.Tensor, targets: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - soft Dice, averaged over samples and foreground classes."""
    if probs.shape[0] != targets.shape[0] or probs.shape[-2:] != targets.shape[-2:]:
        raise ContractError(f"probs {tuple(probs.shape)} do not match targets {tuple(targets.shape)}")
    num_classes = probs.shape[1]
    _check_targets(targets, num_classes)
    losses = []
    for c in range(1, num_classes):
        p = probs[:, c]
        y = (targets == c).to(probs.dtype)
        inter = (p * y).flatten(1).sum(dim=1)
        denom = p.flatten(1).sum(dim=1) + y.flatten(1).sum(dim=1)
        losses.append(1.0 - (2.0 * inter + eps) / (denom + eps))
    return torch.stack(losses, dim=1).mean()


def downsample_targets(targets: torch.Tensor, factor: int) -> torch.Tensor:
    """Nearest-neighbour label downsampling for deep-supervision heads."""
    return targets[:, ::factor, ::factor]


def seg_loss(probs: torch.Tensor, targets: torch.Tensor, aux_probs=None, eps: float = DICE_EPS) -> torch.Tensor:
    """Cross-entropy plus soft Dice; optional deep-supervision heads.

    aux_probs are lower-resolution probability maps, finest first; head
    weights are 1, 1/2, 1/4, ... (full resolution first), renormalized to
    sum to one.
    """
    main = cross_entropy_from_probs(probs, targets) + soft_dice_loss(probs, targets, eps)
    if not aux_probs:
        return main
    weights = [2.0**-i for i in range(len(aux_probs) + 1)]
    scale = sum(weights)
    total = (weights[0] / scale) * main
    h = targets.shape[-2]
    for w, aux in zip(weights[1:], aux_probs):
        factor = h // aux.shape[-2]
        if factor * aux.shape[-2] != h:
            raise ContractError("auxiliary head resolution does not divide the target resolution")
        small = downsample_targets(targets, factor)
        total = total + (w / scale) * (
            cross_entropy_from_probs(aux, small) + soft_dice_loss(aux, small, eps)
        )
    return total


def cls_loss(group_probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of group probabilities against integer labels."""
    if group_probs.shape[0] != labels.shape[0]:
        raise ContractError("batch sizes of probabilities and labels differ")
    _check_targets(labels, group_probs.shape[1])
    picked = group_probs.gather(1, labels.view(-1, 1).long()).clamp_min(_LOG_FLOOR)
    return -picked.log().mean()
