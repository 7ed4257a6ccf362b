"""Batch plans: plain per-epoch shuffling and group-stratified sampling.

A stratified plan gives every protected group floor(B/G) or ceil(B/G)
slots in every batch (the remainder rotates across batches). The epoch
length is tied to the largest group: ceil(N_max * G / B) batches, so each
majority sample is drawn about once per epoch while smaller groups are
re-used through freshly shuffled passes over their samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class BatchPlan:
    batches: list  # list of batches; each batch is a list of sample ids
    group_of: dict = field(default_factory=dict)  # sample id -> group tag

    @property
    def n_batches(self) -> int:
        return len(self.batches)

    def batch_group_counts(self, index: int, n_groups: int) -> list[int]:
        counts = [0] * n_groups
        for sample_id in self.batches[index]:
            counts[self.group_of[sample_id]] += 1
        return counts

    def all_ids(self) -> list:
        return [sid for batch in self.batches for sid in batch]


def epoch_batches(items, batch_size: int, rng: np.random.Generator) -> BatchPlan:
    """One random permutation chopped into batches (last may be short)."""
    items = list(items)
    if not items:
        raise ConfigError("empty training set")
    if batch_size < 1:
        raise ConfigError("batch size must be positive")
    if batch_size > len(items):
        raise ConfigError(f"batch size {batch_size} exceeds training size {len(items)}")
    order = rng.permutation(len(items))
    ids = [items[i][0] for i in order]
    batches = [ids[i : i + batch_size] for i in range(0, len(ids), batch_size)]
    return BatchPlan(batches=batches, group_of={sid: g for sid, g in items})


def stratified_batches(items, batch_size: int, rng: np.random.Generator, n_groups: int | None = None) -> BatchPlan:
    """Equal per-group representation in every batch.

    Small groups are re-drawn through reshuffled full passes, so over an
    epoch each member of a group appears either floor(T/n) or ceil(T/n)
    times, where T is the group's total slot count.
    """
    items = list(items)
    if not items:
        raise ConfigError("empty training set")
    if n_groups is None:
        n_groups = max(g for _, g in items) + 1
    if batch_size < n_groups:
        raise ConfigError(f"batch size {batch_size} below group count {n_groups}")

    members = [[] for _ in range(n_groups)]
    for sid, g in items:
        members[g].append(sid)
    for g, mem in enumerate(members):
        if not mem:
            raise ConfigError(f"group {g} has no training samples")

    n_max = max(len(m) for m in members)
    base, extra = divmod(batch_size, n_groups)
    n_batches = math.ceil(n_max * n_groups / batch_size)

    # Per-batch quotas: `extra` groups per batch get one additional slot,
    # rotating so every group is topped up equally often.
    quotas = np.full((n_batches, n_groups), base, dtype=int)
    for i in range(n_batches):
        for k in range(extra):
            quotas[i][(i * extra + k) % n_groups] += 1

    totals = quotas.sum(axis=0)
    sequences = []
    for g in range(n_groups):
        seq = []
        while len(seq) < totals[g]:
            order = rng.permutation(len(members[g]))
            seq.extend(members[g][i] for i in order)
        sequences.append(seq[: totals[g]])

    cursors = [0] * n_groups
    batches = []
    for i in range(n_batches):
        batch = []
        for g in range(n_groups):
            q = int(quotas[i][g])
            batch.extend(sequences[g][cursors[g] : cursors[g] + q])
            cursors[g] += q
        batches.append(batch)
    return BatchPlan(batches=batches, group_of={sid: g for sid, g in items})
