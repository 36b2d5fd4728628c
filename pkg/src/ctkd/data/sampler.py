"""Epoch plans alternating labeled and unlabeled samples one-to-one."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class PlanStep:
    step: int
    branch: str  # "labeled" | "unlabeled"
    case_id: str


EpochPlan = list[PlanStep]


def build_epoch_plan(
    labeled_ids: Sequence[str],
    unlabeled_ids: Sequence[str],
    epoch: int,
    seed: int = 0,
    include_unlabeled: bool = True,
) -> EpochPlan:
    """Every labeled case once, each followed by one unlabeled draw.

    The labeled order and the unlabeled draws use separate random streams, so
    the labeled sequence does not depend on the unlabeled pool.
    """
    if not labeled_ids:
        raise ValueError("labeled pool is empty")
    if include_unlabeled and not unlabeled_ids:
        raise ValueError("unlabeled pool is empty; pass include_unlabeled=False for supervised-only plans")
    rng_l = np.random.default_rng([seed, epoch, 0])
    order = [labeled_ids[i] for i in rng_l.permutation(len(labeled_ids))]
    if not include_unlabeled:
        return [PlanStep(i, "labeled", cid) for i, cid in enumerate(order)]

    rng_u = np.random.default_rng([seed, epoch, 1])
    n = len(order)
    replace = len(unlabeled_ids) < n
    draws = rng_u.choice(len(unlabeled_ids), size=n, replace=replace)
    plan: EpochPlan = []
    for i, (lid, u) in enumerate(zip(order, draws)):
        plan.append(PlanStep(2 * i, "labeled", lid))
        plan.append(PlanStep(2 * i + 1, "unlabeled", unlabeled_ids[int(u)]))
    return plan
