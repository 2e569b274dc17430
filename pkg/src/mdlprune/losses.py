"""Loss components and multiplier dynamics.

Three pieces combine into the training objective: the classification
cross-entropy (from the autograd module), a hinge budget penalty on each
domain's mean switch activity, and a parameter-sharing penalty computed over
the straight-through binarized masks of all domains so its gradient reaches
every domain's real-valued switches.

Multipliers are not learned by gradient descent: the budget multiplier and,
in learned mode, the sharing weight follow a projected ascent rule on their
constraint violation (grow while violated, decay to zero and clamp there).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import autograd as ag
from .autograd import Tensor

__all__ = [
    "BudgetState",
    "SharingState",
    "ConstraintValues",
    "budget_loss",
    "soft_union",
    "union_all",
    "intersection_all",
    "sharing_intersection",
    "sharing_union",
    "sharing_jaccard",
    "sharing_loss",
    "total_loss",
    "update_multipliers",
]

SHARING_KINDS = ("intersection", "union", "jaccard", "none")


@dataclass
class BudgetState:
    """Budget fraction plus its nonnegative multiplier for one domain."""

    budget: float
    multiplier: float = 0.0
    ascent_lr: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.budget <= 1.0:
            raise ValueError(f"budget must be in [0,1], got {self.budget}")
        if self.multiplier < 0:
            raise ValueError("multiplier must be nonnegative")


@dataclass
class SharingState:
    """Kind and importance weight of the parameter-sharing penalty."""

    kind: str
    weight: float = 0.0
    mode: str = "learned"  # "fixed" leaves weight untouched
    total_switches: int = 0
    ascent_lr: float = 0.1

    def __post_init__(self):
        if self.kind not in SHARING_KINDS:
            raise ValueError(f"unknown sharing kind {self.kind!r}")
        if self.mode not in ("fixed", "learned"):
            raise ValueError(f"unknown sharing mode {self.mode!r}")
        if self.weight < 0:
            raise ValueError("sharing weight must be nonnegative")


@dataclass
class ConstraintValues:
    """Violation terms observed at one step, fed to the ascent updates."""

    budget_gaps: Sequence[float] = field(default_factory=list)
    sharing_gap: Optional[float] = None


def budget_loss(mask_mean: Tensor, st: BudgetState) -> Tensor:
    """max(0, multiplier * (mask_mean - budget)); gradient reaches the
    switches through the mean."""
    return ag.relu(ag.affine(mask_mean, st.multiplier, -st.multiplier * st.budget))


def soft_union(a: Tensor, b: Tensor) -> Tensor:
    """a + b - a*b elementwise; equals boolean OR on binary inputs and is
    differentiable in both arguments."""
    return ag.sub(ag.add(a, b), ag.mul(a, b))


def union_all(masks: Sequence[Tensor]) -> Tensor:
    acc = masks[0]
    for m in masks[1:]:
        acc = soft_union(acc, m)
    return acc


def intersection_all(masks: Sequence[Tensor]) -> Tensor:
    acc = masks[0]
    for m in masks[1:]:
        acc = ag.mul(acc, m)
    return acc


def _check_masks(masks: Sequence[Tensor], st: SharingState):
    if len(masks) < 2:
        raise ValueError(f"sharing losses need >= 2 domains, got {len(masks)}")
    m = masks[0].size
    for t in masks[1:]:
        if t.size != m:
            raise ValueError(f"mask length mismatch: {t.size} vs {m}")
    if st.total_switches and st.total_switches != m:
        raise ValueError(
            f"sharing state expects {st.total_switches} switches, masks have {m}")
    return m


def sharing_intersection(masks: Sequence[Tensor], st: SharingState,
                         bs: BudgetState) -> Tensor:
    """Penalize an intersection smaller than the budgeted switch count."""
    m = _check_masks(masks, st)
    if bs.budget <= 0:
        raise ValueError("intersection sharing loss needs a positive budget")
    inter = ag.tsum(intersection_all(masks))
    # weight * (1 - |inter| / (M * budget)), hinged at zero
    return ag.relu(ag.affine(inter, -st.weight / (m * bs.budget), st.weight))


def sharing_union(masks: Sequence[Tensor], st: SharingState,
                  bs: BudgetState) -> Tensor:
    """Penalize a union using more switches than the budget allows."""
    m = _check_masks(masks, st)
    uni = ag.tsum(union_all(masks))
    return ag.relu(ag.affine(uni, st.weight / m, -st.weight * bs.budget))


def sharing_jaccard(masks: Sequence[Tensor], st: SharingState) -> Tensor:
    """Penalize the complement of the Jaccard index; budget-free."""
    _check_masks(masks, st)
    uni = ag.tsum(union_all(masks))
    if float(uni.data) == 0.0:
        return Tensor(0.0)  # all-empty masks: defined as no penalty
    inter = ag.tsum(intersection_all(masks))
    jac = ag.div(inter, uni)
    return ag.relu(ag.affine(jac, -st.weight, st.weight))


def sharing_loss(masks: Sequence[Tensor], st: SharingState,
                 bs: BudgetState) -> Tensor:
    if st.kind == "none":
        return Tensor(0.0)
    if st.kind == "intersection":
        return sharing_intersection(masks, st, bs)
    if st.kind == "union":
        return sharing_union(masks, st, bs)
    return sharing_jaccard(masks, st)


def sharing_gap(masks_counts: Sequence[float], union_count: float,
                inter_count: float, st: SharingState, budget: float,
                total: int) -> float:
    """Constraint term of the active sharing loss, for the ascent update."""
    if st.kind == "union":
        return union_count / total - budget
    if st.kind == "intersection":
        return 1.0 - inter_count / (total * budget)
    if st.kind == "jaccard":
        return 1.0 - (inter_count / union_count if union_count > 0 else 1.0)
    return 0.0


def total_loss(ce: Tensor, lb: Tensor, lps: Tensor) -> Tensor:
    return ag.add(ag.add(ce, lb), lps)


def update_multipliers(budget_states: Sequence[BudgetState],
                       sharing: Optional[SharingState],
                       violations: ConstraintValues):
    """Projected ascent on constraint violations, once per optimizer step.

    Budget multipliers grow while their domain exceeds the budget and decay
    toward the zero clamp otherwise. A learned sharing weight follows the
    same rule on its own constraint term; a fixed one is left untouched.
    """
    if len(violations.budget_gaps) != len(budget_states):
        raise ValueError("one budget gap per budget state required")
    for bs, gap in zip(budget_states, violations.budget_gaps):
        bs.multiplier = max(0.0, bs.multiplier + bs.ascent_lr * gap)
    if (sharing is not None and sharing.mode == "learned"
            and sharing.kind != "none" and violations.sharing_gap is not None):
        sharing.weight = max(
            0.0, sharing.weight + sharing.ascent_lr * violations.sharing_gap)
