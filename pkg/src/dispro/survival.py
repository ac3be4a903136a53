"""Discrete-time survival math: cumulative survival, NLL, risk, concordance.

Hazards h^(j) are per-interval death probabilities in (0, 1); the survival
curve is S^(j) = prod_{z<=j} (1 - h^(z)) with S^(0) = 1. The training loss
is the censorship-aware negative log likelihood summed over patients, and
model ranking quality is measured with Harrell's concordance index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .cohort import SurvivalLabel

#: Floor applied inside every log for numerical safety.
LOG_FLOOR = 1e-12


class NoComparablePairsError(ValueError):
    """Concordance is undefined: the inputs contain no comparable pair."""


def cumulative_survival(hazards: torch.Tensor) -> torch.Tensor:
    """S^(j) = prod_{z=1..j} (1 - h^(z)); monotone nonincreasing from S^(0)=1."""
    return torch.cumprod(1.0 - hazards, dim=-1)


def _survival_with_origin(hazards: torch.Tensor) -> torch.Tensor:
    """Survival curve prefixed with S^(0) = 1 so index tau reads S^(tau)."""
    s = cumulative_survival(hazards)
    one = torch.ones(1, dtype=hazards.dtype, device=hazards.device)
    return torch.cat([one, s])


def nll_loss(hazards: torch.Tensor, label: SurvivalLabel) -> torch.Tensor:
    """Per-patient negative log likelihood of a discrete hazard vector.

    For censorship c and ground-truth interval tau:
        -[ c*log S^(tau) + (1-c)*log S^(tau-1) + (1-c)*log h^(tau) ]
    with S^(0) = 1 and every log clamped at LOG_FLOOR.
    """
    n_intervals = hazards.shape[-1]
    tau = label.interval
    if tau is None or not 1 <= tau <= n_intervals:
        raise ValueError(
            f"label interval {tau} out of range [1, {n_intervals}]"
        )
    c = float(label.censorship)
    s = _survival_with_origin(hazards)

    def _log(x: torch.Tensor) -> torch.Tensor:
        return torch.log(torch.clamp(x, min=LOG_FLOOR))

    term = (
        c * _log(s[tau])
        + (1.0 - c) * _log(s[tau - 1])
        + (1.0 - c) * _log(hazards[tau - 1])
    )
    return -term


def nll_loss_sum(
    hazard_rows: Sequence[torch.Tensor], labels: Sequence[SurvivalLabel]
) -> torch.Tensor:
    """Batch loss: sum of per-patient terms (not a mean)."""
    if len(hazard_rows) != len(labels):
        raise ValueError("hazards and labels must align")
    if not labels:
        raise ValueError("empty batch")
    total = None
    for h, lab in zip(hazard_rows, labels):
        term = nll_loss(h, lab)
        total = term if total is None else total + term
    return total


def risk_score(hazards: torch.Tensor) -> torch.Tensor:
    """Scalar risk = -sum_j S^(j); higher means less survival mass."""
    return -cumulative_survival(hazards).sum()


def concordance_index(
    risks: Sequence[float] | np.ndarray,
    labels: Sequence[SurvivalLabel],
) -> float:
    """Harrell's C over all comparable pairs.

    Pair (i, j) is comparable iff t_i < t_j and patient i is uncensored;
    it is concordant when risk_i > risk_j and counts half when risks tie.
    Raises NoComparablePairsError rather than returning a made-up 0.0.
    """
    risks = np.asarray(risks, dtype=np.float64)
    if risks.ndim != 1 or len(risks) != len(labels):
        raise ValueError("risks and labels must be 1-D and aligned")
    times = np.array([lab.time_months for lab in labels], dtype=np.float64)
    censor = np.array([lab.censorship for lab in labels], dtype=np.int64)

    earlier = times[:, None] < times[None, :]
    comparable = earlier & (censor[:, None] == 0)
    n_comparable = int(comparable.sum())
    if n_comparable == 0:
        raise NoComparablePairsError("no comparable pair (check times/censorship)")
    greater = risks[:, None] > risks[None, :]
    tied = risks[:, None] == risks[None, :]
    concordant_mass = (greater * 1.0 + tied * 0.5)[comparable].sum()
    return float(concordant_mass / n_comparable)


@dataclass(frozen=True)
class LossReport:
    """Breakdown of the combined training objective."""

    surv_cls: float
    ud_p: float
    ud_g: float
    alpha1: float
    alpha2: float
    total: float

    def __post_init__(self):
        for name in ("surv_cls", "ud_p", "ud_g", "alpha1", "alpha2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
