"""Two-stage prompt learning for survival prediction with missing modalities.

Stage 1 learns per-class prompt context tokens and a feature adapter for
each modality on its own (unimodal prompting); stage 2 fuses whichever
modalities a patient actually has, scores and selects their feature tokens
with the stage-1 class anchors, fills missing slots with learnable
placeholders, and distills the frozen unimodal knowledge into the imputed
outputs (multimodal prompting).
"""

from .cohort import (
    Bag,
    Cohort,
    CohortError,
    MissingMask,
    Modality,
    Patient,
    PRESET_COMBOS,
    SurvivalLabel,
    SynthConfig,
    build_missing_mask,
    discretize_cohort,
    discretize_times,
    generate_synthetic_cohort,
    kfold_split,
    load_manifest,
    save_manifest,
)
from .survival import (
    LossReport,
    NoComparablePairsError,
    concordance_index,
    cumulative_survival,
    nll_loss,
    nll_loss_sum,
    risk_score,
)

__all__ = [
    "Bag",
    "Cohort",
    "CohortError",
    "LossReport",
    "MissingMask",
    "Modality",
    "NoComparablePairsError",
    "PRESET_COMBOS",
    "Patient",
    "SurvivalLabel",
    "SynthConfig",
    "build_missing_mask",
    "concordance_index",
    "cumulative_survival",
    "discretize_cohort",
    "discretize_times",
    "generate_synthetic_cohort",
    "kfold_split",
    "load_manifest",
    "nll_loss",
    "nll_loss_sum",
    "risk_score",
    "save_manifest",
]
