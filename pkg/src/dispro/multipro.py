"""Stage 2: multimodal fusion with scored token selection and distillation.

Feature tokens from whichever modalities a patient has are graded by three
signals in (0,1) each: similarity to the own-modality class anchor,
similarity to the other modality's anchor, and a learned self-score. The
top tokens are added onto learnable placeholder rows; missing modalities
keep bare placeholders. The fused CLS drives the survival head, while the
missing modality's output rows are pushed toward the frozen stage-1
anchors through the same hazard likelihood (distillation).
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .cohort import Cohort, MissingMask, Modality, Patient, is_available
from .encoders import EncoderError, TextEncoder, TokenSequence, reinit_linears
from .survival import LossReport, nll_loss, risk_score
from .unipro import Stage1Result, similarity_matrix, topk_pool, unipro_hazards

logger = logging.getLogger("dispro.multipro")


class FusionError(ValueError):
    pass


def class_to_interval(class_id: int, n_intervals: int) -> int:
    """Fold a class id back to its time interval, ignoring the censor bit."""
    if not 1 <= class_id <= 2 * n_intervals:
        raise ValueError(f"class_id {class_id} outside [1, {2 * n_intervals}]")
    return (class_id - 1) % n_intervals + 1


@dataclass
class ScoreBreakdown:
    """Per-token relevance components; total is their sum, one value per token."""

    uni: torch.Tensor
    cross: torch.Tensor
    self_: torch.Tensor
    total: torch.Tensor


class SelfScorer(nn.Module):
    """Input-dependent token score: sigmoid(w . tanh(W x)), in (0, 1)."""

    def __init__(self, model_dim: int, seed: int = 0):
        super().__init__()
        hidden = (model_dim + 1) // 2
        gen = torch.Generator().manual_seed(seed)
        self.W = nn.Parameter(torch.randn(hidden, model_dim, generator=gen) / model_dim**0.5)
        self.w = nn.Parameter(torch.randn(hidden, generator=gen) / hidden**0.5)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.W.shape[1]:
            raise EncoderError(
                f"self-scorer expects width {self.W.shape[1]}, got {tokens.shape[-1]}"
            )
        return torch.sigmoid(torch.tanh(tokens @ self.W.T) @ self.w)


def self_scores(tokens: torch.Tensor, scorer: SelfScorer) -> torch.Tensor:
    return scorer(tokens)


def unipro_scores(
    tokens: torch.Tensor,
    reps_own: torch.Tensor,
    reps_other: torch.Tensor,
    class_id: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sigmoid similarities of each token to class_id's own and cross anchors."""
    n_classes = reps_own.shape[0]
    if not 1 <= class_id <= n_classes:
        raise ValueError(f"class_id {class_id} outside [1, {n_classes}]")
    uni = torch.sigmoid(tokens @ reps_own[class_id - 1])
    cross = torch.sigmoid(tokens @ reps_other[class_id - 1])
    return uni, cross


def score_breakdown(
    tokens: torch.Tensor,
    reps_own: torch.Tensor,
    reps_other: torch.Tensor,
    class_id: int,
    scorer: SelfScorer,
) -> ScoreBreakdown:
    uni, cross = unipro_scores(tokens, reps_own, reps_other, class_id)
    self_ = self_scores(tokens, scorer)
    return ScoreBreakdown(uni=uni, cross=cross, self_=self_, total=uni + cross + self_)


def predict_tau(
    tokens_by_modality: dict[Modality, torch.Tensor],
    reps_p: torch.Tensor,
    reps_g: torch.Tensor,
    k: int,
) -> int:
    """Most plausible class id from pooled similarities against both anchor sets.

    Each available modality's tokens are scored against the pathology and
    genomics anchors, the two score matrices added elementwise, and Top-K
    pooled; with both modalities available the pooled vectors are summed.
    Ties break to the lowest class id.
    """
    pooled_sum = None
    for tokens in tokens_by_modality.values():
        if tokens is None or tokens.shape[0] == 0:
            continue
        combined = similarity_matrix(tokens, reps_p) + similarity_matrix(tokens, reps_g)
        pooled = topk_pool(combined, k)
        pooled_sum = pooled if pooled_sum is None else pooled_sum + pooled
    if pooled_sum is None:
        raise FusionError("no tokens available for class prediction")
    return int(np.argmax(pooled_sum.detach().numpy())) + 1


def select_tokens(
    tokens: torch.Tensor, totals: torch.Tensor, k_m: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pick the min(k_m, M) highest-total tokens, in selection (score) order.

    Ties break by descending value then ascending instance index; the
    returned index order is the order tokens occupy their placeholder slots.
    """
    if k_m < 1:
        raise ValueError(f"k_m must be >= 1, got {k_m}")
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise FusionError("empty bag")
    if totals.shape != (tokens.shape[0],):
        raise ValueError("one total score per token required")
    order = torch.argsort(totals, descending=True, stable=True)
    picked = order[: min(k_m, tokens.shape[0])]
    return tokens[picked], picked


class PlaceholderBank(nn.Module):
    """Learnable slot vectors per modality, seeded from fixed unit indicators."""

    def __init__(self, model_dim: int, k_pathology: int, k_genomics: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)

        def indicator() -> torch.Tensor:
            v = torch.randn(model_dim, generator=gen)
            return v / v.norm()

        ind_p, ind_g = indicator(), indicator()
        self.register_buffer("indicator_p", ind_p)
        self.register_buffer("indicator_g", ind_g)
        self.pathology = nn.Parameter(
            ind_p + torch.randn(k_pathology, model_dim, generator=gen) * 0.02
        )
        self.genomics = nn.Parameter(
            ind_g + torch.randn(k_genomics, model_dim, generator=gen) * 0.02
        )

    @property
    def k_pathology(self) -> int:
        return self.pathology.shape[0]

    @property
    def k_genomics(self) -> int:
        return self.genomics.shape[0]


def _fill_block(placeholders: torch.Tensor, selected: torch.Tensor | None) -> torch.Tensor:
    if selected is None:
        return placeholders
    n = selected.shape[0]
    if n > placeholders.shape[0]:
        raise FusionError(
            f"{n} selected tokens exceed {placeholders.shape[0]} placeholder slots"
        )
    if n < placeholders.shape[0]:
        pad = torch.zeros(
            placeholders.shape[0] - n, selected.shape[1], dtype=selected.dtype
        )
        selected = torch.cat([selected, pad])
    return placeholders + selected


def build_fusion_input(
    selected_p: torch.Tensor | None,
    selected_g: torch.Tensor | None,
    bank: PlaceholderBank,
    cls_embedding: torch.Tensor,
) -> TokenSequence:
    """CLS row, K_p pathology slots, K_g genomics slots; every position attends.

    Available-modality slots are placeholder + selected token (bare
    placeholder past the number of selected tokens); missing-modality slots
    are all bare placeholders.
    """
    if selected_p is None and selected_g is None:
        raise FusionError("both modalities absent; nothing to fuse")
    rows = torch.cat(
        [
            cls_embedding.unsqueeze(0),
            _fill_block(bank.pathology, selected_p),
            _fill_block(bank.genomics, selected_g),
        ]
    )
    length = 1 + bank.k_pathology + bank.k_genomics
    return TokenSequence(rows, torch.ones(length, dtype=torch.bool))


def distillation_loss(
    block: torch.Tensor,
    reps: torch.Tensor,
    label,
    k: int,
    n_intervals: int,
) -> torch.Tensor:
    """Survival NLL of the missing-modality output rows treated as a bag.

    The rows score against that modality's frozen class anchors, pool with
    effective K = min(k, rows), and pass through the same hazard mapping as
    stage 1, so the imputed block is supervised exactly like real tokens.
    """
    pooled = topk_pool(similarity_matrix(block, reps), k)
    hazards = unipro_hazards(pooled, n_intervals)
    return nll_loss(hazards, label)


def total_loss(
    surv_cls: torch.Tensor | float,
    ud_p: torch.Tensor | float,
    ud_g: torch.Tensor | float,
    alpha1: float = 1.0,
    alpha2: float = 1.0,
) -> tuple[torch.Tensor, LossReport]:
    """Combined objective: surv_cls + alpha1 * ud_p + alpha2 * ud_g."""
    surv_t = torch.as_tensor(surv_cls, dtype=torch.float64) if not torch.is_tensor(surv_cls) else surv_cls
    ud_p_t = torch.as_tensor(ud_p, dtype=surv_t.dtype) if not torch.is_tensor(ud_p) else ud_p
    ud_g_t = torch.as_tensor(ud_g, dtype=surv_t.dtype) if not torch.is_tensor(ud_g) else ud_g
    total = surv_t + alpha1 * ud_p_t + alpha2 * ud_g_t
    report = LossReport(
        surv_cls=float(surv_t.detach()),
        ud_p=float(ud_p_t.detach()),
        ud_g=float(ud_g_t.detach()),
        alpha1=alpha1,
        alpha2=alpha2,
        total=float(total.detach()),
    )
    return total, report


def cls_hazards(cls_vec: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Per-interval hazards from the fused CLS vector: sigmoid(linear)."""
    return torch.sigmoid(head(cls_vec))


@dataclass
class FusionForward:
    cls: torch.Tensor
    pathology_out: torch.Tensor  # (K_p, D)
    genomics_out: torch.Tensor  # (K_g, D)
    selected_p: torch.Tensor | None  # indices into the pathology bag
    selected_g: torch.Tensor | None
    tau: int
    attentions: tuple[torch.Tensor, ...]


@dataclass
class InferenceResult:
    hazards: torch.Tensor  # (I_t,)
    risk: float
    tau_hat: int
    attention_mass: np.ndarray  # (1 + K_p + K_g,)
    selected_p: np.ndarray | None
    selected_g: np.ndarray | None


def attention_received(attentions: tuple[torch.Tensor, ...]) -> np.ndarray:
    """Mean attention mass received per position over layers, heads, queries."""
    stacked = torch.stack([a.detach() for a in attentions])  # (layers, heads, L, L)
    return stacked.mean(dim=(0, 1, 2)).numpy()


class MultiProModel(nn.Module):
    """Fusion model: finetuned adapters, placeholder bank, scorers, CLS head.

    The stage-1 class representations live here as buffers: used for
    scoring and distillation, never trained.
    """

    def __init__(
        self,
        encoder: TextEncoder,
        adapter_p: nn.Module,
        adapter_g: nn.Module,
        class_reps_p: torch.Tensor,
        class_reps_g: torch.Tensor,
        n_intervals: int,
        pool_k: int,
        k_pathology: int,
        k_genomics: int,
        seed: int = 0,
    ):
        super().__init__()
        dim = encoder.cfg.model_dim
        if 1 + k_pathology + k_genomics > encoder.cfg.max_seq_len:
            raise FusionError(
                f"fusion length 1+{k_pathology}+{k_genomics} exceeds "
                f"max_seq_len {encoder.cfg.max_seq_len}"
            )
        self.encoder = encoder
        self.adapter_p = adapter_p
        self.adapter_g = adapter_g
        self.bank = PlaceholderBank(dim, k_pathology, k_genomics, seed=seed)
        self.scorer_p = SelfScorer(dim, seed=seed + 1)
        self.scorer_g = SelfScorer(dim, seed=seed + 2)
        self.cls_head = nn.Linear(dim, n_intervals)
        reinit_linears(self.cls_head, torch.Generator().manual_seed(seed + 3))
        self.register_buffer("class_reps_p", class_reps_p.detach().clone())
        self.register_buffer("class_reps_g", class_reps_g.detach().clone())
        self.n_intervals = n_intervals
        self.pool_k = pool_k

    def tokens_for(self, bag_instances, modality: Modality) -> torch.Tensor:
        dtype = self.bank.pathology.dtype
        x = torch.as_tensor(np.asarray(bag_instances), dtype=dtype)
        adapter = self.adapter_p if modality is Modality.PATHOLOGY else self.adapter_g
        return adapter(x)

    def _reps(self, modality: Modality) -> tuple[torch.Tensor, torch.Tensor]:
        if modality is Modality.PATHOLOGY:
            return self.class_reps_p, self.class_reps_g
        return self.class_reps_g, self.class_reps_p

    def _select(
        self,
        tokens: torch.Tensor,
        modality: Modality,
        tau: int,
        use_scoring: bool,
        select_rng: np.random.Generator | None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        k_m = self.bank.k_pathology if modality is Modality.PATHOLOGY else self.bank.k_genomics
        if use_scoring:
            reps_own, reps_other = self._reps(modality)
            scorer = self.scorer_p if modality is Modality.PATHOLOGY else self.scorer_g
            breakdown = score_breakdown(tokens, reps_own, reps_other, tau, scorer)
            return select_tokens(tokens, breakdown.total, k_m)
        if select_rng is None:
            raise ValueError("random token selection needs a Generator")
        m = tokens.shape[0]
        picked = torch.as_tensor(
            select_rng.choice(m, size=min(k_m, m), replace=False), dtype=torch.long
        )
        return tokens[picked], picked

    def fuse(
        self,
        bag_p,
        bag_g,
        tau: int | None,
        use_scoring: bool = True,
        select_rng: np.random.Generator | None = None,
    ) -> FusionForward:
        """Score, select, and fuse whatever is available.

        ``tau`` is the ground-truth class id during training; pass None to
        estimate it from the tokens (the inference path).
        """
        if bag_p is None and bag_g is None:
            raise FusionError("at least one modality required")
        tokens: dict[Modality, torch.Tensor | None] = {
            Modality.PATHOLOGY: None,
            Modality.GENOMICS: None,
        }
        if bag_p is not None:
            tokens[Modality.PATHOLOGY] = self.tokens_for(bag_p, Modality.PATHOLOGY)
        if bag_g is not None:
            tokens[Modality.GENOMICS] = self.tokens_for(bag_g, Modality.GENOMICS)
        if tau is None:
            present = {m: t for m, t in tokens.items() if t is not None}
            tau = predict_tau(
                present, self.class_reps_p, self.class_reps_g, self.pool_k
            )

        selected: dict[Modality, tuple[torch.Tensor, torch.Tensor] | None] = {}
        for modality in (Modality.PATHOLOGY, Modality.GENOMICS):
            t = tokens[modality]
            selected[modality] = (
                None
                if t is None
                else self._select(t, modality, tau, use_scoring, select_rng)
            )

        sel_p = selected[Modality.PATHOLOGY]
        sel_g = selected[Modality.GENOMICS]
        seq = build_fusion_input(
            sel_p[0] if sel_p else None,
            sel_g[0] if sel_g else None,
            self.bank,
            self.encoder.cls_embedding,
        )
        out = self.encoder(seq.tokens, seq.attention_mask)
        k_p = self.bank.k_pathology
        return FusionForward(
            cls=out.cls,
            pathology_out=out.hidden[1 : 1 + k_p],
            genomics_out=out.hidden[1 + k_p :],
            selected_p=sel_p[1] if sel_p else None,
            selected_g=sel_g[1] if sel_g else None,
            tau=tau,
            attentions=out.attentions,
        )

    def infer(
        self,
        bag_p=None,
        bag_g=None,
        use_scoring: bool = True,
        select_rng: np.random.Generator | None = None,
    ) -> InferenceResult:
        with torch.no_grad():
            fwd = self.fuse(bag_p, bag_g, tau=None, use_scoring=use_scoring,
                            select_rng=select_rng)
            hazards = cls_hazards(fwd.cls, self.cls_head)
            risk = float(risk_score(hazards))
        return InferenceResult(
            hazards=hazards,
            risk=risk,
            tau_hat=fwd.tau,
            attention_mass=attention_received(fwd.attentions),
            selected_p=None if fwd.selected_p is None else fwd.selected_p.numpy(),
            selected_g=None if fwd.selected_g is None else fwd.selected_g.numpy(),
        )


@dataclass
class Stage2Result:
    model: MultiProModel
    epoch_losses: list[float]
    final_report: LossReport


def patient_loss(
    model: MultiProModel,
    patient: Patient,
    mask: MissingMask | None,
    alpha1: float,
    alpha2: float,
    use_scoring: bool = True,
    select_rng: np.random.Generator | None = None,
    tau_source: str = "predicted",
) -> tuple[torch.Tensor, LossReport]:
    """Combined stage-2 objective for one patient under the missing mask.

    The survival head always contributes; each distillation term fires only
    when its modality is effectively missing (absent or masked) for this
    patient, matching the per-modality sums of the objective.

    ``tau_source`` picks the class anchor that grades tokens for selection:
    "predicted" estimates it from the tokens exactly as inference does
    (keeping training and inference selections identically distributed),
    "label" uses the ground-truth class id. Label-anchored selection lets
    the fusion encoder read the label off the selection pattern itself and
    collapses at inference, where only the predicted anchor exists; the
    distillation and survival supervision use the true label either way.
    """
    if tau_source not in ("predicted", "label"):
        raise ValueError(f"unknown tau_source {tau_source!r}")
    has_p = is_available(patient, Modality.PATHOLOGY, mask)
    has_g = is_available(patient, Modality.GENOMICS, mask)
    if not has_p and not has_g:
        raise FusionError(
            f"patient {patient.patient_id!r} has no available modality under the mask"
        )
    bag_p = patient.pathology.instances if has_p else None
    bag_g = patient.genomics.instances if has_g else None
    fwd = model.fuse(
        bag_p, bag_g,
        tau=patient.label.class_id if tau_source == "label" else None,
        use_scoring=use_scoring,
        select_rng=select_rng,
    )
    surv = nll_loss(cls_hazards(fwd.cls, model.cls_head), patient.label)
    zero = torch.zeros((), dtype=surv.dtype)
    ud_p = zero
    ud_g = zero
    if not has_p:
        ud_p = distillation_loss(
            fwd.pathology_out, model.class_reps_p, patient.label,
            model.pool_k, model.n_intervals,
        )
    if not has_g:
        ud_g = distillation_loss(
            fwd.genomics_out, model.class_reps_g, patient.label,
            model.pool_k, model.n_intervals,
        )
    return total_loss(surv, ud_p, ud_g, alpha1, alpha2)


def build_multipro(
    stage1_p: Stage1Result,
    stage1_g: Stage1Result,
    k_pathology: int,
    k_genomics: int,
    seed: int = 0,
) -> MultiProModel:
    """Assemble the stage-2 model from stage-1 artifacts.

    Adapters are deep-copied so finetuning never mutates the stage-1
    results; class representations enter as frozen buffers.
    """
    encoder = stage1_p.model.encoder
    if encoder is not stage1_g.model.encoder:
        raise FusionError("both stage-1 models must share one encoder")
    return MultiProModel(
        encoder=encoder,
        adapter_p=copy.deepcopy(stage1_p.model.adapter),
        adapter_g=copy.deepcopy(stage1_g.model.adapter),
        class_reps_p=stage1_p.class_reps,
        class_reps_g=stage1_g.class_reps,
        n_intervals=stage1_p.model.n_intervals,
        pool_k=stage1_p.model.pool_k,
        k_pathology=k_pathology,
        k_genomics=k_genomics,
        seed=seed,
    )


def train_stage2(
    cohort: Cohort,
    mask: MissingMask | None,
    stage1_p: Stage1Result,
    stage1_g: Stage1Result,
    k_pathology: int = 16,
    k_genomics: int = 16,
    alpha1: float = 1.0,
    alpha2: float = 1.0,
    lr: float = 2e-4,
    weight_decay: float = 1e-5,
    epochs: int = 30,
    seed: int = 0,
    use_scoring: bool = True,
    tau_source: str = "predicted",
    model: MultiProModel | None = None,
) -> Stage2Result:
    """Optimize the fusion objective over the masked training cohort.

    Trains adapters (continuing from stage 1), placeholders, self-scorers,
    the CLS head, and the encoder when it is configured trainable. Class
    representations and stage-1 context tokens stay untouched; batch size
    is 1. ``tau_source`` controls the anchor used for token scoring (see
    patient_loss).
    """
    if cohort.n_intervals is None:
        raise ValueError("cohort must be discretized before stage-2 training")
    if model is None:
        model = build_multipro(stage1_p, stage1_g, k_pathology, k_genomics, seed=seed)

    trainable = [p for p in model.parameters() if p.requires_grad]
    optim = torch.optim.Adam(trainable, lr=lr, weight_decay=weight_decay)

    patients = [
        p
        for p in cohort.patients
        if is_available(p, Modality.PATHOLOGY, mask)
        or is_available(p, Modality.GENOMICS, mask)
    ]
    if len(patients) < len(cohort.patients):
        logger.warning(
            "%d patients have no available modality under the mask and are skipped",
            len(cohort.patients) - len(patients),
        )
    if not patients:
        raise FusionError("no trainable patients")

    order_rng = np.random.default_rng(seed)
    select_rng = np.random.default_rng(seed + 1)
    epoch_losses: list[float] = []
    report = None
    for _ in range(epochs):
        running = 0.0
        for idx in order_rng.permutation(len(patients)):
            optim.zero_grad(set_to_none=True)
            loss, report = patient_loss(
                model, patients[idx], mask, alpha1, alpha2,
                use_scoring=use_scoring, select_rng=select_rng,
                tau_source=tau_source,
            )
            loss.backward()
            optim.step()
            running += float(loss.detach())
        epoch_losses.append(running / len(patients))
    logger.info(
        "stage-2: loss %.4f -> %.4f over %d epochs (%d patients)",
        epoch_losses[0],
        epoch_losses[-1],
        epochs,
        len(patients),
    )
    return Stage2Result(model=model, epoch_losses=epoch_losses, final_report=report)
