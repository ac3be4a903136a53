"""Stage 1: per-class prompt learning for a single modality.

Each of the 2*I_t survival classes gets its own learnable context block,
followed by a shared modality prefix and the class's name tokens. The CLS
output of the encoded prompt is the class representation; instance tokens
score against those representations, a Top-K mean pool turns the score
matrix into per-class logits, and the dead-class logits become hazards.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .cohort import Cohort, MissingMask, Modality, is_available
from .encoders import (
    EncoderError,
    PathologyAdapter,
    PathwayEncoder,
    SequenceTooLongError,
    TextEncoder,
    TokenSequence,
    reinit_linears,
    tokenize_text,
)
from .survival import nll_loss

logger = logging.getLogger("dispro.unipro")

PATHOLOGY_PREFIX = (
    "This is a pathology slide image from the patient with overall survival of"
)
GENOMICS_PREFIX = (
    "These are gene expression profiles from the patient with overall survival of"
)

PREFIX_TEXT = {
    Modality.PATHOLOGY: PATHOLOGY_PREFIX,
    Modality.GENOMICS: GENOMICS_PREFIX,
}

_DEAD_NAMES_4 = (
    "high risk, dead",
    "mid-high risk, dead",
    "mid-low risk, dead",
    "low risk, dead",
)
_ALIVE_NAMES_4 = (
    "short observation, alive",
    "mid-short observation, alive",
    "mid-long observation, alive",
    "long observation, alive",
)


def default_class_names(n_intervals: int) -> list[str]:
    """Names for the 2*I_t classes: dead bands first, then censored bands.

    Interval 1 is the shortest-time band, hence the highest risk.
    """
    if n_intervals == 4:
        return list(_DEAD_NAMES_4 + _ALIVE_NAMES_4)
    if n_intervals == 2:
        return [
            "high risk, dead",
            "low risk, dead",
            "short observation, alive",
            "long observation, alive",
        ]
    dead = [f"risk band {j}, dead" for j in range(1, n_intervals + 1)]
    alive = [f"observation band {j}, alive" for j in range(1, n_intervals + 1)]
    return dead + alive


class PromptTemplate(nn.Module):
    """Learnable per-class context plus frozen prefix/classname token ids."""

    def __init__(
        self,
        modality: Modality,
        n_intervals: int,
        context_length: int,
        model_dim: int,
        vocab_size: int,
        class_names: list[str] | None = None,
        seed: int = 0,
    ):
        super().__init__()
        self.modality = modality
        self.n_intervals = n_intervals
        names = class_names or default_class_names(n_intervals)
        if len(names) != 2 * n_intervals:
            raise ValueError(
                f"need {2 * n_intervals} class names, got {len(names)}"
            )
        self.class_names = tuple(names)
        self.prefix_ids = tuple(tokenize_text(PREFIX_TEXT[modality], vocab_size))
        self.classname_ids = tuple(
            tuple(tokenize_text(name, vocab_size)) for name in names
        )
        gen = torch.Generator().manual_seed(seed)
        self.context = nn.Parameter(
            torch.randn(2 * n_intervals, context_length, model_dim, generator=gen)
            * 0.02
        )

    @property
    def n_classes(self) -> int:
        return 2 * self.n_intervals

    @property
    def context_length(self) -> int:
        return self.context.shape[1]


def assembled_length(template: PromptTemplate, class_id: int) -> int:
    return (
        1
        + template.context_length
        + len(template.prefix_ids)
        + len(template.classname_ids[class_id - 1])
    )


def assemble_prompt(
    template: PromptTemplate, encoder: TextEncoder, class_id: int
) -> TokenSequence:
    """CLS, then the class's context rows, the shared prefix, the class name."""
    if not 1 <= class_id <= template.n_classes:
        raise ValueError(f"class_id {class_id} outside [1, {template.n_classes}]")
    length = assembled_length(template, class_id)
    if length > encoder.cfg.max_seq_len:
        raise SequenceTooLongError(
            f"assembled prompt length {length} exceeds max_seq_len "
            f"{encoder.cfg.max_seq_len}"
        )
    rows = torch.cat(
        [
            encoder.cls_embedding.unsqueeze(0),
            template.context[class_id - 1],
            encoder.embed(template.prefix_ids),
            encoder.embed(template.classname_ids[class_id - 1]),
        ]
    )
    return TokenSequence(rows, torch.ones(length, dtype=torch.bool))


def class_representations(
    template: PromptTemplate, encoder: TextEncoder
) -> torch.Tensor:
    """(2*I_t, D) matrix of encoded prompt CLS outputs, one row per class.

    Classname lengths differ, so the prompts are padded into one masked
    batch; gradients flow back into the context tokens.
    """
    seqs = [
        assemble_prompt(template, encoder, j)
        for j in range(1, template.n_classes + 1)
    ]
    max_len = max(len(s) for s in seqs)
    dtype = template.context.dtype
    rows = []
    mask = torch.zeros(len(seqs), max_len, dtype=torch.bool)
    for j, s in enumerate(seqs):
        pad = torch.zeros(max_len - len(s), encoder.cfg.model_dim, dtype=dtype)
        rows.append(torch.cat([s.tokens, pad]))
        mask[j, : len(s)] = True
    return encoder(torch.stack(rows), mask).cls


def similarity_matrix(tokens: torch.Tensor, reps: torch.Tensor) -> torch.Tensor:
    """Plain inner products: scores[i, j] = <token_i, rep_j>."""
    if tokens.ndim != 2 or reps.ndim != 2:
        raise EncoderError("tokens and reps must both be matrices")
    if tokens.shape[1] != reps.shape[1]:
        raise EncoderError(
            f"token width {tokens.shape[1]} != representation width {reps.shape[1]}"
        )
    return tokens @ reps.T


def topk_pool(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Mean of the top-min(k, M) entries of each column.

    Bags smaller than k fall back to the column mean. Ties cannot change
    the pooled value, and index-level determinism is handled where indices
    matter (token selection).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise ValueError("scores must be a nonempty (M, C) matrix")
    k_eff = min(k, scores.shape[0])
    top, _ = torch.topk(scores, k_eff, dim=0)
    return top.mean(dim=0)


def unipro_hazards(pooled: torch.Tensor, n_intervals: int) -> torch.Tensor:
    """Hazard of interval j = sigmoid of the pooled score of class (j, dead).

    Dead classes are ids 1..I_t, so this reads the first I_t entries; the
    censored-class scores steer class prediction rather than hazards.
    """
    if pooled.shape[-1] != 2 * n_intervals:
        raise ValueError(
            f"pooled vector has {pooled.shape[-1]} entries, expected {2 * n_intervals}"
        )
    return torch.sigmoid(pooled[..., :n_intervals])


def make_adapter(modality: Modality, in_dim: int, model_dim: int, seed: int = 0):
    if modality is Modality.PATHOLOGY:
        adapter = PathologyAdapter(in_dim, model_dim)
    else:
        adapter = PathwayEncoder(in_dim, model_dim)
    reinit_linears(adapter, torch.Generator().manual_seed(seed))
    return adapter


class UniProModel(nn.Module):
    """One modality's stage-1 bundle: template + adapter + shared encoder."""

    def __init__(
        self,
        modality: Modality,
        template: PromptTemplate,
        adapter: nn.Module,
        encoder: TextEncoder,
        pool_k: int,
    ):
        super().__init__()
        self.modality = modality
        self.template = template
        self.adapter = adapter
        self.encoder = encoder
        self.pool_k = pool_k

    @property
    def n_intervals(self) -> int:
        return self.template.n_intervals

    def class_representations(self) -> torch.Tensor:
        return class_representations(self.template, self.encoder)

    def bag_tokens(self, instances: np.ndarray | torch.Tensor) -> torch.Tensor:
        dtype = self.template.context.dtype
        x = torch.as_tensor(np.asarray(instances), dtype=dtype)
        return self.adapter(x)

    def hazards_for_bag(
        self, instances: np.ndarray | torch.Tensor, reps: torch.Tensor | None = None
    ) -> torch.Tensor:
        if reps is None:
            reps = self.class_representations()
        tokens = self.bag_tokens(instances)
        pooled = topk_pool(similarity_matrix(tokens, reps), self.pool_k)
        return unipro_hazards(pooled, self.n_intervals)


@dataclass
class Stage1Result:
    """Trained stage-1 state plus the frozen class-representation snapshot."""

    model: UniProModel
    class_reps: torch.Tensor  # detached (2*I_t, D) snapshot
    epoch_losses: list[float]


def stage1_objective(
    model: UniProModel,
    instances,
    label,
    class_ce_weight: float = 1.0,
    reps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Survival NLL of the dead-class hazards, plus the class cross-entropy."""
    if reps is None:
        reps = model.class_representations()
    tokens = model.bag_tokens(instances)
    pooled = topk_pool(similarity_matrix(tokens, reps), model.pool_k)
    loss = nll_loss(unipro_hazards(pooled, model.n_intervals), label)
    if class_ce_weight > 0:
        target = torch.tensor(label.class_id - 1)
        ce = torch.nn.functional.cross_entropy(
            pooled.unsqueeze(0), target.unsqueeze(0)
        )
        loss = loss + class_ce_weight * ce
    return loss


def build_unipro(
    modality: Modality,
    in_dim: int,
    n_intervals: int,
    encoder: TextEncoder,
    context_length: int = 8,
    pool_k: int = 8,
    class_names: list[str] | None = None,
    seed: int = 0,
) -> UniProModel:
    template = PromptTemplate(
        modality,
        n_intervals,
        context_length,
        encoder.cfg.model_dim,
        encoder.cfg.vocab_size,
        class_names=class_names,
        seed=seed,
    )
    adapter = make_adapter(modality, in_dim, encoder.cfg.model_dim, seed=seed + 1)
    return UniProModel(modality, template, adapter, encoder, pool_k)


def train_stage1(
    cohort: Cohort,
    modality: Modality,
    encoder: TextEncoder,
    mask: MissingMask | None = None,
    context_length: int = 8,
    pool_k: int = 8,
    lr: float = 2e-4,
    weight_decay: float = 1e-5,
    epochs: int = 30,
    seed: int = 0,
    class_ce_weight: float = 1.0,
    class_names: list[str] | None = None,
    model: UniProModel | None = None,
) -> Stage1Result:
    """Fit one modality's prompts and adapter per patient (batch size 1).

    The objective is the survival NLL of the dead-class hazards plus
    ``class_ce_weight`` times a cross-entropy over the pooled class scores
    (the prompt-classification view of the label). The CE term is what
    gives the censored-class anchors a gradient; without it they stay at
    initialization and inference-time class estimation degenerates. Set
    the weight to 0 for the pure hazard-NLL objective.

    Trains on every cohort patient whose bag survives the missing mask;
    the returned class representations are the post-training snapshot that
    stage 2 treats as frozen.
    """
    if cohort.n_intervals is None:
        raise ValueError("cohort must be discretized before stage-1 training")
    in_dim = (
        cohort.d_pathology if modality is Modality.PATHOLOGY else cohort.d_genomics
    )
    if model is None:
        model = build_unipro(
            modality,
            in_dim,
            cohort.n_intervals,
            encoder,
            context_length=context_length,
            pool_k=pool_k,
            class_names=class_names,
            seed=seed,
        )
    available = [p for p in cohort.patients if is_available(p, modality, mask)]
    if not available:
        raise ValueError(f"no patients with {modality.value} available for training")

    params = [model.template.context] + [
        p for p in model.adapter.parameters() if p.requires_grad
    ]
    params += [p for p in model.encoder.parameters() if p.requires_grad]
    optim = torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)

    order_rng = np.random.default_rng(seed)
    epoch_losses: list[float] = []
    for _ in range(epochs):
        running = 0.0
        for idx in order_rng.permutation(len(available)):
            patient = available[idx]
            optim.zero_grad(set_to_none=True)
            loss = stage1_objective(
                model, patient.bag(modality).instances, patient.label,
                class_ce_weight=class_ce_weight,
            )
            loss.backward()
            optim.step()
            running += loss.item()
        epoch_losses.append(running / len(available))
    logger.info(
        "stage-1 %s: NLL %.4f -> %.4f over %d epochs (%d patients)",
        modality.value,
        epoch_losses[0],
        epoch_losses[-1],
        epochs,
        len(available),
    )
    with torch.no_grad():
        snapshot = model.class_representations().detach().clone()
    return Stage1Result(model=model, class_reps=snapshot, epoch_losses=epoch_losses)
