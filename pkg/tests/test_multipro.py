import math

import numpy as np
import pytest
import torch

from dispro.cohort import (
    Modality,
    MissingMask,
    SurvivalLabel,
    SynthConfig,
    build_missing_mask,
    discretize_cohort,
    generate_synthetic_cohort,
)
from dispro.encoders import EncoderConfig, TextEncoder
from dispro.multipro import (
    FusionError,
    MultiProModel,
    PlaceholderBank,
    SelfScorer,
    attention_received,
    build_fusion_input,
    build_multipro,
    class_to_interval,
    cls_hazards,
    distillation_loss,
    patient_loss,
    predict_tau,
    score_breakdown,
    select_tokens,
    self_scores,
    total_loss,
    train_stage2,
    unipro_scores,
)
from dispro.survival import nll_loss
from dispro.unipro import (
    Stage1Result,
    build_unipro,
    similarity_matrix,
    topk_pool,
    train_stage1,
    unipro_hazards,
)

from gradcheck import finite_difference_check


def _encoder(trainable=False, model_dim=8, n_layers=1, max_seq_len=64, seed=3):
    cfg = EncoderConfig(
        model_dim=model_dim,
        n_layers=n_layers,
        n_heads=2,
        mlp_ratio=2,
        max_seq_len=max_seq_len,
        vocab_size=128,
        trainable_encoder=trainable,
    )
    return TextEncoder(cfg, embedding_seed=seed)


def _micro_cohort(n=12, seed=0, n_intervals=2):
    cfg = SynthConfig(
        n_patients=n,
        bag_size_pathology=5,
        bag_size_genomics=4,
        d_pathology=5,
        d_genomics=6,
        seed=seed,
    )
    return discretize_cohort(generate_synthetic_cohort(cfg), n_intervals)


def _micro_stage1(encoder, cohort, seed=0):
    up_p = build_unipro(
        Modality.PATHOLOGY, cohort.d_pathology, cohort.n_intervals, encoder,
        context_length=2, pool_k=2, seed=seed,
    )
    up_g = build_unipro(
        Modality.GENOMICS, cohort.d_genomics, cohort.n_intervals, encoder,
        context_length=2, pool_k=2, seed=seed + 10,
    )
    s1p = Stage1Result(up_p, up_p.class_representations().detach().clone(), [])
    s1g = Stage1Result(up_g, up_g.class_representations().detach().clone(), [])
    return s1p, s1g


class TestClassToInterval:
    def test_folds_censor_bit(self):
        assert class_to_interval(1, 4) == 1
        assert class_to_interval(4, 4) == 4
        assert class_to_interval(5, 4) == 1
        assert class_to_interval(8, 4) == 4

    def test_range_checked(self):
        with pytest.raises(ValueError):
            class_to_interval(9, 4)


class TestSelfScores:
    def test_zero_w_gives_half(self):
        scorer = SelfScorer(8, seed=0)
        with torch.no_grad():
            scorer.w.zero_()
        out = self_scores(torch.randn(5, 8), scorer)
        np.testing.assert_allclose(out.detach().numpy(), 0.5)

    def test_permutation_equivariance(self):
        scorer = SelfScorer(8, seed=1)
        tokens = torch.randn(6, 8)
        perm = [3, 1, 5, 0, 2, 4]
        a = self_scores(tokens, scorer).detach().numpy()
        b = self_scores(tokens[perm], scorer).detach().numpy()
        np.testing.assert_allclose(b, a[perm], atol=1e-7)

    def test_range(self):
        scorer = SelfScorer(8, seed=2)
        out = self_scores(torch.randn(100, 8) * 10, scorer)
        assert (out > 0).all() and (out < 1).all()

    def test_gradient_check(self):
        scorer = SelfScorer(6, seed=3).double()
        tokens = torch.randn(4, 6, dtype=torch.float64)
        finite_difference_check(
            lambda: self_scores(tokens, scorer).sum(), scorer.parameters()
        )


class TestUniProScores:
    def test_orthogonal_token_is_half_half(self):
        reps = torch.zeros(4, 3)
        reps[0, 0] = 1.0
        token = torch.tensor([[0.0, 1.0, 0.0]])
        uni, cross = unipro_scores(token, reps, reps.clone(), 1)
        assert uni.item() == pytest.approx(0.5)
        assert cross.item() == pytest.approx(0.5)

    def test_scaling_preserves_ordering(self):
        rng = np.random.default_rng(0)
        tokens = torch.tensor(rng.normal(size=(10, 6)))
        reps = torch.tensor(rng.normal(size=(4, 6)))
        uni, _ = unipro_scores(tokens, reps, reps, 2)
        uni_scaled, _ = unipro_scores(tokens, reps * 3.7, reps, 2)
        assert np.array_equal(
            np.argsort(uni.numpy()), np.argsort(uni_scaled.numpy())
        )

    def test_hand_computed_three_tokens(self):
        tokens = torch.tensor([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]], dtype=torch.float64)
        reps_own = torch.tensor([[0.5, -0.5], [1.0, 1.0]], dtype=torch.float64)
        reps_other = torch.tensor([[2.0, 0.0], [0.0, -1.0]], dtype=torch.float64)
        uni, cross = unipro_scores(tokens, reps_own, reps_other, 2)
        want_uni = [1 / (1 + math.exp(-v)) for v in (1.0, 2.0, 2.0)]
        want_cross = [1 / (1 + math.exp(-v)) for v in (0.0, -2.0, -1.0)]
        np.testing.assert_allclose(uni.numpy(), want_uni, atol=1e-10)
        np.testing.assert_allclose(cross.numpy(), want_cross, atol=1e-10)

    def test_breakdown_sum_exact(self):
        rng = np.random.default_rng(5)
        tokens = torch.tensor(rng.normal(size=(7, 8)), dtype=torch.float64)
        reps = torch.tensor(rng.normal(size=(4, 8)), dtype=torch.float64)
        scorer = SelfScorer(8, seed=4).double()
        bd = score_breakdown(tokens, reps, reps * 0.5, 3, scorer)
        np.testing.assert_array_equal(
            bd.total.detach().numpy(),
            (bd.uni + bd.cross + bd.self_).detach().numpy(),
        )
        total = bd.total.detach().numpy()
        assert (total > 0).all() and (total < 3).all()


def _predict_tau_oracle(tokens_by_modality, reps_p, reps_g, k):
    n_classes = reps_p.shape[0]
    best_j, best_v = None, -np.inf
    for j in range(n_classes):
        value = 0.0
        any_tokens = False
        for tokens in tokens_by_modality.values():
            if tokens is None:
                continue
            any_tokens = True
            scores = [
                float(t @ reps_p[j]) + float(t @ reps_g[j]) for t in tokens
            ]
            scores.sort(reverse=True)
            kk = min(k, len(scores))
            value += sum(scores[:kk]) / kk
        if not any_tokens:
            raise ValueError
        if value > best_v + 1e-12:
            best_v, best_j = value, j
    return best_j + 1


class TestPredictTau:
    def test_constructed_separation(self):
        reps = torch.eye(4)
        tokens = torch.zeros(3, 4)
        tokens[0, 2] = 5.0  # matches class 3 of both anchor sets
        tau = predict_tau({Modality.PATHOLOGY: tokens}, reps, reps.clone(), 1)
        assert tau == 3

    def test_scaling_invariance(self):
        rng = np.random.default_rng(1)
        tokens = torch.tensor(rng.normal(size=(6, 8)), dtype=torch.float64)
        reps_p = torch.tensor(rng.normal(size=(4, 8)), dtype=torch.float64)
        reps_g = torch.tensor(rng.normal(size=(4, 8)), dtype=torch.float64)
        base = predict_tau({Modality.PATHOLOGY: tokens}, reps_p, reps_g, 3)
        for c in (0.2, 5.0, 40.0):
            assert predict_tau(
                {Modality.PATHOLOGY: tokens}, reps_p * c, reps_g * c, 3
            ) == base

    def test_matches_enumeration_oracle_200_cases(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n_classes = int(rng.integers(2, 9))
            d = int(rng.integers(2, 7))
            k = int(rng.integers(1, 5))
            reps_p = torch.tensor(rng.normal(size=(n_classes, d)))
            reps_g = torch.tensor(rng.normal(size=(n_classes, d)))
            tokens = {}
            tokens[Modality.PATHOLOGY] = (
                torch.tensor(rng.normal(size=(int(rng.integers(1, 7)), d)))
                if rng.uniform() < 0.8
                else None
            )
            tokens[Modality.GENOMICS] = (
                torch.tensor(rng.normal(size=(int(rng.integers(1, 7)), d)))
                if tokens[Modality.PATHOLOGY] is None or rng.uniform() < 0.5
                else None
            )
            got = predict_tau(tokens, reps_p, reps_g, k)
            want = _predict_tau_oracle(tokens, reps_p, reps_g, k)
            assert got == want

    def test_no_tokens_rejected(self):
        reps = torch.eye(4)
        with pytest.raises(FusionError):
            predict_tau({}, reps, reps, 2)


class TestSelectTokens:
    def test_hand_case(self):
        tokens = torch.arange(6.0).reshape(3, 2)
        totals = torch.tensor([0.9, 0.1, 0.5])
        picked, idx = select_tokens(tokens, totals, 2)
        assert set(idx.tolist()) == {0, 2}
        assert idx.tolist() == [0, 2]  # selection order: by descending score

    def test_k_at_least_bag(self):
        tokens = torch.randn(3, 2)
        totals = torch.tensor([0.3, 0.2, 0.1])
        picked, idx = select_tokens(tokens, totals, 10)
        assert sorted(idx.tolist()) == [0, 1, 2]

    def test_tie_breaks_to_lower_index(self):
        tokens = torch.randn(4, 2)
        totals = torch.tensor([0.5, 0.7, 0.5, 0.5])
        _, idx = select_tokens(tokens, totals, 2)
        assert idx.tolist() == [1, 0]

    def test_matches_sort_oracle_500_cases(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            m = int(rng.integers(1, 30))
            k = int(rng.integers(1, 40))
            totals = rng.normal(size=m)
            tokens = rng.normal(size=(m, 3))
            _, idx = select_tokens(
                torch.tensor(tokens), torch.tensor(totals), k
            )
            want = sorted(range(m), key=lambda i: (-totals[i], i))[: min(k, m)]
            assert idx.tolist() == want

    def test_selected_set_invariant_under_bag_permutation(self):
        rng = np.random.default_rng(4)
        tokens = torch.tensor(rng.normal(size=(12, 5)))
        totals = torch.tensor(rng.normal(size=12))
        picked_a, _ = select_tokens(tokens, totals, 4)
        perm = rng.permutation(12)
        picked_b, _ = select_tokens(tokens[perm], totals[perm], 4)
        set_a = {row.tobytes() for row in picked_a.numpy()}
        set_b = {row.tobytes() for row in picked_b.numpy()}
        assert set_a == set_b

    def test_empty_bag_rejected(self):
        with pytest.raises(FusionError):
            select_tokens(torch.zeros(0, 3), torch.zeros(0), 2)


class TestFusionInput:
    def _bank(self, k_p=3, k_g=4, dim=6):
        return PlaceholderBank(dim, k_p, k_g, seed=0)

    def test_both_absent_rejected(self):
        bank = self._bank()
        with pytest.raises(FusionError):
            build_fusion_input(None, None, bank, torch.zeros(6))

    def test_layout_lengths(self):
        bank = self._bank()
        cls = torch.randn(6)
        seq = build_fusion_input(torch.randn(2, 6), None, bank, cls)
        assert len(seq) == 1 + 3 + 4
        assert bool(seq.attention_mask.all())
        np.testing.assert_allclose(seq.tokens[0].detach().numpy(), cls.numpy())

    def test_full_selection_fills_every_slot(self):
        bank = self._bank()
        sel = torch.randn(3, 6)
        seq = build_fusion_input(sel, None, bank, torch.zeros(6))
        got = seq.tokens[1:4].detach().numpy()
        want = (bank.pathology + sel).detach().numpy()
        np.testing.assert_allclose(got, want)

    def test_short_selection_keeps_bare_placeholders(self):
        bank = self._bank()
        sel = torch.randn(1, 6)
        seq = build_fusion_input(sel, None, bank, torch.zeros(6))
        np.testing.assert_allclose(
            seq.tokens[2:4].detach().numpy(), bank.pathology[1:].detach().numpy()
        )

    def test_missing_block_is_bare(self):
        bank = self._bank()
        seq = build_fusion_input(torch.randn(3, 6), None, bank, torch.zeros(6))
        np.testing.assert_allclose(
            seq.tokens[4:].detach().numpy(), bank.genomics.detach().numpy()
        )

    def test_indicator_initialization(self):
        bank = self._bank(k_p=50, k_g=50)
        # rows scatter tightly around the unit indicator vector
        assert abs(bank.indicator_p.norm().item() - 1.0) < 1e-6
        dev = (bank.pathology - bank.indicator_p).detach()
        assert dev.abs().max() < 0.15
        assert not torch.allclose(bank.indicator_p, bank.indicator_g)


class TestDistillation:
    def test_composition_identity(self):
        rng = np.random.default_rng(6)
        block = torch.tensor(rng.normal(size=(5, 8)), dtype=torch.float64)
        reps = torch.tensor(rng.normal(size=(4, 8)), dtype=torch.float64)
        label = SurvivalLabel(0, 9.0).with_interval(2, 2)
        got = distillation_loss(block, reps, label, 3, 2)
        want = nll_loss(
            unipro_hazards(topk_pool(similarity_matrix(block, reps), 3), 2), label
        )
        assert abs(got.item() - want.item()) <= 1e-10

    def test_zero_similarity_closed_form(self):
        # all-zero block -> hazards 0.5 -> loss = tau * log 2 for either censor bit
        reps = torch.tensor(np.random.default_rng(7).normal(size=(4, 8)))
        block = torch.zeros(3, 8, dtype=torch.float64)
        for c in (0, 1):
            for tau in (1, 2):
                label = SurvivalLabel(c, 5.0).with_interval(tau, 2)
                loss = distillation_loss(block, reps, label, 2, 2)
                assert loss.item() == pytest.approx(tau * math.log(2), rel=1e-10)

    def test_present_modality_contributes_zero(self):
        cohort = _micro_cohort(n=4, seed=1)
        enc = _encoder()
        s1p, s1g = _micro_stage1(enc, cohort)
        model = build_multipro(s1p, s1g, k_pathology=3, k_genomics=3, seed=0)
        _, report = patient_loss(model, cohort.patients[0], None, 1.0, 1.0)
        assert report.ud_p == 0.0 and report.ud_g == 0.0
        assert report.total == pytest.approx(report.surv_cls)


class TestTotalLoss:
    def test_defaults_are_unit_alphas(self):
        total, rep = total_loss(1.0, 2.0, 3.0)
        assert rep.alpha1 == 1.0 and rep.alpha2 == 1.0
        assert float(total) == pytest.approx(6.0)

    def test_zero_ud_terms(self):
        total, rep = total_loss(1.5, 0.0, 0.0, 0.7, 0.9)
        assert float(total) == pytest.approx(1.5)
        assert rep.total == pytest.approx(rep.surv_cls)


class TestClsHazards:
    def test_zero_weights_half(self):
        head = torch.nn.Linear(8, 4)
        with torch.no_grad():
            head.weight.zero_()
            head.bias.zero_()
        h = cls_hazards(torch.randn(8), head)
        np.testing.assert_allclose(h.detach().numpy(), 0.5)
        assert h.shape == (4,)

    def test_gradient_check(self):
        head = torch.nn.Linear(6, 3).double()
        cls_vec = torch.randn(6, dtype=torch.float64)
        finite_difference_check(
            lambda: cls_hazards(cls_vec, head).sum(), head.parameters()
        )


class TestStage2Training:
    def test_frozen_state_bit_identical(self):
        cohort = _micro_cohort(n=10, seed=2)
        enc = _encoder()
        s1p = train_stage1(cohort, Modality.PATHOLOGY, enc, context_length=2,
                           pool_k=2, epochs=2, seed=0)
        s1g = train_stage1(cohort, Modality.GENOMICS, enc, context_length=2,
                           pool_k=2, epochs=2, seed=1)
        ctx_p = s1p.model.template.context.detach().numpy().tobytes()
        ctx_g = s1g.model.template.context.detach().numpy().tobytes()
        reps_p = s1p.class_reps.numpy().tobytes()
        reps_g = s1g.class_reps.numpy().tobytes()
        mask = build_missing_mask([p.patient_id for p in cohort.patients], (30, 30), 5)
        result = train_stage2(cohort, mask, s1p, s1g, k_pathology=3, k_genomics=3,
                              epochs=2, seed=0)
        assert s1p.model.template.context.detach().numpy().tobytes() == ctx_p
        assert s1g.model.template.context.detach().numpy().tobytes() == ctx_g
        assert s1p.class_reps.numpy().tobytes() == reps_p
        assert s1g.class_reps.numpy().tobytes() == reps_g
        assert result.model.class_reps_p.numpy().tobytes() == reps_p
        assert result.model.class_reps_g.numpy().tobytes() == reps_g

    def test_no_mask_zero_alpha_reduces_to_fused_training(self):
        cohort = _micro_cohort(n=12, seed=3)
        enc = _encoder()
        s1p, s1g = _micro_stage1(enc, cohort)
        result = train_stage2(
            cohort, MissingMask.empty(), s1p, s1g, k_pathology=3, k_genomics=3,
            alpha1=0.0, alpha2=0.0, epochs=8, seed=0,
        )
        assert result.final_report.ud_p == 0.0 and result.final_report.ud_g == 0.0
        assert result.epoch_losses[-1] < result.epoch_losses[0]

    def test_loss_decreases_with_mask(self):
        cohort = _micro_cohort(n=12, seed=4)
        enc = _encoder()
        s1p, s1g = _micro_stage1(enc, cohort)
        mask = build_missing_mask([p.patient_id for p in cohort.patients], (30, 30), 1)
        result = train_stage2(cohort, mask, s1p, s1g, k_pathology=3, k_genomics=3,
                              epochs=8, seed=0)
        assert result.epoch_losses[-1] < result.epoch_losses[0]

    def test_stage2_gradient_check_every_trainable(self):
        # Micro config: D=8, one layer, K_p=K_g=3, two intervals, trainable
        # encoder; a complete patient plus one missing each modality so every
        # loss path fires.
        cohort = _micro_cohort(n=6, seed=5)
        enc = _encoder(trainable=True, max_seq_len=32).double()
        s1p, s1g = _micro_stage1(enc, cohort)
        s1p.model.double()
        s1g.model.double()
        s1p.class_reps = s1p.class_reps.double()
        s1g.class_reps = s1g.class_reps.double()
        model = build_multipro(s1p, s1g, k_pathology=3, k_genomics=3, seed=0).double()
        mask = MissingMask(
            frozenset({cohort.patients[1].patient_id}),
            frozenset({cohort.patients[2].patient_id}),
            (0.0, 0.0),
        )

        def loss():
            parts = []
            for patient in cohort.patients[:3]:
                part, _ = patient_loss(model, patient, mask, 1.0, 1.0)
                parts.append(part)
            return sum(parts)

        params = [p for p in model.parameters() if p.requires_grad]
        assert len(params) > 10
        n = finite_difference_check(loss, params, max_entries_per_param=8)
        assert n > 0

    def test_self_scorer_is_rank_only(self):
        # Selection is discrete, so the scorer's analytic gradient through
        # the stage-2 objective is exactly zero; it still orders tokens.
        cohort = _micro_cohort(n=4, seed=6)
        enc = _encoder()
        s1p, s1g = _micro_stage1(enc, cohort)
        model = build_multipro(s1p, s1g, k_pathology=3, k_genomics=3, seed=0)
        loss, _ = patient_loss(model, cohort.patients[0], None, 1.0, 1.0)
        loss.backward()
        for scorer in (model.scorer_p, model.scorer_g):
            for p in scorer.parameters():
                assert p.grad is None or p.grad.abs().max() == 0


class TestInference:
    def _trained_model(self, seed=0):
        cohort = _micro_cohort(n=10, seed=seed)
        enc = _encoder()
        s1p, s1g = _micro_stage1(enc, cohort, seed=seed)
        result = train_stage2(cohort, None, s1p, s1g, k_pathology=3, k_genomics=3,
                              epochs=2, seed=seed)
        return cohort, result.model

    def test_deterministic(self):
        cohort, model = self._trained_model()
        p = cohort.patients[0]
        a = model.infer(p.pathology.instances, p.genomics.instances)
        b = model.infer(p.pathology.instances, p.genomics.instances)
        np.testing.assert_array_equal(a.hazards.numpy(), b.hazards.numpy())
        assert a.risk == b.risk and a.tau_hat == b.tau_hat
        np.testing.assert_array_equal(a.attention_mass, b.attention_mass)

    def test_single_modality_contract(self):
        cohort, model = self._trained_model(seed=1)
        p = cohort.patients[0]
        complete = model.infer(p.pathology.instances, p.genomics.instances)
        p_only = model.infer(p.pathology.instances, None)
        g_only = model.infer(None, p.genomics.instances)
        for res in (complete, p_only, g_only):
            h = res.hazards.numpy()
            assert h.shape == (2,)
            assert ((h > 0) & (h < 1)).all()
        assert p_only.selected_g is None
        assert g_only.selected_p is None

    def test_attention_mass_is_distribution(self):
        cohort, model = self._trained_model(seed=2)
        p = cohort.patients[0]
        res = model.infer(p.pathology.instances, p.genomics.instances)
        assert res.attention_mass.shape == (1 + 3 + 3,)
        assert res.attention_mass.sum() == pytest.approx(1.0, abs=1e-5)

    def test_no_modality_rejected(self):
        _, model = self._trained_model(seed=3)
        with pytest.raises(FusionError):
            model.infer(None, None)
