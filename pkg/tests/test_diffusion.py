import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointdiff.diffusion import (
    CorruptionResult,
    NoiseSchedule,
    compose_retention,
    corrupt_for_training,
    corrupt_step,
    masked_loss,
)
from jointdiff.errors import ContractError, InputError
from jointdiff.tokenspace import assemble
from jointdiff.toyworld import generate_records


class TestCorruptStep:
    def test_beta_zero_is_identity(self, layout):
        rng = np.random.default_rng(0)
        toks = np.arange(8, 14)
        out, masked = corrupt_step(toks, 0.0, layout.mask, rng)
        assert np.array_equal(out, toks)
        assert not masked.any()

    def test_beta_one_masks_everything(self, layout):
        rng = np.random.default_rng(0)
        toks = np.arange(8, 14)
        out, masked = corrupt_step(toks, 1.0, layout.mask, rng)
        assert np.all(out == layout.mask)
        assert masked.all()

    def test_absorbing_composition_survival(self, layout):
        """Two half-masking steps leave ~25% alive, within 3 sigma binomial."""
        rng = np.random.default_rng(42)
        n = 100_000
        toks = np.full(n, 8)
        t1, _ = corrupt_step(toks, 0.5, layout.mask, rng)
        t2, masked = corrupt_step(t1, 0.5, layout.mask, rng)
        survive = float((t2 != layout.mask).mean())
        sigma = math.sqrt(0.25 * 0.75 / n)
        assert abs(survive - 0.25) <= 3 * sigma
        # absorbing property: nothing masked at step 1 is clean at step 2
        assert not np.any((t1 == layout.mask) & (t2 != layout.mask))

    def test_bad_beta_rejected(self, layout):
        with pytest.raises(InputError):
            corrupt_step(np.arange(3), 1.5, layout.mask, np.random.default_rng(0))


class TestComposeRetention:
    def test_all_zero_betas_keep_everything(self):
        assert np.allclose(compose_retention([0, 0, 0]), [1, 1, 1])

    def test_half_half(self):
        assert np.allclose(compose_retention([0.5, 0.5]), [0.5, 0.25])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=16))
    def test_non_increasing(self, betas):
        r = compose_retention(betas)
        assert np.all(np.diff(r) <= 1e-15)

    def test_schedule_mask_marginal(self):
        sched = NoiseSchedule([0.5, 0.5])
        assert sched.mask_marginal(2) == pytest.approx(0.75)


class TestForwardProcessLaw:
    @pytest.mark.parametrize("betas", [(0.5, 0.5), tuple([0.1] * 10)])
    def test_empirical_marginals_match_retention(self, betas, layout):
        """Mask marginal after t steps equals 1 - prod(1 - beta_s), within
        3 sigma over 1e5 token chains (the testable content of the
        absorbing-chain factorization)."""
        rng = np.random.default_rng(7)
        n = 100_000
        toks = np.full(n, 9)
        retention = compose_retention(betas)
        for t, beta in enumerate(betas, start=1):
            toks, masked = corrupt_step(toks, beta, layout.mask, rng)
            p = 1.0 - retention[t - 1]
            sigma = math.sqrt(max(p * (1 - p), 1e-12) / n)
            assert abs(masked.mean() - p) <= 3 * sigma + 1e-12, f"step {t}"


def _assembled_batch(world, layout, seq, n=8, seed=1):
    recs = generate_records(world, n, seed=seed)
    ids = np.stack([assemble(r.text, r.cur, r.fut, r.act, layout, seq).ids for r in recs])
    act_lens = np.array([len(r.act) for r in recs])
    return ids, act_lens, recs


class TestCorruptForTraining:
    def test_rho_one_masks_all_diffused(self, world, layout, seq):
        ids, act_lens, _ = _assembled_batch(world, layout, seq, n=4)
        corr = corrupt_for_training(ids, act_lens, seq, layout, np.random.default_rng(0), rho_override=1.0)
        L_v = seq.fut_tokens[1] - seq.fut_tokens[0]
        expected = sum(L_v + int(a) + 1 for a in act_lens)
        assert len(corr.targets) == expected

    def test_ceiling_count_at_rho_min(self, world, layout, seq):
        ids, act_lens, _ = _assembled_batch(world, layout, seq, n=40)
        three = np.flatnonzero(act_lens == 3)
        assert len(three) > 0
        corr = corrupt_for_training(ids, act_lens, seq, layout, np.random.default_rng(0), rho_override=0.05)
        b = int(three[0])
        n_act_masked = int(((corr.rows == b) & ~corr.is_image).sum())
        assert n_act_masked == 1  # ceil(0.05 * 4) with the EOA slot included

    def test_masked_positions_stay_in_diffused_segments(self, world, layout, seq):
        ids, act_lens, _ = _assembled_batch(world, layout, seq, n=8)
        corr = corrupt_for_training(ids, act_lens, seq, layout, np.random.default_rng(1))
        f0, f1 = seq.fut_tokens
        a0, a1 = seq.act_tokens
        for b, p in zip(corr.rows, corr.positions):
            assert (f0 <= p < f1) or (a0 <= p < a0 + act_lens[b] + 1)

    def test_action_tail_is_visible_mask_without_targets(self, world, layout, seq):
        ids, act_lens, _ = _assembled_batch(world, layout, seq, n=8)
        corr = corrupt_for_training(ids, act_lens, seq, layout, np.random.default_rng(2), rho_override=0.5)
        a0, a1 = seq.act_tokens
        for b, n_act in enumerate(act_lens):
            tail = corr.ids[b, a0 + n_act + 1 : a1]
            assert np.all(tail == layout.mask)
            tail_positions = set(range(a0 + int(n_act) + 1, a1))
            hit = {int(p) for r, p in zip(corr.rows, corr.positions) if r == b} & tail_positions
            assert not hit

    def test_iid_mode_masks_by_bernoulli(self, world, layout, seq):
        ids, act_lens, _ = _assembled_batch(world, layout, seq, n=64)
        corr = corrupt_for_training(
            ids, act_lens, seq, layout, np.random.default_rng(3), rho_override=0.3, iid_masking=True
        )
        L_v = seq.fut_tokens[1] - seq.fut_tokens[0]
        frac = corr.is_image.sum() / (len(ids) * L_v)
        assert abs(frac - 0.3) < 0.05

    def test_stage1_records_mask_image_only(self, world, layout, seq):
        recs = generate_records(world, 6, seed=5, stage1=True)
        ids = np.stack([assemble(r.text, r.cur, r.fut, None, layout, seq).ids for r in recs])
        act_lens = np.full(len(recs), -1)
        corr = corrupt_for_training(ids, act_lens, seq, layout, np.random.default_rng(0), rho_override=1.0)
        assert corr.is_image.all()
        a0, a1 = seq.act_tokens
        assert np.all(corr.ids[:, a0:a1] == layout.pad)


class TestMaskedLoss:
    def test_no_masked_positions_zero_loss(self, world, layout, seq):
        ids, act_lens, _ = _assembled_batch(world, layout, seq, n=2)
        corr = CorruptionResult(
            ids=ids,
            rows=np.empty(0, dtype=np.int64),
            positions=np.empty(0, dtype=np.int64),
            targets=np.empty(0, dtype=np.int64),
            is_image=np.empty(0, dtype=bool),
            rho=np.zeros(2),
        )
        logits = np.random.default_rng(0).normal(size=(2, seq.context_len, layout.total))
        loss, dl = masked_loss(logits, corr, seq, layout, 4.0)
        assert loss == 0.0
        assert np.all(dl == 0.0)

    def test_image_only_uniform_logits_closed_form(self, world, layout, seq):
        """Only image positions masked + uniform logits: loss is exactly
        beta * ln(V_v) under per-modality count normalization."""
        ids, act_lens, _ = _assembled_batch(world, layout, seq, n=2)
        rng = np.random.default_rng(1)
        corr = corrupt_for_training(ids, act_lens, seq, layout, rng, rho_override=0.5)
        keep = corr.is_image
        corr = CorruptionResult(corr.ids, corr.rows[keep], corr.positions[keep],
                                corr.targets[keep], corr.is_image[keep], corr.rho)
        logits = np.zeros((2, seq.context_len, layout.total))
        for beta in (0.25, 1.0, 4.0):
            loss, _ = masked_loss(logits, corr, seq, layout, beta)
            assert loss == pytest.approx(beta * math.log(world.v_v), rel=1e-9)

    def test_beta_zero_ignores_image_logits(self, world, layout, seq):
        ids, act_lens, _ = _assembled_batch(world, layout, seq, n=2)
        corr = corrupt_for_training(ids, act_lens, seq, layout, np.random.default_rng(2), rho_override=0.8)
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(2, seq.context_len, layout.total))
        loss1, _ = masked_loss(logits, corr, seq, layout, 0.0)
        perturbed = logits.copy()
        f0, f1 = seq.fut_tokens
        perturbed[:, f0 - 1 : f1 - 1, :] += rng.normal(size=perturbed[:, f0 - 1 : f1 - 1, :].shape)
        loss2, _ = masked_loss(perturbed, corr, seq, layout, 0.0)
        assert loss1 == pytest.approx(loss2, abs=1e-12)

    def test_target_at_unmasked_position_is_contract_error(self, world, layout, seq):
        ids, act_lens, _ = _assembled_batch(world, layout, seq, n=1)
        f0 = seq.fut_tokens[0]
        corr = CorruptionResult(
            ids=ids,  # nothing actually masked
            rows=np.array([0]),
            positions=np.array([f0]),
            targets=np.array([layout.visual_range[0]]),
            is_image=np.array([True]),
            rho=np.ones(1),
        )
        logits = np.zeros((1, seq.context_len, layout.total))
        with pytest.raises(ContractError):
            masked_loss(logits, corr, seq, layout, 1.0)

    def test_gradient_flows_only_to_masked_predictor_rows(self, world, layout, seq):
        ids, act_lens, _ = _assembled_batch(world, layout, seq, n=2)
        corr = corrupt_for_training(ids, act_lens, seq, layout, np.random.default_rng(4), rho_override=0.4)
        logits = np.random.default_rng(5).normal(size=(2, seq.context_len, layout.total))
        loss, dl = masked_loss(logits, corr, seq, layout, 2.0)
        pred_rows = {(int(b), int(p) - 1) for b, p in zip(corr.rows, corr.positions)}
        nz = np.argwhere(np.abs(dl).sum(axis=-1) > 0)
        assert {(int(b), int(r)) for b, r in nz} == pred_rows
        # finite-difference agreement on a handful of masked coordinates
        eps = 1e-6
        for i in range(3):
            b, p, col = int(corr.rows[i]), int(corr.positions[i]), int(corr.targets[i])
            pert = logits.copy()
            pert[b, p - 1, col] += eps
            l2, _ = masked_loss(pert, corr, seq, layout, 2.0)
            fd = (l2 - loss) / eps
            assert fd == pytest.approx(dl[b, p - 1, col], abs=1e-5)

    def test_gradient_zero_outside_admissible_columns(self, world, layout, seq):
        ids, act_lens, _ = _assembled_batch(world, layout, seq, n=2)
        corr = corrupt_for_training(ids, act_lens, seq, layout, np.random.default_rng(6), rho_override=0.6)
        logits = np.random.default_rng(7).normal(size=(2, seq.context_len, layout.total))
        _, dl = masked_loss(logits, corr, seq, layout, 1.0)
        assert np.all(dl[..., layout.mask] == 0.0)
        assert np.all(dl[..., layout.pad] == 0.0)
        assert np.all(dl[..., : layout.text_range[1]] == 0.0)
