import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from stepground.align import AlignConfig, StepSequence
from stepground.corpus import NarrationRecord, NarrationSegment, build_index
from stepground.embedding import HashFeatureEmbedder
from stepground.reward import (
    RewardConfig,
    compute_reward,
    concat_steps,
    group_advantages,
    reward_from_scores,
)

EMB = HashFeatureEmbedder(dim=32, seed=4)
RCFG = RewardConfig()


def seq(*texts):
    return StepSequence.from_texts(list(texts), EMB)


def tiny_index():
    def rec(vid, texts):
        return NarrationRecord(
            vid,
            tuple(
                NarrationSegment(float(i), float(i + 1), t)
                for i, t in enumerate(texts)
            ),
        )

    return build_index(
        [
            rec("v0", ["hello intro", "crack egg", "whisk egg", "fry egg"]),
            rec("v1", ["hello intro", "crack egg"]),
            rec("v2", ["hello intro", "boil water", "add pasta"]),
        ],
        EMB,
    )


class TestConcatSteps:
    def test_basic_concatenation(self):
        h = seq("a step", "b step")
        c = seq("x step")
        full = concat_steps(h, c)
        assert full.steps == ("a step", "b step", "x step")
        assert full.embeddings.shape == (3, 32)

    def test_empty_completion_is_identity(self):
        h = seq("a step", "b step")
        assert concat_steps(h, None) is h
        empty = StepSequence((), np.empty((0, 32), dtype=np.float32))
        assert concat_steps(h, empty) is h

    def test_embeddings_are_not_recomputed(self):
        h = seq("a step")
        c = seq("x step")
        full = concat_steps(h, c)
        assert np.array_equal(full.embeddings[1], EMB.embed("x step"))
        assert np.array_equal(full.embeddings[1], c.embeddings[0])

    def test_both_empty_rejected(self):
        empty = StepSequence((), np.empty((0, 32), dtype=np.float32))
        with pytest.raises(ValueError):
            concat_steps(empty, None)


class TestRewardFormula:
    def test_zero_progress_gets_gate_penalty(self):
        rho, reward, gated = reward_from_scores(0.5, 0.5, RCFG)
        assert rho == 0.0
        assert reward == -0.2
        assert not gated

    def test_gated_case_returns_full_score(self):
        rho, reward, gated = reward_from_scores(0.6, 0.5, RCFG)
        assert rho == pytest.approx(0.2, abs=1e-12)
        assert reward == 0.6
        assert gated

    def test_high_baseline_marginal_gain_penalized(self):
        # relative progress re-scales the 0.005 gain by the 0.1 headroom
        rho, reward, gated = reward_from_scores(0.905, 0.9, RCFG)
        assert rho == pytest.approx(0.05, abs=1e-9)
        assert reward == pytest.approx(-0.1, abs=1e-9)
        assert not gated
        # exact piecewise evaluation, written out independently
        expected_rho = (0.905 - 0.9) / max(1.0 - 0.9, RCFG.eps)
        expected = min(max(RCFG.alpha * (expected_rho - RCFG.tau), -1.0), 0.0)
        assert reward == expected

    def test_saturated_baseline_uses_eps_guard(self):
        rho, reward, gated = reward_from_scores(1.0, 1.0, RCFG)
        assert rho == 0.0
        assert reward == -0.2
        # with the baseline saturated the denominator is exactly eps
        rho2, reward2, gated2 = reward_from_scores(1.0 + 2e-7, 1.0, RCFG)
        assert rho2 == pytest.approx(2e-7 / RCFG.eps, rel=1e-6)
        assert gated2

    def test_penalty_clipped_at_minus_one(self):
        rho, reward, _ = reward_from_scores(1e-6, 0.999, RCFG)
        assert rho < -5
        assert reward == -1.0

    def test_gate_discontinuity_both_sides(self):
        a_hist = 0.5
        lo = a_hist + (RCFG.tau - 1e-6) * (1 - a_hist)
        hi = a_hist + (RCFG.tau + 1e-6) * (1 - a_hist)
        rho_l, r_l, g_l = reward_from_scores(lo, a_hist, RCFG)
        rho_r, r_r, g_r = reward_from_scores(hi, a_hist, RCFG)
        assert not g_l and g_r
        assert r_l < 0 and abs(r_l) < 3e-6   # left limit approaches 0 from below
        assert r_r == hi                     # right side jumps to the full score

    def test_monotone_in_full_score(self):
        a_hist = 0.4
        rewards = [
            reward_from_scores(a, a_hist, RCFG)[1]
            for a in np.linspace(1e-6, 1.0, 200)
        ]
        assert all(b >= a - 1e-12 for a, b in zip(rewards, rewards[1:]))

    @settings(max_examples=200, deadline=None)
    @given(
        st.floats(1e-6, 1.0),
        st.floats(1e-6, 1.0),
    )
    def test_reward_bounded_and_sign_tied_to_gate(self, a_full, a_hist):
        rho, reward, gated = reward_from_scores(a_full, a_hist, RCFG)
        assert -1.0 <= reward <= 1.0
        if gated:
            assert reward == a_full > 0
        else:
            assert reward <= 0
            assert rho < RCFG.tau

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RewardConfig(tau=0.0)
        with pytest.raises(ValueError):
            RewardConfig(alpha=0.0)
        with pytest.raises(ValueError):
            RewardConfig(eps=0.0)


class TestComputeReward:
    def test_empty_completion_gets_negative_gate_penalty(self):
        index = tiny_index()
        out = compute_reward(seq("crack egg"), None, index, AlignConfig(), RCFG)
        assert out.rho == 0.0
        assert out.reward == -0.2
        assert out.a_full == out.a_hist
        assert out.best_record_full == out.best_record_hist

    def test_real_continuation_is_gated_positive(self):
        index = tiny_index()
        out = compute_reward(
            seq("crack egg"),
            seq("whisk egg", "fry egg"),
            index,
            AlignConfig(),
            RCFG,
        )
        assert out.gated
        assert out.reward == out.a_full > 0

    def test_history_echo_is_negative(self):
        index = tiny_index()
        out = compute_reward(
            seq("crack egg"), seq("crack egg"), index, AlignConfig(), RCFG
        )
        assert out.reward < 0

    def test_empty_history_rejected(self):
        index = tiny_index()
        empty = StepSequence((), np.empty((0, 32), dtype=np.float32))
        with pytest.raises(ValueError, match="history"):
            compute_reward(empty, seq("x"), index, AlignConfig(), RCFG)

    def test_breakdown_serializes(self):
        index = tiny_index()
        out = compute_reward(seq("crack egg"), None, index, AlignConfig(), RCFG)
        d = out.to_dict()
        assert set(d) == {
            "a_full",
            "a_hist",
            "rho",
            "reward",
            "gated",
            "best_record_full",
            "best_record_hist",
        }


class TestGroupAdvantages:
    def test_hand_computed_standardization(self):
        out = group_advantages([1.0, 2.0, 3.0, 4.0])
        assert out.mean == 2.5
        assert out.std == pytest.approx(np.sqrt(1.25), abs=1e-15)
        expected = [-1.3416407864998738, -0.4472135954999579,
                    0.4472135954999579, 1.3416407864998738]
        assert list(out.advantages) == pytest.approx(expected, abs=1e-12)

    def test_zero_variance_gives_zero_advantages(self):
        out = group_advantages([0.7, 0.7, 0.7, 0.7])
        assert out.advantages == (0.0, 0.0, 0.0, 0.0)

    def test_shift_invariance(self):
        base = group_advantages([0.1, 0.5, -0.3, 0.9]).advantages
        shifted = group_advantages([0.4, 0.8, 0.0, 1.2]).advantages
        assert base == pytest.approx(shifted, abs=1e-9)

    def test_scale_invariance(self):
        base = group_advantages([0.1, 0.5, -0.3, 0.9]).advantages
        scaled = group_advantages([0.3, 1.5, -0.9, 2.7]).advantages
        assert base == pytest.approx(scaled, rel=1e-9)

    def test_group_too_small(self):
        with pytest.raises(ValueError):
            group_advantages([1.0])

    def test_moments_on_random_groups(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            rewards = rng.uniform(-1, 1, size=4)
            if np.ptp(rewards) == 0:
                continue
            out = group_advantages(list(rewards))
            adv = np.array(out.advantages)
            assert abs(adv.mean()) <= 1e-9
            assert abs(np.sqrt((adv**2).mean()) - 1.0) <= 1e-6

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(-1, 1, allow_nan=False), min_size=2, max_size=8),
        st.floats(-2, 2, allow_nan=False),
        st.floats(0.1, 10, allow_nan=False),
    )
    def test_affine_transform_property(self, rewards, shift, scale):
        spread = max(rewards) - min(rewards)
        assume(spread == 0 or spread > 1e-6)
        base = group_advantages(rewards).advantages
        moved = group_advantages([r * scale + shift for r in rewards]).advantages
        assert base == pytest.approx(moved, rel=1e-7, abs=1e-7)
