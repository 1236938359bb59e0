import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wstal import losses
from wstal import ndiff as nd
from wstal.errors import ConfigError, NumericError, UsageError
from wstal.losses import EmaRef, LossConfig, VideoLossState
from wstal.model import ModelConfig, forward, init_params


def make_state(p, y, x_fg=(1.0, 0.0), x_bg=(0.0, 1.0), lam=None, lam_prime=None):
    p = nd.parameter(np.asarray(p, dtype=float).reshape(1, -1))
    lam = nd.parameter(np.full((4, 1), 0.5) if lam is None else np.asarray(lam, float).reshape(-1, 1))
    lp = np.full(lam.rows, 0.5) if lam_prime is None else np.asarray(lam_prime, float)
    return VideoLossState(nd.parameter([list(x_fg)]), nd.parameter([list(x_bg)]), False, False,
                          lam, lp, p, np.asarray(y, dtype=float), losses.snippet_joint(lam, lp))


def focal_oracle(ps, ys, beta):
    total = 0.0
    for p, y in zip(ps, ys):
        for pc, yc in zip(p, y):
            if yc:
                total -= (1 - pc) ** beta * math.log(pc)
            else:
                total -= pc ** beta * math.log(1 - pc)
    return total / len(ps)


def random_batch(rng, n=4, C=5):
    ps = rng.uniform(0.01, 0.99, (n, C))
    ys = (rng.random((n, C)) < 0.4).astype(float)
    return ps, ys


class TestConfig:
    @pytest.mark.parametrize("kw", [{"alpha": -1}, {"gamma": -0.1}, {"beta": -2}, {"tau": 0.0},
                                    {"tau": 1.0}, {"classification_variant": "hinge"},
                                    {"denoising_variant": "mae"}, {"denoising_scope": "all"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            LossConfig(**kw)

    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.alpha, cfg.gamma, cfg.beta, cfg.tau) == (0.2, 0.01, 2.0, 0.5)


class TestAttention:
    def test_topdown_example(self):
        lam = losses.topdown_attention(nd.constant([[0.2, 0.7], [0.9, 0.1]]))
        np.testing.assert_array_equal(lam.values[:, 0], [0.7, 0.9])

    def test_topdown_single_class(self):
        T = np.array([[0.3], [0.6]])
        np.testing.assert_array_equal(losses.topdown_attention(T).values, T)

    def test_topdown_gradient_one_hot(self):
        T = nd.parameter([[0.2, 0.7, 0.7], [0.9, 0.1, 0.3]])
        nd.backward(nd.sum_(losses.topdown_attention(T)))
        np.testing.assert_array_equal(T.grad, [[0, 1, 0], [1, 0, 0]])

    @pytest.mark.parametrize("s,k", [(8, 1), (9, 2), (20, 3), (40, 5)])
    def test_topk_rule(self, s, k):
        assert losses.topk_for(s) == k

    def test_video_prediction_s8_is_max(self):
        T = np.random.default_rng(0).uniform(size=(8, 3))
        np.testing.assert_allclose(losses.video_prediction(T).values[0], T.max(axis=0))

    def test_video_prediction_constant(self):
        np.testing.assert_allclose(losses.video_prediction(np.full((13, 2), 0.3)).values, 0.3)

    def test_bottomup_examples(self):
        ref = np.array([1.0, 2.0, -1.0])
        x = np.stack([ref, -ref, 3 * ref])
        np.testing.assert_allclose(losses.bottomup_attention(x, ref), [0.0, 1.0, 0.0], atol=1e-15)
        np.testing.assert_array_equal(losses.bottomup_attention(x, np.zeros(3)), 0.5)

    def test_ema(self):
        v1, v2 = np.array([1.0, -2.0]), np.array([3.0, 0.5])
        ref = EmaRef.zeros(2)
        ref = losses.update_ema_ref(ref, [v1, v1])
        np.testing.assert_allclose(ref.x_ref, 0.1 * v1)
        ref = losses.update_ema_ref(ref, [v2 - 1, v2 + 1])
        np.testing.assert_allclose(ref.x_ref, 0.09 * v1 + 0.1 * v2, rtol=1e-15)
        assert ref.iteration == 2

    def test_ema_fixed_point(self):
        v = np.array([0.5, -1.0, 2.0])
        ref = EmaRef.zeros(3)
        for _ in range(400):
            ref = losses.update_ema_ref(ref, [v])
        np.testing.assert_allclose(ref.x_ref, v, rtol=1e-12)

    def test_ema_empty(self):
        with pytest.raises(UsageError):
            losses.update_ema_ref(EmaRef.zeros(2), [])


class TestEmbeddings:
    def test_example(self):
        x = nd.parameter(np.random.default_rng(0).standard_normal((3, 4)))
        lam = nd.constant([[0.7], [0.9], [0.3]])
        x_fg, x_bg, fe, be = losses.fg_bg_embeddings(x, lam, 0.5)
        xv = x.values
        np.testing.assert_allclose(x_fg.values[0], 0.7 * xv[0] + 0.9 * xv[1], rtol=1e-15)
        np.testing.assert_allclose(x_bg.values[0], 0.7 * xv[2], rtol=1e-15)
        assert not fe and not be

    def test_fallback(self):
        x = nd.constant(np.arange(12.0).reshape(3, 4))
        _, x_bg, fe, be = losses.fg_bg_embeddings(x, nd.constant(np.full((3, 1), 0.6)), 0.5)
        assert be and not fe
        np.testing.assert_allclose(x_bg.values[0], 0.4 * x.values[0])

    @pytest.mark.parametrize("seed", range(5))
    def test_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((6, 3))
        lam = rng.uniform(size=6)
        x_fg, x_bg, _, _ = losses.fg_bg_embeddings(nd.constant(x), nd.constant(lam.reshape(-1, 1)), 0.5)
        fg = np.zeros(3)
        bg = np.zeros(3)
        for t in range(6):
            if lam[t] > 0.5:
                fg += lam[t] * x[t]
            if 1 - lam[t] > 0.5:
                bg += (1 - lam[t]) * x[t]
        if not (lam > 0.5).any():
            fg = lam.max() * x[np.argmax(lam)]
        if not (lam < 0.5).any():
            bg = (1 - lam.min()) * x[np.argmin(lam)]
        np.testing.assert_allclose(x_fg.values[0], fg, atol=1e-12)
        np.testing.assert_allclose(x_bg.values[0], bg, atol=1e-12)

    def test_gradient_through_lambda_not_membership(self):
        x = nd.parameter([[1.0, 0.0], [0.0, 1.0]])
        lam = nd.parameter([[0.8], [0.3]])
        x_fg, x_bg, _, _ = losses.fg_bg_embeddings(x, lam, 0.5)
        nd.backward(nd.sum_(x_fg) + nd.sum_(x_bg))
        np.testing.assert_allclose(lam.grad[:, 0], [1.0, -1.0])


class TestPairWeights:
    def test_aligned(self):
        a = make_state([0.5], [1], x_fg=(1, 0), x_bg=(0, 1))
        b = make_state([0.5], [1], x_fg=(1, 0), x_bg=(0, 1))
        w_fb, w_fg, w_bg = losses.pair_weights(a, b, 0.01)
        assert (w_fb.item(), w_fg.item(), w_bg.item()) == (0.0, 0.0, 0.0)

    def test_fg_equals_other_bg(self):
        a = make_state([0.5], [1], x_fg=(1, 1), x_bg=(0, 1))
        b = make_state([0.5], [1], x_fg=(1, 0), x_bg=(2, 2))
        assert losses.pair_weights(a, b, 0.01)[0].item() == pytest.approx(1.0)

    def test_gamma_zero(self):
        rng = np.random.default_rng(0)
        a = make_state([0.5], [1], x_fg=rng.standard_normal(2), x_bg=rng.standard_normal(2))
        b = make_state([0.5], [1], x_fg=rng.standard_normal(2), x_bg=rng.standard_normal(2))
        _, w_fg, w_bg = losses.pair_weights(a, b, 0.0)
        assert w_fg.item() == 0.0 and w_bg.item() == 0.0

    def test_negative_cosine_clamped(self):
        a = make_state([0.5], [1], x_fg=(1, 0), x_bg=(0, 1))
        b = make_state([0.5], [1], x_fg=(1, 0), x_bg=(-1, 0))
        assert losses.pair_weights(a, b, 0.01)[0].item() == 0.0


class TestDiscriminative:
    def test_hand_value(self):
        batch = [make_state([0.5], [1]), make_state([0.5], [1])]
        cfg = LossConfig(classification_variant="discriminative", gamma=0.0)
        val = losses.discriminative_loss(batch, [1, 0], cfg).item()
        assert val == pytest.approx(0.25 * math.log(2), rel=1e-15)
        assert round(val, 4) == 0.1733

    def test_perfect_cross_entropy(self):
        y = np.array([1, 0, 1, 0])
        p = np.where(y == 1, 1 - 1e-12, 1e-12)
        cfg = LossConfig(classification_variant="cross_entropy")
        assert losses.discriminative_loss([make_state(p, y)], [0], cfg).item() < 1e-10

    def test_focal_equals_dis_orthogonal_gamma0(self):
        ps, ys = random_batch(np.random.default_rng(1))
        batch = [make_state(p, y) for p, y in zip(ps, ys)]
        pairing = [1, 2, 3, 0]
        dis = losses.discriminative_loss(batch, pairing, LossConfig(gamma=0.0)).item()
        foc = losses.discriminative_loss(batch, pairing, LossConfig(classification_variant="focal")).item()
        assert abs(dis - foc) <= 1e-12

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_reduction_chain(self, seed):
        rng = np.random.default_rng(seed)
        ps, ys = random_batch(rng)
        batch = [make_state(p, y) for p, y in zip(ps, ys)]
        pairing = losses.derangement(4, rng)
        dis = losses.discriminative_loss(batch, pairing, LossConfig(gamma=0.0)).item()
        foc = losses.discriminative_loss(batch, pairing, LossConfig(classification_variant="focal")).item()
        ce = losses.discriminative_loss(batch, pairing,
                                        LossConfig(classification_variant="cross_entropy")).item()
        assert abs(dis - foc) <= 1e-12
        assert abs(foc - focal_oracle(ps, ys, 2.0)) <= 1e-12
        assert abs(ce - focal_oracle(ps, ys, 0.0)) <= 1e-12

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_non_negative_and_finite(self, seed):
        rng = np.random.default_rng(seed)
        ps, ys = random_batch(rng, n=3)
        batch = [make_state(p, y, x_fg=rng.standard_normal(2), x_bg=rng.standard_normal(2))
                 for p, y in zip(ps, ys)]
        for variant in ("discriminative", "discriminative_no_focal", "focal", "cross_entropy"):
            val = losses.discriminative_loss(batch, [1, 2, 0], LossConfig(classification_variant=variant))
            assert np.isfinite(val.item()) and val.item() >= 0.0

    def test_empty_batch(self):
        with pytest.raises(UsageError):
            losses.discriminative_loss([], [], LossConfig())

    def test_self_pairing_rejected(self):
        batch = [make_state([0.5], [1]), make_state([0.5], [1])]
        with pytest.raises(UsageError):
            losses.discriminative_loss(batch, [0, 1], LossConfig())

    def test_single_video_needs_pairs(self):
        with pytest.raises(UsageError):
            losses.discriminative_loss([make_state([0.5], [1])], [0], LossConfig())

    def test_w_terms_receive_gradient(self):
        a = make_state([0.6, 0.3], [1, 0], x_fg=(1.0, 0.4), x_bg=(0.2, 1.0))
        b = make_state([0.4, 0.7], [0, 1], x_fg=(0.3, 1.0), x_bg=(1.0, 0.1))
        nd.backward(losses.discriminative_loss([a, b], [1, 0], LossConfig()))
        assert np.any(a.x_fg.grad) and np.any(b.x_bg.grad)


class TestDerangement:
    @given(st.integers(2, 30), st.integers(0, 2**32 - 1))
    def test_no_fixed_points(self, n, seed):
        perm = losses.derangement(n, np.random.default_rng(seed))
        assert sorted(perm) == list(range(n))
        assert all(perm[i] != i for i in range(n))


class TestJoints:
    def test_snippet_example(self):
        j = losses.snippet_joint(nd.constant([[0.9], [0.4]]), [0.8, 0.2])
        np.testing.assert_allclose(j.P.values, [[0.9, 0.4], [0.1, 0.6]])
        np.testing.assert_allclose(j.Y.values, 0.5 * np.eye(2))
        assert j.valid

    def test_snippet_degenerate(self):
        assert not losses.snippet_joint(nd.constant(np.full((3, 1), 0.5)), [0.7, 0.9, 0.6]).valid

    def test_half_excluded(self):
        j = losses.snippet_joint(nd.constant([[0.9], [0.4], [0.1]]), [0.8, 0.5, 0.2])
        assert list(j.fg_index) == [0] and list(j.bg_index) == [2]
        assert j.Y.shape == (2, 2)

    def test_video_one_hot(self):
        P, Y = losses.video_joint([nd.constant([[0.0, 1.0, 0.0]])], [[0, 1, 0]])
        U = P.values @ Y.values
        expected = np.zeros((3, 3))
        expected[1, 1] = 1.0
        np.testing.assert_array_equal(U, expected)

    def test_video_hand_product(self):
        P, Y = losses.video_joint([nd.constant([[0.8, 0.3]]), nd.constant([[0.1, 0.6]])],
                                  [[1, 0], [1, 1]])
        # U[c, c'] = mean_i p_i[c] y_i[c']
        np.testing.assert_allclose(P.values @ Y.values, [[0.45, 0.05], [0.45, 0.3]])

    def test_video_zero_labels(self):
        P, Y = losses.video_joint([nd.constant([[0.3, 0.4]])], [[0, 0]])
        with pytest.raises(NumericError):
            losses.pdmi(P, Y)


class TestPdmi:
    def test_identity_optimum(self):
        j = losses.snippet_joint(nd.constant([[1.0], [0.0]]), [0.9, 0.1])
        assert losses.pdmi(j.P, j.Y).item() == 0.0

    def test_diag(self):
        U = np.diag([0.8, 0.2])
        assert losses.pdmi(nd.constant(U), np.eye(2)).item() == pytest.approx(math.log(4), rel=1e-14)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        s = int(rng.integers(2, 20))
        lp = rng.uniform(size=s)
        lp[:2] = [0.9, 0.1]
        j = losses.snippet_joint(nd.constant(rng.uniform(0.01, 0.99, (s, 1))), lp)
        assert losses.pdmi(j.P, j.Y).item() >= 0.0


class TestDenoising:
    def test_scope_video_only(self):
        st_ = [make_state([0.6, 0.2], [1, 0], lam=[0.9, 0.1], lam_prime=[0.8, 0.2]),
               make_state([0.3, 0.7], [0, 1], lam=[0.9, 0.1], lam_prime=[0.8, 0.2])]
        ds, dv = losses.denoising_loss(st_, LossConfig(denoising_scope="video_only"))
        assert ds is None and dv is not None
        ds, dv = losses.denoising_loss(st_, LossConfig(denoising_scope="snippet_only"))
        assert ds is not None and dv is None

    def test_separated_is_zero(self):
        st_ = [make_state([0.6], [1], lam=[1.0, 0.0, 1.0, 0.0], lam_prime=[0.9, 0.1, 0.7, 0.2])]
        ds, _ = losses.denoising_loss(st_, LossConfig(denoising_scope="snippet_only"))
        assert ds.item() == 0.0

    def test_bce_exact_labels_zero(self):
        st_ = [make_state([0.6], [1], lam=[1.0, 0.0, 1.0], lam_prime=[0.9, 0.1, 0.7])]
        ds, _ = losses.denoising_loss(st_, LossConfig(denoising_variant="bce",
                                                      denoising_scope="snippet_only"))
        assert ds.item() < 1e-10

    def test_l1_value(self):
        st_ = [make_state([0.6], [1], lam=[0.8, 0.3], lam_prime=[0.9, 0.1])]
        ds, _ = losses.denoising_loss(st_, LossConfig(denoising_variant="l1", denoising_scope="snippet_only"))
        # P = [[0.8, 0.3], [0.2, 0.7]] against [[1, 0], [0, 1]]
        assert ds.item() == pytest.approx((0.2 + 0.3 + 0.2 + 0.3) / 4)

    def test_no_valid_joint(self):
        st_ = [make_state([0.6], [1], lam_prime=[0.9, 0.9, 0.8, 0.7])]
        ds, _ = losses.denoising_loss(st_, LossConfig())
        assert ds is None

    def test_zero_video_joint_skipped(self, caplog):
        st_ = [make_state([0.6, 0.3], [0, 0])]
        _, dv = losses.denoising_loss(st_, LossConfig(denoising_scope="video_only"))
        assert dv is None
        assert "skipping" in caplog.text

    def test_none_variant(self):
        assert losses.denoising_loss([make_state([0.5], [1])], LossConfig(denoising_variant="none")) == (
            None, None)


def _model_batch(seed=0, n=3, s=12, d=8, C=4):
    rng = np.random.default_rng(seed)
    params = init_params(ModelConfig(feature_dim=d, num_classes=C, seed=seed))
    for _, a in params.items():
        a.values += 0.3 * rng.standard_normal(a.values.shape)
    feats = [(rng.standard_normal((s, d)), rng.standard_normal((s, d))) for _ in range(n)]
    ys = [np.eye(C)[i % C] for i in range(n)]
    x_ref = rng.standard_normal(d // 2)
    return params, feats, ys, x_ref


class TestTotal:
    def _states(self, params, feats, ys, x_ref, cfg):
        return [losses.build_state(forward(params, r, f), y, x_ref, cfg) for (r, f), y in zip(feats, ys)]

    def test_alpha_zero_equals_dis(self):
        params, feats, ys, x_ref = _model_batch()
        cfg = LossConfig(alpha=0.0)
        states = self._states(params, feats, ys, x_ref, cfg)
        assert losses.total_loss(states, [1, 2, 0], cfg).item() == \
            losses.discriminative_loss(states, [1, 2, 0], cfg).item()

    def test_total_composition(self):
        params, feats, ys, x_ref = _model_batch(1)
        cfg = LossConfig()
        states = self._states(params, feats, ys, x_ref, cfg)
        terms = losses.compute_losses(states, [2, 0, 1], cfg)
        parts = terms.scalars()
        assert parts["total"] == pytest.approx(parts["L_Dis"] + 0.2 * (parts["L_DS"] + parts["L_DV"]),
                                               rel=1e-14)

    def test_labels_and_reference_stay_detached(self):
        params, feats, ys, x_ref = _model_batch(2)
        ref_before = x_ref.copy()
        cfg = LossConfig()
        states = self._states(params, feats, ys, x_ref, cfg)
        terms = losses.compute_losses(states, [1, 2, 0], cfg)
        nd.backward(terms.total)
        for st_ in states:
            if st_.joint.valid:
                assert not st_.joint.Y.grad.any()
                assert not st_.joint.Y.requires_grad
        np.testing.assert_array_equal(x_ref, ref_before)
        assert any(a.grad.any() for _, a in params.items())

    @pytest.mark.parametrize("variant", ["pdmi", "l1", "bce"])
    def test_finite_everywhere(self, variant):
        params, feats, ys, x_ref = _model_batch(3)
        cfg = replace(LossConfig(), denoising_variant=variant)
        states = self._states(params, feats, ys, x_ref, cfg)
        nd.backward(losses.total_loss(states, [1, 2, 0], cfg))
        for _, a in params.items():
            assert np.all(np.isfinite(a.grad))
