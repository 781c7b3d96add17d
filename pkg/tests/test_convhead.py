import numpy as np
import pytest

from mveq import oracles
from mveq.convhead import (
    AdamWState,
    HeadParams,
    TrainConfig,
    adamw_step,
    adamw_update_arrays,
    head_backward,
    head_forward,
    load_head,
    save_head,
    save_loss_curve,
    train,
)
from mveq.errors import ConfigurationError
from mveq.rng import SplitMix64
from mveq.tasks import apply_head, eval_equivariance
from tests.conftest import rand_map


class TestHeadForward:
    def test_zero_init_residual_is_bitwise_identity(self, rng):
        m = rand_map(rng, 6, 6, 4, patch=2)
        out = head_forward(m, HeadParams.zero_init(4))
        assert np.array_equal(out.data, m.data)

    def test_identity_kernel_no_residual(self, rng):
        m = rand_map(rng, 5, 5, 3)
        w = np.zeros((3, 3, 3, 3), np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = head_forward(m, HeadParams([(w, np.zeros(3, np.float32))], residual=False))
        np.testing.assert_allclose(out.data, m.data, atol=1e-6)

    def test_matches_six_loop_oracle(self, rng):
        m = rand_map(rng, 5, 5, 4)
        w = rng.normal_array(4 * 4 * 9).reshape(4, 4, 3, 3).astype(np.float32)
        b = rng.normal_array(4).astype(np.float32)
        out = head_forward(m, HeadParams([(w, b)], residual=False))
        ref = oracles.conv3x3_loop(
            m.data.astype(np.float64), w.astype(np.float64), b.astype(np.float64)
        )
        np.testing.assert_allclose(out.data, ref, atol=1e-5)

    def test_linear_superposition_without_residual(self, rng):
        a = rand_map(rng, 4, 4, 3)
        b = rand_map(rng, 4, 4, 3)
        w = rng.normal_array(3 * 3 * 9).reshape(3, 3, 3, 3).astype(np.float32)
        params = HeadParams([(w, np.zeros(3, np.float32))], residual=False)
        from mveq.featstore import FeatureMap

        summed = FeatureMap(a.data + b.data, 1, 4, 4)
        lhs = head_forward(summed, params).data
        rhs = head_forward(a, params).data + head_forward(b, params).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_channel_mismatch(self, rng):
        m = rand_map(rng, 4, 4, 3)
        with pytest.raises(ConfigurationError):
            head_forward(m, HeadParams.zero_init(5))

    def test_layer_count_limits(self):
        with pytest.raises(ConfigurationError):
            HeadParams.zero_init(4, n_layers=4)

    def test_residual_needs_square_weights(self):
        w = np.zeros((2, 3, 3, 3), np.float32)
        with pytest.raises(ConfigurationError):
            HeadParams([(w, np.zeros(2, np.float32))], residual=True)


class TestHeadBackward:
    def test_gradients_match_fd(self, rng):
        m = rand_map(rng, 4, 4, 3)
        w = (rng.normal_array(2 * 3 * 9) * 0.3).reshape(2, 3, 3, 3).astype(np.float32)
        b = (rng.normal_array(2) * 0.1).astype(np.float32)
        params = HeadParams([(w, b)], residual=False)
        d_out = rng.normal_array(4 * 4 * 2).reshape(4, 4, 2)
        d_layers, d_input = head_backward(m, params, d_out)
        dw, db = d_layers[0]

        def loss_of_w(wv):
            p = HeadParams([(wv.astype(np.float32), b)], residual=False)
            return float(np.sum(head_forward(m, p).data.astype(np.float64) * d_out))

        fd_w = oracles.finite_difference(loss_of_w, w.astype(np.float64).copy(), h=1e-3)
        scale = max(np.max(np.abs(fd_w)), 1e-8)
        assert np.max(np.abs(fd_w - dw)) / scale < 1e-3  # float32 forward

    def test_zero_upstream_grad(self, rng):
        m = rand_map(rng, 4, 4, 2)
        params = HeadParams.zero_init(2)
        d_layers, d_input = head_backward(m, params, np.zeros((4, 4, 2)))
        assert np.all(d_layers[0][0] == 0) and np.all(d_layers[0][1] == 0)
        assert np.all(d_input == 0)

    def test_residual_adds_upstream_to_input_grad(self, rng):
        m = rand_map(rng, 4, 4, 2)
        w = (rng.normal_array(2 * 2 * 9) * 0.3).reshape(2, 2, 3, 3).astype(np.float32)
        b = np.zeros(2, np.float32)
        d_out = rng.normal_array(4 * 4 * 2).reshape(4, 4, 2)
        _, d_in_res = head_backward(m, HeadParams([(w, b)], residual=True), d_out)
        _, d_in_plain = head_backward(m, HeadParams([(w, b)], residual=False), d_out)
        np.testing.assert_allclose(d_in_res, d_in_plain + d_out, atol=1e-12)

    def test_shape_mismatch(self, rng):
        m = rand_map(rng, 4, 4, 2)
        with pytest.raises(ConfigurationError):
            head_backward(m, HeadParams.zero_init(2), np.zeros((3, 4, 2)))


class TestAdamW:
    def test_zero_grads_no_decay_unchanged(self):
        p = [np.ones((3, 3), np.float32)]
        s = AdamWState.init(p, lr=0.1, weight_decay=0.0)
        adamw_update_arrays(p, [np.zeros((3, 3))], s)
        np.testing.assert_array_equal(p[0], np.ones((3, 3), np.float32))

    def test_hand_computed_first_step(self):
        # theta=1, g=1, lr=0.1, wd=0: m_hat = v_hat = 1 -> theta ~ 0.9.
        p = [np.ones(1, np.float32)]
        s = AdamWState.init(p, lr=0.1, weight_decay=0.0)
        adamw_update_arrays(p, [np.ones(1)], s)
        assert p[0][0] == pytest.approx(0.9, abs=1e-6)
        assert s.step == 1

    def test_decoupled_decay_only(self):
        p = [np.full(4, 2.0, np.float32)]
        s = AdamWState.init(p, lr=0.1, weight_decay=0.01)
        adamw_update_arrays(p, [np.zeros(4)], s)
        np.testing.assert_allclose(p[0], 2.0 * (1 - 0.1 * 0.01), atol=1e-7)

    def test_headparams_wrapper(self):
        params = HeadParams.zero_init(2)
        s = AdamWState.init(params.arrays(), lr=0.01)
        grads = [(np.ones((2, 2, 3, 3)), np.ones(2))]
        adamw_step(params, grads, s)
        assert params.layers[0][0].min() < 0  # moved against the gradient

    def test_shape_validation(self):
        p = [np.ones((2, 2), np.float32)]
        s = AdamWState.init(p)
        with pytest.raises(ConfigurationError):
            adamw_update_arrays(p, [np.ones(3)], s)


class TestCheckpointIO:
    def test_roundtrip(self, tmp_path, rng):
        w = rng.normal_array(3 * 3 * 9).reshape(3, 3, 3, 3).astype(np.float32)
        b = rng.normal_array(3).astype(np.float32)
        params = HeadParams([(w, b)], residual=True)
        path = tmp_path / "head.hed"
        save_head(path, params)
        loaded = load_head(path)
        assert loaded.residual == params.residual
        np.testing.assert_array_equal(loaded.layers[0][0], w)
        np.testing.assert_array_equal(loaded.layers[0][1], b)

    def test_zero_layers(self, tmp_path):
        path = tmp_path / "empty.hed"
        save_head(path, HeadParams([], residual=True))
        assert len(load_head(path).layers) == 0

    def test_loss_curve_csv(self, tmp_path):
        path = tmp_path / "loss.csv"
        save_loss_curve(path, [0.5, 0.25])
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration,loss"
        assert lines[1] == "0,0.5"


class TestTrain:
    def test_zero_iterations_returns_init(self, plane_oracle_views):
        views = {"obj": plane_oracle_views[:3]}
        params, losses = train(views, TrainConfig(iterations=0, seed=1))
        assert losses == []
        ref = HeadParams.zero_init(4)
        np.testing.assert_array_equal(params.layers[0][0], ref.layers[0][0])

    def test_same_seed_bit_identical(self, plane_oracle_views):
        views = {"obj": plane_oracle_views[:4]}
        cfg = TrainConfig(iterations=5, pixels_per_pair=16, seed=9, lr=1e-3, tau=0.01, corr_stride=2)
        p1, l1 = train(views, cfg)
        p2, l2 = train(views, cfg)
        assert l1 == l2
        np.testing.assert_array_equal(p1.layers[0][0], p2.layers[0][0])
        np.testing.assert_array_equal(p1.layers[0][1], p2.layers[0][1])

    def test_different_seeds_differ(self, plane_oracle_views):
        views = {"obj": plane_oracle_views[:4]}
        cfg1 = TrainConfig(iterations=5, pixels_per_pair=16, seed=1, lr=1e-3, tau=0.01, corr_stride=2)
        cfg2 = TrainConfig(iterations=5, pixels_per_pair=16, seed=2, lr=1e-3, tau=0.01, corr_stride=2)
        _, l1 = train(views, cfg1)
        _, l2 = train(views, cfg2)
        assert l1 != l2

    def test_loss_decreases_and_ape_improves(self, plane_oracle_views):
        views = {"obj": plane_oracle_views[:7]}
        held = plane_oracle_views[7:]
        base = eval_equivariance({"obj": held}, stride=4)
        cfg = TrainConfig(
            iterations=150, pixels_per_pair=64, seed=5, lr=1e-3, tau=0.01, corr_stride=2
        )
        params, losses = train(views, cfg)
        assert np.mean(losses[-20:]) < np.mean(losses[:20])
        tuned = eval_equivariance({"obj": [apply_head(v, params) for v in held]}, stride=4)
        assert tuned["ape"] < base["ape"]
        assert tuned["pcdp"]["0.05"] > base["pcdp"]["0.05"]

    def test_contrastive_loss_mode(self, plane_oracle_views):
        views = {"obj": plane_oracle_views[:4]}
        cfg = TrainConfig(
            iterations=5, pixels_per_pair=16, seed=3, lr=1e-3, loss="contrastive", temp=0.07,
            corr_stride=2,
        )
        _, losses = train(views, cfg)
        assert len(losses) == 5
        assert all(np.isfinite(losses))

    def test_ball_positive_mode_runs(self, plane_oracle_views):
        views = {"obj": plane_oracle_views[:4]}
        cfg = TrainConfig(
            iterations=3, pixels_per_pair=8, seed=3, lr=1e-3, tau=0.01,
            positive_mode="ball", positive_radius=1.0, corr_stride=2,
        )
        _, losses = train(views, cfg)
        assert len(losses) == 3

    def test_single_view_object_skipped(self, plane_oracle_views):
        views = {"solo": plane_oracle_views[:1], "obj": plane_oracle_views[1:4]}
        with pytest.warns(UserWarning, match="fewer than 2 views"):
            train(views, TrainConfig(iterations=1, pixels_per_pair=8, seed=0, tau=0.01, corr_stride=2))

    def test_no_usable_objects(self, plane_oracle_views):
        with pytest.warns(UserWarning):
            with pytest.raises(ConfigurationError):
                train({"solo": plane_oracle_views[:1]}, TrainConfig(iterations=1, seed=0))

    def test_vectorized_loss_matches_instance_path(self, plane_oracle_views):
        # The fast single-positive path must agree with per-query instances.
        from mveq.convhead import _pair_loss_ball, _pair_loss_nearest
        from mveq.featstore import l2_normalize_rows

        rng = SplitMix64(77)
        k = 12
        q = l2_normalize_rows(rng.normal_array(k * 5).reshape(k, 5))
        f = l2_normalize_rows(rng.normal_array(k * 5).reshape(k, 5))
        cfg = TrainConfig(iterations=1, pixels_per_pair=8, tau=0.37, loss="smooth_ap")
        loss_fast, dq_fast, df_fast = _pair_loss_nearest(q, f, cfg)
        groups = [[i] for i in range(k)]
        loss_ref, dq_ref, df_ref = _pair_loss_ball(q, groups, f, cfg)
        assert loss_fast == pytest.approx(loss_ref, abs=1e-12)
        np.testing.assert_allclose(dq_fast, dq_ref, atol=1e-12)
        np.testing.assert_allclose(df_fast, df_ref, atol=1e-12)

        cfg_c = TrainConfig(iterations=1, pixels_per_pair=8, temp=0.11, loss="contrastive")
        loss_fast, dq_fast, df_fast = _pair_loss_nearest(q, f, cfg_c)
        loss_ref, dq_ref, df_ref = _pair_loss_ball(q, groups, f, cfg_c)
        assert loss_fast == pytest.approx(loss_ref, abs=1e-12)
        np.testing.assert_allclose(dq_fast, dq_ref, atol=1e-12)
        np.testing.assert_allclose(df_fast, df_ref, atol=1e-12)
