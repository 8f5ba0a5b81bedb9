import math

import numpy as np
import pytest

from autopark import autodiff as ad
from autopark import bev, nn
from autopark import world as w
from autopark.autodiff import Tensor
from autopark.camera import default_rig, render
from autopark.optim import Adam

RIG = default_rig()
GEO = bev.splat_geometry(RIG)


def const_response(encoder, value):
    """Hand-propagated response of the encoder to a spatially constant input, away from the border."""
    x = np.full(3, value)
    for i, conv in enumerate(encoder.stages):
        x = np.einsum("c,hwco->o", x, conv.weight.data) + conv.bias.data
        if i < len(encoder.stages) - 1:
            x = np.maximum(x, 0.0)
    return x


class TestEncoder:
    def test_output_shape(self, rng):
        enc = bev.ImageEncoder(rng)
        out = bev.encode_images(enc, np.zeros((2, 128, 128, 3)))
        assert out.shape == (2, 16, 16, 32)

    def test_wrong_resolution(self, rng):
        with pytest.raises(ValueError):
            bev.encode_images(bev.ImageEncoder(rng), np.zeros((1, 64, 64, 3)))

    def test_zero_image_bias_only(self, rng):
        enc = bev.ImageEncoder(rng)
        for conv in enc.stages:
            conv.bias.data[:] = rng.normal(size=conv.bias.shape)
        out = bev.encode_images(enc, np.zeros((1, 128, 128, 3))).data[0]
        # zero padding perturbs only the first row and column of every stride-2 stage
        interior = out[1:, 1:]
        assert np.max(np.abs(interior - const_response(enc, 0.0))) < 1e-12
        assert np.array_equal(out, bev.encode_images(enc, np.zeros((1, 128, 128, 3))).data[0])

    def test_zero_image_zero_bias(self, rng):
        out = bev.encode_images(bev.ImageEncoder(rng), np.zeros((1, 128, 128, 3))).data
        assert np.array_equal(out, np.zeros_like(out))

    def test_weight_sharing(self, rng):
        enc = bev.ImageEncoder(rng)
        img = rng.random((128, 128, 3))
        out = bev.encode_images(enc, np.stack([img, img])).data
        assert np.array_equal(out[0], out[1])

    def test_gradient(self, rng):
        enc = bev.ImageEncoder(rng, widths=(4, 6, 5))
        img = rng.random((1, 16, 16, 3))
        wt = rng.normal(size=(1, 2, 2, 5))
        err = ad.finite_diff_check(lambda: (enc(img) * wt).sum(), enc.parameters())
        assert err < 1e-4


class TestDepth:
    def test_normalised(self, rng):
        head = bev.DepthHead(rng)
        fmap = rng.normal(0, 5, size=(2, 4, 16, 16, 32))
        prior = np.broadcast_to(GEO.prior, (2,) + GEO.prior.shape)
        d = bev.predict_depth(head, fmap, prior).data
        assert np.max(np.abs(d.sum(-1) - 1.0)) < 1e-6 and d.min() >= 0

    def test_zero_head_uniform(self, rng):
        head = bev.DepthHead(rng)
        head.proj.weight.data[:] = 0.0
        d = bev.predict_depth(head, rng.normal(size=(1, 16, 16, 32)), rng.random((1, 16, 16, 24))).data
        assert np.max(np.abs(d - 1.0 / 24)) < 1e-15

    def test_depth_bins(self):
        assert bev.depth_bin([0.49, 0.5, 0.99, 1.0, 12.49, 12.5]).tolist() == [-1, 0, 0, 1, 23, -1]
        assert np.allclose(bev.DEPTH_CENTRES[[0, -1]], [0.75, 12.25])

    def test_prior_peaks_at_ground_depth(self):
        for k, cam in enumerate(RIG):
            g = bev.ground_depth(cam)
            hit = (g >= bev.DEPTH_MIN) & (g < bev.DEPTH_MAX)
            assert hit.sum() > 0
            assert np.array_equal(GEO.prior[k][hit].argmax(-1), bev.depth_bin(g[hit]))

    @pytest.mark.slow
    def test_overfit_one_frame(self):
        rng = np.random.default_rng(0)
        state = w.spawn_episode(2, "vertical", pedestrians=3)
        frames = render(state, RIG)
        images = np.stack([f.image for f in frames])
        targets = bev.depth_targets(np.stack([f.depth for f in frames])[None])
        enc, head = bev.ImageEncoder(rng), bev.DepthHead(rng)
        opt = Adam(enc.parameters() + head.parameters(), lr=1e-2)
        prior = GEO.prior[None]
        for _ in range(200):
            opt.zero_grad()
            fmap = bev.encode_images(enc, images).reshape(1, 4, 16, 16, 32)
            loss = bev.depth_loss(head.logits(fmap, prior), targets)
            loss.backward()
            opt.step()
        fmap = bev.encode_images(enc, images).reshape(1, 4, 16, 16, 32)
        pred = head(fmap, prior).data.argmax(-1)
        hit = targets >= 0
        assert (pred[hit] == targets[hit]).mean() >= 0.8


class TestGrid:
    def test_origin_cell(self):
        assert bev.bev_cell([0.0, 0.0, 0.0]) == 100 * 200 + 100

    def test_cell_bounds(self):
        cells = bev.bev_cell(np.array([[-10.0, -10.0, 0], [9.999, 9.999, 0], [10.0, 0, 0], [0, -10.01, 0],
                                       [0, 0, 3.0], [0, 0, 3.01]]))
        assert cells.tolist() == [0, 199 * 200 + 199, -1, -1, 100 * 200 + 100, -1]

    def test_delta_depth_single_cell(self, rng):
        feats = rng.normal(size=(1, 4, 16, 16, 8))
        depths = np.zeros((1, 4, 16, 16, 24))
        pix = np.flatnonzero(GEO.cells >= 0)[123]
        p, k = divmod(pix, 24)
        cam, rem = divmod(p, 256)
        i, j = divmod(rem, 16)
        depths[0, cam, i, j, k] = 1.0
        grid = bev.lift_splat(feats, depths, GEO).data[0].reshape(-1, 8)
        nz = np.flatnonzero(np.abs(grid).sum(-1))
        assert nz.tolist() == [GEO.cells[p, k]]
        assert np.array_equal(grid[GEO.cells[p, k]], feats[0, cam, i, j])

    def test_mass_conservation(self, rng):
        feats = rng.normal(size=(2, 4, 16, 16, 3))
        depths = rng.dirichlet(np.ones(24), size=(2, 4, 16, 16))
        grid = bev.lift_splat(feats, depths, GEO).data
        contrib = feats.reshape(2, -1, 1, 3) * depths.reshape(2, -1, 24, 1)
        dropped = contrib[:, GEO.cells < 0].sum(axis=1)
        total = contrib.sum(axis=(1, 2))
        assert np.max(np.abs(grid.sum(axis=(1, 2)) - (total - dropped))) < 1e-9

    def test_camera_permutation_invariant(self, rng):
        feats = rng.normal(size=(1, 4, 16, 16, 4))
        depths = rng.dirichlet(np.ones(24), size=(1, 4, 16, 16))
        perm = [2, 0, 3, 1]
        geo_p = bev.SplatGeometry([RIG[i] for i in perm])
        a = bev.lift_splat(feats, depths, GEO).data
        b = bev.lift_splat(feats[:, perm], depths[:, perm], geo_p).data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_camera_count_mismatch(self, rng):
        with pytest.raises(ValueError):
            bev.lift_splat(np.zeros((1, 3, 16, 16, 2)), np.zeros((1, 3, 16, 16, 24)), GEO)

    def test_pooled_path_matches_full_grid(self, rng):
        feats = rng.normal(size=(1, 4, 16, 16, 32))
        depths = rng.dirichlet(np.ones(24), size=(1, 4, 16, 16))
        full = bev.avg_pool_tokens(bev.add_posenc(bev.lift_splat(feats, depths, GEO))).data
        fused = bev.pooled_bev(feats, depths, GEO).data
        assert np.max(np.abs(full - fused)) < 1e-10


class TestPosenc:
    def test_origin_cell(self):
        pe = bev.posenc_2d()
        assert np.array_equal(pe[0, 0, 0::2], np.zeros(16)) and np.array_equal(pe[0, 0, 1::2], np.ones(16))

    def test_bounded(self):
        pe = bev.posenc_2d()
        assert pe.min() >= -1.0 and pe.max() <= 1.0

    def test_separable(self):
        pe = bev.posenc_2d()
        assert np.array_equal(pe[3, 50, 16:], pe[170, 50, 16:])
        assert np.array_equal(pe[3, 50, :16], pe[3, 9, :16])

    def test_odd_channels_rejected(self):
        with pytest.raises(ValueError):
            bev.add_posenc(np.zeros((1, 4, 4, 3)))

    def test_frequency_ladder(self):
        pe = bev.posenc_2d(size=8, channels=8)
        freqs = 1.0 / 10000.0 ** (np.arange(0, 4, 2) / 4)
        assert np.max(np.abs(pe[5, 0, 0::2][:2] - np.sin(5 * freqs))) < 1e-15


class TestGoal:
    def test_identical_goals(self, rng):
        mlp = nn.MLP(rng, 4, 64, 64)
        f = bev.goal_features(w.GoalSlot(3.0, 4.0, 0.5, "vertical"), w.VehiclePose(0, 0, 0))
        assert np.array_equal(bev.goal_encode(mlp, f).data, bev.goal_encode(mlp, f.copy()).data)

    def test_angle_periodicity(self):
        ego = w.VehiclePose(1.0, -2.0, 0.3)
        a = bev.goal_features(w.GoalSlot(3.0, 4.0, 0.5, "vertical"), ego)
        b = bev.goal_features(w.GoalSlot(3.0, 4.0, 0.5 + 2 * math.pi, "vertical"), ego)
        assert np.max(np.abs(a - b)) < 1e-12

    def test_ego_frame(self):
        f = bev.goal_features(w.GoalSlot(0.0, 5.0, math.pi / 2, "vertical"), w.VehiclePose(0.0, 0.0, math.pi / 2))
        assert np.max(np.abs(f - [0.5, 0.0, 1.0, 0.0])) < 1e-12

    def test_goal_gradient(self, rng):
        mlp = nn.MLP(rng, 4, 16, 8)
        x = rng.normal(size=(3, 4))
        wt = rng.normal(size=(3, 8))
        assert ad.finite_diff_check(lambda: (bev.goal_encode(mlp, x) * wt).sum(), mlp.parameters()) < 1e-4


class TestGoalAttention:
    def test_singleton(self, rng):
        attn = nn.MultiHeadAttention(rng, 16, 4)
        goal, tok = rng.normal(size=(2, 16)), rng.normal(size=(2, 1, 16))
        out, weights = bev.goal_cross_attention(attn, Tensor(goal), Tensor(tok))
        value = attn.o(attn.v(tok)).data
        assert np.max(np.abs(out.data - (tok + value))) < 1e-12
        assert np.array_equal(weights, np.ones((2, 4, 1, 1)))

    def test_weights_normalised(self, rng):
        attn = nn.MultiHeadAttention(rng, 64, 4)
        tok = Tensor(rng.normal(0, 3, (2, 625, 64)))
        _, weights = bev.goal_cross_attention(attn, Tensor(rng.normal(size=(2, 64))), tok)
        assert weights.shape == (2, 4, 1, 625)
        assert weights.min() >= 0 and np.max(np.abs(weights.sum(-1) - 1.0)) < 1e-12

    def test_context_broadcast_to_every_token(self, rng):
        attn = nn.MultiHeadAttention(rng, 8, 4)
        tok = rng.normal(size=(1, 5, 8))
        out, _ = bev.goal_cross_attention(attn, Tensor(rng.normal(size=(1, 8))), Tensor(tok))
        delta = out.data - tok
        assert np.max(np.abs(delta - delta[:, :1])) < 1e-12

    def test_gradient(self, rng):
        attn = nn.MultiHeadAttention(rng, 8, 4)
        goal, tok = rng.normal(size=(2, 8)), rng.normal(size=(2, 6, 8))
        wt = rng.normal(size=(2, 6, 8))
        err = ad.finite_diff_check(lambda: (bev.goal_cross_attention(attn, Tensor(goal), Tensor(tok))[0] * wt).sum(),
                                   attn.parameters())
        assert err < 1e-4


class TestPerception:
    def test_forward_shapes(self, rng):
        model = bev.BevPerception(rng, RIG)
        out = model(rng.random((1, 4, 128, 128, 3)), np.array([[0.3, 0.1, 1.0, 0.0]]))
        assert out.tokens.shape == (1, 625, 64) and out.depth.shape == (1, 4, 16, 16, 24)
        assert np.all(np.isfinite(out.tokens.data))
        assert out.goal_weights.shape == (1, 4, 1, 625)

    def test_drop_goal_context(self, rng):
        model = bev.BevPerception(rng, RIG)
        images, goal = rng.random((1, 4, 128, 128, 3)), np.array([[0.3, 0.1, 1.0, 0.0]])
        plain = model(images, goal, drop_goal_context=True)
        full = model(images, goal)
        assert plain.goal_weights is None
        delta = full.tokens.data - plain.tokens.data
        assert np.max(np.abs(delta - delta[:, :1])) < 1e-12 and np.abs(delta).max() > 0

    def test_concat_variant(self, rng):
        model = bev.BevPerception(rng, RIG, target_concat=True)
        out = model(rng.random((1, 4, 128, 128, 3)), np.array([[0.3, 0.1, 1.0, 0.0]]))
        assert out.tokens.shape == (1, 625, 64) and out.goal_weights is None
        assert "concat_proj.weight" in model.named_parameters()

    def test_parameter_budget(self, rng):
        assert bev.ImageEncoder(rng).num_parameters() == 37_856
        assert bev.BevPerception(rng, RIG).num_parameters() == 62_456
