import numpy as np
import pytest

from cropvit import backbone as bb
from cropvit import tensor as tt
from cropvit.errors import ConfigError
from cropvit.tensor import Tensor

from gradcheck import assert_grads_close


def tiny_config(**kw):
    defaults = dict(embed_dim=16, num_heads=2, num_blocks=2, ffn_kind="swiglu",
                    patch_size=4, input_resolution=16)
    defaults.update(kw)
    return bb.ModelConfig(**defaults)


def rand_image(rng, side, channels=3):
    return rng.uniform(0.0, 1.0, size=(side, side, channels))


class TestModelConfig:
    def test_presets_match_published_table(self):
        expected = {"base": (768, 12, 18), "large": (1024, 16, 24),
                    "giant": (1536, 24, 40)}
        for name, (d, h, n) in expected.items():
            cfg = bb.preset(name)
            assert (cfg.embed_dim, cfg.num_heads, cfg.num_blocks) == (d, h, n)
            assert cfg.head_dim == d // h
            assert cfg.patch_size == 14

    def test_head_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            bb.ModelConfig(embed_dim=10, num_heads=3, num_blocks=1)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            bb.preset("huge")


class TestPatchify:
    def test_token_count_224(self):
        cfg = bb.ModelConfig(embed_dim=8, num_heads=2, num_blocks=1,
                             patch_size=14, input_resolution=224)
        params = bb.init_backbone_params(cfg, np.random.default_rng(0))
        img = np.zeros((224, 224, 3))
        seq = bb.patchify_embed(img, params, cfg)
        assert seq.n_patches == 256
        assert seq.tokens.shape == (261, 8)

    def test_token_count_28(self):
        cfg = bb.ModelConfig(embed_dim=8, num_heads=2, num_blocks=1,
                             patch_size=14, input_resolution=28)
        params = bb.init_backbone_params(cfg, np.random.default_rng(0))
        seq = bb.patchify_embed(np.zeros((28, 28, 3)), params, cfg)
        assert seq.n_patches == 4 and seq.tokens.shape == (9, 8)

    def test_token_accounting_many_resolutions(self):
        cfg = bb.ModelConfig(embed_dim=8, num_heads=2, num_blocks=1,
                             patch_size=14, input_resolution=28)
        params = bb.init_backbone_params(cfg, np.random.default_rng(0))
        for side in (14, 28, 42, 56, 112):
            seq = bb.patchify_embed(np.zeros((side, side, 3)), params, cfg)
            n = (side // 14) ** 2
            assert seq.tokens.shape[0] == n + 5

    def test_zero_image_zero_projection(self):
        cfg = tiny_config()
        params = bb.init_backbone_params(cfg, np.random.default_rng(1))
        params["patch_embed.b"] = Tensor(np.zeros((1, cfg.embed_dim)))
        params["pos_embed"] = Tensor(np.zeros(params["pos_embed"].shape))
        seq = bb.patchify_embed(np.zeros((16, 16, 3)), params, cfg)
        assert np.array_equal(seq.patches.data, np.zeros((16, cfg.embed_dim)))

    def test_indivisible_resolution_rejected(self):
        cfg = tiny_config()
        params = bb.init_backbone_params(cfg, np.random.default_rng(1))
        with pytest.raises(ConfigError):
            bb.patchify_embed(np.zeros((18, 18, 3)), params, cfg)

    def test_mask_token_substitution(self):
        cfg = tiny_config()
        rng = np.random.default_rng(2)
        params = bb.init_backbone_params(cfg, rng)
        img = rand_image(rng, 16)
        mask = np.zeros(16, dtype=bool)
        mask[3] = mask[7] = True
        plain = bb.patchify_embed(img, params, cfg)
        masked = bb.patchify_embed(img, params, cfg, mask=mask)
        pe = params["pos_embed"].data[bb.NUM_PREFIX_TOKENS:]
        expect = params["mask_token"].data[0] + pe[3]
        assert np.allclose(masked.patches.data[3], expect)
        keep = ~mask
        assert np.allclose(masked.patches.data[keep], plain.patches.data[keep])


class TestAttention:
    def test_single_token_reduces_to_value(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 6))
        wq, wk, wv = (rng.normal(size=(6, 3)) for _ in range(3))
        out = bb.attention(Tensor(x), Tensor(wq), Tensor(wk), Tensor(wv))
        assert np.allclose(out.data, x @ wv)

    def test_weight_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 6))
        w = bb.attention_weights(x, rng.normal(size=(6, 3)), rng.normal(size=(6, 3)))
        assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 8))
        wq, wk, wv = (rng.normal(size=(8, 4)) for _ in range(3))
        perm = rng.permutation(6)
        out = bb.attention(Tensor(x), Tensor(wq), Tensor(wk), Tensor(wv)).data
        out_p = bb.attention(Tensor(x[perm]), Tensor(wq), Tensor(wk), Tensor(wv)).data
        assert np.allclose(out_p, out[perm], atol=1e-12)


class TestMultiHead:
    def test_single_head_equals_attention_times_wo(self):
        cfg = tiny_config(num_heads=1)
        rng = np.random.default_rng(6)
        params = bb.init_backbone_params(cfg, rng)
        x = Tensor(rng.normal(size=(7, cfg.embed_dim)))
        got = bb.multi_head_attention(x, params, "block0.", 1).data
        att = bb.attention(x, params["block0.attn.h0.wq"],
                           params["block0.attn.h0.wk"],
                           params["block0.attn.h0.wv"])
        assert np.allclose(got, att.data @ params["block0.attn.wo"].data)

    def test_zero_wo_zero_output(self):
        cfg = tiny_config()
        rng = np.random.default_rng(7)
        params = bb.init_backbone_params(cfg, rng)
        params["block0.attn.wo"] = Tensor(np.zeros((16, 16)))
        x = Tensor(rng.normal(size=(5, 16)))
        out = bb.multi_head_attention(x, params, "block0.", cfg.num_heads)
        assert np.array_equal(out.data, np.zeros((5, 16)))

    def test_output_shape_random_dims(self):
        rng = np.random.default_rng(8)
        for _ in range(4):
            heads = int(rng.integers(1, 5))
            d = heads * int(rng.integers(2, 5))
            t = int(rng.integers(2, 9))
            cfg = bb.ModelConfig(embed_dim=d, num_heads=heads, num_blocks=1,
                                 patch_size=4, input_resolution=8)
            params = bb.init_backbone_params(cfg, rng)
            out = bb.multi_head_attention(Tensor(rng.normal(size=(t, d))),
                                          params, "block0.", heads)
            assert out.shape == (t, d)


class TestFFN:
    @pytest.mark.parametrize("kind", ["relu", "swiglu"])
    def test_zero_input_no_bias(self, kind):
        cfg = tiny_config(ffn_kind=kind)
        params = bb.init_backbone_params(cfg, np.random.default_rng(9))
        x = Tensor(np.zeros((3, cfg.embed_dim)))
        out = bb.ffn(x, params, "block0.", kind)
        assert np.array_equal(out.data, np.zeros((3, cfg.embed_dim)))

    def test_relu_all_negative_gives_b2(self):
        cfg = tiny_config(ffn_kind="relu")
        rng = np.random.default_rng(10)
        params = bb.init_backbone_params(cfg, rng)
        params["block0.ffn.b1"] = Tensor(np.full((1, 64), -100.0))
        params["block0.ffn.b2"] = Tensor(rng.normal(size=(1, 16)))
        x = Tensor(np.zeros((2, 16)))
        out = bb.ffn(x, params, "block0.", "relu")
        assert np.allclose(out.data, np.broadcast_to(params["block0.ffn.b2"].data, (2, 16)))

    @pytest.mark.parametrize("kind", ["relu", "swiglu"])
    def test_gradcheck(self, kind):
        cfg = tiny_config(embed_dim=6, num_heads=2, ffn_kind=kind)
        rng = np.random.default_rng(11)
        params = bb.init_backbone_params(cfg, rng)
        leaves = [v for k, v in params.items() if k.startswith("block0.ffn.")]
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        w = rng.normal(size=(3, 6))

        def loss():
            return tt.tsum(tt.mul(bb.ffn(x, params, "block0.", kind), Tensor(w)))

        assert_grads_close(loss, leaves + [x], what=f"ffn-{kind}")


class TestBlockAndForward:
    def test_zeroed_projections_make_identity(self):
        cfg = tiny_config()
        rng = np.random.default_rng(12)
        params = bb.init_backbone_params(cfg, rng)
        d = cfg.embed_dim
        for i in range(cfg.num_blocks):
            params[f"block{i}.attn.wo"] = Tensor(np.zeros((d, d)))
            params[f"block{i}.ffn.w2"] = Tensor(np.zeros_like(params[f"block{i}.ffn.w2"].data))
            params[f"block{i}.ffn.b2"] = Tensor(np.zeros((1, d)))
        x = rng.normal(size=(9, d))
        out = bb.transformer_block(Tensor(x), params, cfg, 0)
        assert np.array_equal(out.data, x)

    def test_shape_preserved(self):
        cfg = tiny_config()
        rng = np.random.default_rng(13)
        params = bb.init_backbone_params(cfg, rng)
        for t in (1, 4, 11):
            out = bb.transformer_block(Tensor(rng.normal(size=(t, 16))), params, cfg, 1)
            assert out.shape == (t, 16)

    def test_block_gradcheck(self):
        cfg = tiny_config(embed_dim=8, num_heads=2, ffn_kind="relu")
        rng = np.random.default_rng(14)
        params = bb.init_backbone_params(cfg, rng)
        x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        w = rng.normal(size=(4, 8))
        leaves = [x] + [v for k, v in params.items() if k.startswith("block0.ln1")]

        def loss():
            return tt.tsum(tt.mul(bb.transformer_block(x, params, cfg, 0), Tensor(w)))

        assert_grads_close(loss, leaves, what="block")

    def test_forward_base_preset_shapes(self):
        # run the Base geometry at a tiny depth by reusing its dims on a
        # 2-block instance; the full preset is config-checked elsewhere
        cfg = bb.ModelConfig(embed_dim=768, num_heads=12, num_blocks=1,
                             patch_size=14, input_resolution=28)
        model = bb.Backbone(cfg, np.random.default_rng(15))
        out = model.forward(np.zeros((28, 28, 3)))
        assert out.patches.shape == (4, 768)
        assert out.cls.shape == (1, 768)
        assert out.registers.shape == (4, 768)

    def test_forward_deterministic(self):
        cfg = tiny_config()
        rng = np.random.default_rng(16)
        model = bb.Backbone(cfg, rng)
        img = rand_image(np.random.default_rng(99), 16)
        a = model.forward(img)
        b = model.forward(img)
        assert np.array_equal(a.cls.data, b.cls.data)
        assert np.array_equal(a.patches.data, b.patches.data)

    def test_stochastic_depth_train_vs_eval(self):
        cfg = tiny_config(drop_rate=0.9)
        model = bb.Backbone(cfg, np.random.default_rng(17))
        img = rand_image(np.random.default_rng(5), 16)
        ev1 = model.forward(img, training=False)
        ev2 = model.forward(img, training=False)
        assert np.array_equal(ev1.cls.data, ev2.cls.data)
        tr = model.forward(img, training=True, rng=np.random.default_rng(0))
        assert not np.array_equal(tr.cls.data, ev1.cls.data)

    def test_collect_blocks(self):
        cfg = tiny_config()
        model = bb.Backbone(cfg, np.random.default_rng(18))
        out = model.forward(rand_image(np.random.default_rng(1), 16),
                            collect_blocks=True)
        assert out.per_block is not None and len(out.per_block) == cfg.num_blocks


class TestPositionalResampling:
    def bicubic_pointwise(self, grid, src):
        """Direct per-point Keys bicubic evaluation, clamped edges."""
        sh, sw = src.shape[:2]
        dh, dw = grid

        def kernel(t, a=-0.5):
            t = abs(t)
            if t <= 1:
                return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
            if t < 2:
                return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
            return 0.0

        out = np.zeros((dh, dw) + src.shape[2:])
        for i in range(dh):
            cy = (i + 0.5) * sh / dh - 0.5
            by = int(np.floor(cy))
            for j in range(dw):
                cx = (j + 0.5) * sw / dw - 0.5
                bx = int(np.floor(cx))
                acc = np.zeros(src.shape[2:])
                for dy in range(-1, 3):
                    for dx in range(-1, 3):
                        wy = kernel(cy - (by + dy))
                        wx = kernel(cx - (bx + dx))
                        yy = min(max(by + dy, 0), sh - 1)
                        xx = min(max(bx + dx, 0), sw - 1)
                        acc += wy * wx * src[yy, xx]
                out[i, j] = acc
        return out

    def test_doubling_resolution_quadruples_patches(self):
        cfg = tiny_config()
        rng = np.random.default_rng(19)
        model = bb.Backbone(cfg, rng)
        img_small = rand_image(rng, 16)
        img_big = rand_image(rng, 32)
        small = model.forward(img_small)
        big = model.forward(img_big)
        assert big.patches.shape[0] == 4 * small.patches.shape[0]

    def test_resampled_encoding_matches_pointwise_oracle(self):
        cfg = tiny_config()
        rng = np.random.default_rng(20)
        params = bb.init_backbone_params(cfg, rng)
        base = cfg.base_grid
        pe_grid = params["pos_embed"].data[bb.NUM_PREFIX_TOKENS:].reshape(
            base[0], base[1], cfg.embed_dim)
        target = (8, 8)
        got = bb.positional_encoding(params, cfg, target).data[bb.NUM_PREFIX_TOKENS:]
        want = self.bicubic_pointwise(target, pe_grid).reshape(64, cfg.embed_dim)
        assert np.allclose(got, want, atol=1e-10)

    def test_gradient_flows_through_resampling(self):
        cfg = tiny_config(embed_dim=4, num_heads=1)
        rng = np.random.default_rng(21)
        params = bb.init_backbone_params(cfg, rng)
        img = rand_image(rng, 32)  # off-base grid: 8x8 vs base 4x4
        w = rng.normal(size=(69, 4))

        def loss():
            seq = bb.patchify_embed(img, params, cfg)
            return tt.tsum(tt.mul(seq.tokens, Tensor(w)))

        assert_grads_close(loss, [params["pos_embed"]], what="pe-resample",
                           coord_cap=24, rng=np.random.default_rng(0))
