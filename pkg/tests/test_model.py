"""Backbone structure: config validation, windowing, masking, forward."""

import numpy as np
import pytest

import hilonet.tensor as T
from hilonet.errors import ConfigError, ShapeError, ShapeMismatchError
from hilonet.model import (ConvBranch, HiLoBlock, HiLoNet, ModelConfig,
                           WindowAttention, build_attention_mask, cross_entropy,
                           init_weights, relative_position_index, trunc_normal,
                           window_partition, window_reverse)
from hilonet.tensor import Tensor, using_dtype

import oracles


class TestModelConfig:
    def test_defaults_validate(self):
        ModelConfig().validate()

    def test_depth_head_length_mismatch(self):
        with pytest.raises(ConfigError):
            ModelConfig(depths=(2, 2), num_heads=(3, 6, 12)).validate()

    def test_dim_not_divisible_by_heads(self):
        with pytest.raises(ConfigError, match="heads"):
            ModelConfig(embed_dim=96, num_heads=(5, 6, 12, 24)).validate()

    def test_odd_dim_with_conv_branch(self):
        with pytest.raises(ConfigError, match="even"):
            ModelConfig(embed_dim=33, num_heads=(3, 6, 12, 24))

    def test_unknown_conv_mode(self):
        with pytest.raises(ConfigError, match="mode"):
            ModelConfig(hf_conv_mode="dense").validate()

    def test_img_size_window_divisibility(self):
        # 112/4 = 28 tokens, but stage 3 grid 7 then 3.5: not mergeable
        with pytest.raises(ConfigError):
            ModelConfig().validate_img_size(112)

    def test_img_size_patch_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig().validate_img_size(225)

    def test_json_roundtrip(self):
        cfg = ModelConfig(embed_dim=32, depths=(1, 1, 1, 1),
                          num_heads=(2, 4, 8, 16), window_size=2,
                          img_size=64, num_classes=5)
        again = ModelConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_from_dict_rejects_unknown_fields(self):
        with pytest.raises(ConfigError, match="unknown"):
            ModelConfig.from_dict({"embed_dim": 32, "bogus": 1})

    def test_stage_dims_double(self):
        cfg = ModelConfig()
        assert [cfg.stage_dim(i) for i in range(4)] == [96, 192, 384, 768]
        assert [cfg.stage_grid(i) for i in range(4)] == [56, 28, 14, 7]


class TestWindowing:
    def test_partition_matches_loop_oracle(self, rng):
        for b, n, w, c in [(1, 4, 2, 3), (2, 6, 3, 2), (1, 8, 2, 5), (3, 6, 2, 1)]:
            grid = rng.standard_normal((b, n, n, c))
            got = window_partition(Tensor(grid, dtype=np.float64), w)
            want = oracles.window_partition_loops(grid, w)
            assert np.array_equal(got.data, want), (b, n, w, c)

    def test_reverse_inverts_partition(self, rng):
        grid = rng.standard_normal((2, 6, 6, 4))
        x = Tensor(grid, dtype=np.float64)
        back = window_reverse(window_partition(x, 3), 3, 2, 6)
        assert np.array_equal(back.data, grid)

    def test_partition_rejects_indivisible(self):
        with pytest.raises(ShapeError):
            window_partition(Tensor(np.zeros((1, 5, 5, 2))), 2)


class TestRelativePositionIndex:
    def test_shape_and_range(self):
        for w in (2, 3, 7):
            idx = relative_position_index(w)
            t = w * w
            assert idx.shape == (t, t)
            assert idx.min() >= 0 and idx.max() < (2 * w - 1) ** 2

    def test_same_code_iff_same_displacement(self):
        w = 3
        idx = relative_position_index(w)
        disp = oracles.relative_displacements(w)
        t = w * w
        for a in range(t):
            for b in range(t):
                for c in range(t):
                    for d in range(t):
                        same_disp = (disp[a, b] == disp[c, d]).all()
                        assert (idx[a, b] == idx[c, d]) == same_disp

    def test_diagonal_is_a_single_code(self):
        idx = relative_position_index(4)
        assert len(set(np.diag(idx))) == 1


class TestAttentionMask:
    def test_shift_bounds(self):
        for bad in (0, 2, -1):
            with pytest.raises(ConfigError):
                build_attention_mask(4, 2, bad)

    def test_hand_enumerated_4x4(self):
        # region map for n=4, w=2, shift=1:
        #   [0 0 1 2]      windows:  w0 uniform, w1 and w2 split in
        #   [0 0 1 2]      halves, w3 has four distinct regions
        #   [3 3 4 5]
        #   [6 6 7 8]
        mask = build_attention_mask(4, 2, 1)
        assert mask.shape == (4, 4, 4)
        blocked_per_window = [(mask[i] == -np.inf).sum() for i in range(4)]
        assert blocked_per_window == [0, 8, 8, 12]
        assert ((mask == 0) | (mask == -np.inf)).all()
        # the diagonal is never blocked
        for i in range(4):
            assert (np.diag(mask[i]) == 0).all()

    def test_mask_symmetric(self):
        mask = build_attention_mask(8, 4, 2)
        assert np.array_equal(mask, np.transpose(mask, (0, 2, 1)))


class TestWindowAttention:
    def test_output_shape(self, rng):
        attn = WindowAttention(rng, dim=8, num_heads=2, window=2)
        x = Tensor(np.random.default_rng(1).standard_normal((6, 4, 8)))
        assert attn(x).shape == (6, 4, 8)

    def test_rejects_indivisible_heads(self, rng):
        with pytest.raises(ConfigError):
            WindowAttention(rng, dim=8, num_heads=3, window=2)

    def test_attention_rows_sum_to_one(self, rng):
        attn = WindowAttention(rng, dim=8, num_heads=2, window=2)
        x = Tensor(np.random.default_rng(1).standard_normal((4, 4, 8)))
        _, weights = attn(x, return_attn=True)
        assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-5)

    def test_masked_pairs_get_exactly_zero_weight(self, rng):
        mask = build_attention_mask(4, 2, 1)
        attn = WindowAttention(rng, dim=8, num_heads=2, window=2)
        x = Tensor(np.random.default_rng(7).standard_normal((8, 4, 8)))  # 2 images
        _, weights = attn(x, mask=mask, return_attn=True)
        weights = weights.reshape(2, 4, 2, 4, 4)
        blocked = mask == -np.inf
        for img in range(2):
            for w in range(4):
                for h in range(2):
                    assert (weights[img, w, h][blocked[w]] == 0.0).all()

    def test_bias_table_row_count(self, rng):
        attn = WindowAttention(rng, dim=12, num_heads=3, window=7)
        assert attn.bias_table.shape == (169, 3)

    def test_bias_influences_logits(self, rng):
        attn = WindowAttention(rng, dim=4, num_heads=1, window=2)
        x = Tensor(np.random.default_rng(3).standard_normal((1, 4, 4)))
        _, before = attn(x, return_attn=True)
        attn.bias_table.data[0, 0] = 5.0
        _, after = attn(x, return_attn=True)
        assert not np.allclose(before, after)


class TestConvBranch:
    def test_requires_even_dim(self, rng):
        with pytest.raises(ConfigError, match="even"):
            ConvBranch(rng, 5, "depthwise")

    def test_preserves_shape(self, rng):
        for mode in ("depthwise", "full"):
            branch = ConvBranch(rng, 8, mode)
            x = Tensor(np.random.default_rng(2).standard_normal((2, 6, 6, 8)))
            assert branch(x).shape == (2, 6, 6, 8)

    def test_full_mode_has_denser_pointwise(self, rng):
        thin = ConvBranch(rng, 16, "depthwise").param_count()
        dense = ConvBranch(rng, 16, "full").param_count()
        assert dense > thin


class TestBlocksAndStages:
    def test_shift_degenerates_on_single_window_grid(self, rng):
        block = HiLoBlock(rng, dim=4, num_heads=2, window=4, shift=2,
                          mlp_ratio=2, grid_size=4, hf_mode=None)
        assert block.shift == 0
        assert block._mask is None

    def test_shift_kept_on_multi_window_grid(self, rng):
        block = HiLoBlock(rng, dim=4, num_heads=2, window=2, shift=1,
                          mlp_ratio=2, grid_size=6, hf_mode=None)
        assert block.shift == 1
        assert block._mask is not None

    def test_block_preserves_grid_shape(self, rng):
        block = HiLoBlock(rng, dim=8, num_heads=2, window=2, shift=1,
                          mlp_ratio=2, grid_size=4, hf_mode="depthwise")
        x = Tensor(np.random.default_rng(0).standard_normal((2, 4, 4, 8)))
        assert block(x).shape == (2, 4, 4, 8)


class TestForward:
    def test_stage_trace_shapes(self, mini_config):
        model = HiLoNet(mini_config, seed=0)
        x = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 64, 64)))
        trace = []
        tokens = model.forward_features(x, trace)
        assert trace == [(16, 16, 32), (8, 8, 64), (4, 4, 128), (2, 2, 256)]
        assert tokens.shape == (1, 4, 256)

    def test_logits_shape(self, mini_config):
        model = HiLoNet(mini_config, seed=0)
        x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 3, 64, 64)))
        assert model.forward_cls(x).shape == (2, 3)

    def test_rejects_wrong_input_shape(self, mini_config):
        model = HiLoNet(mini_config, seed=0)
        with pytest.raises(ShapeError):
            model.forward_cls(Tensor(np.zeros((1, 3, 32, 32))))
        with pytest.raises(ShapeError):
            model.forward_cls(Tensor(np.zeros((1, 1, 64, 64))))

    def test_same_seed_reproduces_output(self, mini_config):
        x = np.random.default_rng(5).uniform(0, 1, (1, 3, 64, 64))
        a = HiLoNet(mini_config, seed=3).forward_cls(Tensor(x.copy()))
        b = HiLoNet(mini_config, seed=3).forward_cls(Tensor(x.copy()))
        assert np.array_equal(a.data, b.data)

    def test_different_seed_changes_output(self, mini_config):
        x = np.random.default_rng(5).uniform(0, 1, (1, 3, 64, 64))
        a = HiLoNet(mini_config, seed=3).forward_cls(Tensor(x.copy()))
        b = HiLoNet(mini_config, seed=4).forward_cls(Tensor(x.copy()))
        assert not np.allclose(a.data, b.data)

    def test_batch_elements_are_independent(self, mini_config):
        with using_dtype(np.float64):
            model = HiLoNet(mini_config, seed=0)
            x = np.random.default_rng(9).uniform(0, 1, (3, 3, 64, 64))
            batched = model.forward_cls(Tensor(x)).data
            singles = np.concatenate([
                model.forward_cls(Tensor(x[i:i + 1])).data for i in range(3)])
        assert np.allclose(batched, singles, atol=1e-10)

    def test_conv_branch_changes_the_function(self, mini_config):
        import dataclasses
        off = dataclasses.replace(mini_config, hf_branch_enabled=False)
        x = Tensor(np.random.default_rng(2).uniform(0, 1, (1, 3, 64, 64)))
        with_hf = HiLoNet(mini_config, seed=0).forward_cls(x).data
        without = HiLoNet(off, seed=0).forward_cls(x).data
        assert not np.allclose(with_hf, without)


class TestStateDict:
    def test_roundtrip(self, mini_config):
        model = HiLoNet(mini_config, seed=0)
        other = HiLoNet(mini_config, seed=1)
        x = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 64, 64)))
        assert not np.allclose(model.forward_cls(x).data, other.forward_cls(x).data)
        other.load_state(model.state())
        assert np.array_equal(model.forward_cls(x).data, other.forward_cls(x).data)

    def test_expected_parameter_paths(self, mini_config):
        names = {n for n, _ in HiLoNet(mini_config, seed=0).named_parameters()}
        for expected in ("patch_embed.proj.weight", "patch_embed.norm.gamma",
                         "stages.0.blocks.0.attn.qkv.weight",
                         "stages.0.blocks.0.attn.bias_table",
                         "stages.0.blocks.0.hf.conv3.weight",
                         "stages.0.downsample.reduction.weight",
                         "norm.beta", "head.weight", "head.bias"):
            assert expected in names, expected

    def test_merging_reduction_has_no_bias(self, mini_config):
        names = {n for n, _ in HiLoNet(mini_config, seed=0).named_parameters()}
        assert not any(n.endswith("downsample.reduction.bias") for n in names)

    def test_mismatch_listing(self, mini_config):
        import dataclasses
        model = HiLoNet(mini_config, seed=0)
        other = dataclasses.replace(mini_config, hf_branch_enabled=False)
        weights = HiLoNet(other, seed=0).state()
        with pytest.raises(ShapeMismatchError) as err:
            model.load_state(weights)
        listing = "\n".join(err.value.mismatches)
        assert "missing from checkpoint" in listing
        assert ".hf." in listing

    def test_shape_mismatch_reported(self, mini_config):
        model = HiLoNet(mini_config, seed=0)
        weights = model.state()
        weights["head.bias"] = np.zeros(7, dtype=np.float32)
        with pytest.raises(ShapeMismatchError) as err:
            model.load_state(weights)
        assert any("head.bias" in m and "shape mismatch" in m
                   for m in err.value.mismatches)

    def test_init_weights_deterministic(self, mini_config):
        a = init_weights(mini_config, seed=2)
        b = init_weights(mini_config, seed=2)
        assert sorted(a) == sorted(b)
        assert all(np.array_equal(a[k], b[k]) for k in a)


class TestCrossEntropy:
    def test_matches_manual_nll(self, rng):
        logits = rng.standard_normal((4, 5))
        labels = np.array([0, 2, 4, 1])
        got = cross_entropy(Tensor(logits, dtype=np.float64), labels)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        want = -logp[np.arange(4), labels].mean()
        assert float(got.data) == pytest.approx(want, rel=1e-10)

    def test_label_bounds(self, rng):
        logits = Tensor(rng.standard_normal((2, 3)))
        with pytest.raises(ShapeError):
            cross_entropy(logits, np.array([0, 3]))
        with pytest.raises(ShapeError):
            cross_entropy(logits, np.array([-1, 0]))
        with pytest.raises(ShapeError):
            cross_entropy(logits, np.array([0]))

    def test_perfect_prediction_loss_near_zero(self):
        logits = Tensor(np.array([[30.0, 0.0], [0.0, 30.0]]))
        loss = cross_entropy(logits, np.array([0, 1]))
        assert float(loss.data) < 1e-6


def test_trunc_normal_bounded():
    rng = np.random.default_rng(0)
    draws = trunc_normal(rng, (10000,), std=0.02)
    assert np.abs(draws).max() <= 2 * 0.02 + 1e-12
    assert draws.std() == pytest.approx(0.02, rel=0.15)
    assert draws.std() > 0


def _softmax_rows(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _gelu_tanh(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


class TestAgainstHandComputation:
    def test_identity_qkv_matches_plain_softmax_table(self):
        dim = 4
        with using_dtype(np.float64):
            attn = WindowAttention(np.random.default_rng(0), dim=dim,
                                   num_heads=1, window=2)
            eye = np.eye(dim)
            attn.qkv.weight.data[:] = np.concatenate([eye, eye, eye], axis=1)
            attn.qkv.bias.data[:] = 0.0
            attn.bias_table.data[:] = 0.0
            attn.proj.weight.data[:] = eye
            attn.proj.bias.data[:] = 0.0
            x = np.random.default_rng(3).standard_normal((1, 4, dim))
            out, weights = attn(Tensor(x), return_attn=True)
        want = _softmax_rows((x[0] * dim ** -0.5) @ x[0].T)
        assert np.abs(weights[0, 0] - want).max() < 1e-6
        assert np.abs(out.data[0] - want @ x[0]).max() < 1e-6

    def test_conv_branch_full_mode_matches_loop_oracle(self):
        dim, half = 4, 2
        with using_dtype(np.float64):
            branch = ConvBranch(np.random.default_rng(5), dim, "full")
            grid = np.random.default_rng(6).standard_normal((2, 4, 4, dim))
            got = branch(Tensor(grid)).data

        x = grid.transpose(0, 3, 1, 2)
        f1, f2 = x[:, :half], x[:, half:]
        a = oracles.conv2d_loops(f1, branch.conv1.weight.data,
                                 branch.conv1.bias.data, 1, 0, 1)
        a = oracles.conv2d_loops(_gelu_tanh(a), branch.conv3.weight.data,
                                 branch.conv3.bias.data, 1, 1, half)
        b = oracles.maxpool2d_loops(f2, 3, 1, 1)
        b = oracles.conv2d_loops(b, branch.conv2.weight.data,
                                 branch.conv2.bias.data, 1, 0, 1)
        want = np.concatenate([a, b], axis=1).transpose(0, 2, 3, 1)
        assert np.abs(got - want).max() < 1e-6

    def test_block_output_is_sum_of_both_paths(self, rng):
        with using_dtype(np.float64):
            block = HiLoBlock(rng, dim=8, num_heads=2, window=2, shift=1,
                              mlp_ratio=2, grid_size=4, hf_mode="depthwise")
            x = Tensor(np.random.default_rng(1).standard_normal((2, 4, 4, 8)))
            fused = block(x).data
            low = block.low_freq(x).data
            high = block.hf(x).data
        assert np.array_equal(fused, low + high)
