"""Model construction, causality, multimodal splicing, and checkpoint I/O."""

import numpy as np
import pytest

from longctx.errors import CheckpointError, ConfigError, DimensionError, LayoutError
from longctx.model import (
    CHECKPOINT_MAGIC,
    ModelConfig,
    build_model,
    embed_multimodal,
    embed_tokens,
    forward_tokens,
    load_checkpoint,
    save_checkpoint,
)

from conftest import rand_f32


def small_config(**overrides):
    base = dict(d_model=32, n_heads=2, head_dim=16, n_layers=2, vocab_size=64, seed=3)
    base.update(overrides)
    return ModelConfig(**base)


class TestConfig:
    def test_param_count_formula(self):
        config = small_config()
        model = build_model(config)
        d, layers, vocab = config.d_model, config.n_layers, config.vocab_size
        want = 2 * vocab * d + layers * (12 * d * d + 2 * d) + d
        assert config.param_count() == want
        total = sum(
            t.size
            for t in (model.embed, model.final_norm, model.unembed)
        ) + sum(
            getattr(layer, name).size
            for layer in model.layers
            for name in ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w1", "w2")
        )
        assert model.param_count() == total == want

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            small_config(d_model=48)

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ConfigError):
            small_config(head_dim=15, d_model=30)

    def test_tiny_vocab_rejected(self):
        with pytest.raises(ConfigError):
            small_config(vocab_size=3)

    def test_nonpositive_layers_rejected(self):
        with pytest.raises(ConfigError):
            small_config(n_layers=0)


class TestBuild:
    def test_same_seed_is_bitwise_identical(self):
        a = build_model(small_config(seed=11))
        b = build_model(small_config(seed=11))
        assert np.array_equal(a.embed, b.embed)
        assert np.array_equal(a.unembed, b.unembed)
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.wq, lb.wq)
            assert np.array_equal(la.w2, lb.w2)

    def test_different_seeds_differ(self):
        a = build_model(small_config(seed=1))
        b = build_model(small_config(seed=2))
        assert not np.array_equal(a.embed, b.embed)

    def test_embed_rejects_out_of_vocab(self):
        model = build_model(small_config())
        with pytest.raises(IndexError):
            embed_tokens(model, np.array([0, 64]))


class TestCausality:
    def test_future_token_cannot_move_the_past(self, rng):
        model = build_model(small_config())
        tokens = rng.integers(0, 64, size=12)
        base = forward_tokens(model, tokens)
        altered = tokens.copy()
        altered[9] = (altered[9] + 1) % 64
        got = forward_tokens(model, altered)
        assert np.array_equal(base[:9], got[:9])
        assert not np.array_equal(base[9:], got[9:])


class TestMultimodal:
    def test_splice_inserts_features_at_offsets(self, rng):
        model = build_model(small_config())
        tokens = rng.integers(0, 64, size=6)
        vis_a = rand_f32(rng, 3, 32)
        vis_b = rand_f32(rng, 2, 32)
        merged = embed_multimodal(model, tokens, [(2, vis_a), (5, vis_b)])
        assert merged.shape == (6 + 3 + 2, 32)
        plain = embed_tokens(model, tokens)
        assert np.array_equal(merged[:2], plain[:2])
        assert np.array_equal(merged[2:5], vis_a)
        assert np.array_equal(merged[5:8], plain[2:5])
        assert np.array_equal(merged[8:10], vis_b)
        assert np.array_equal(merged[10:], plain[5:])

    def test_offsets_must_be_nondecreasing_and_in_range(self, rng):
        model = build_model(small_config())
        tokens = rng.integers(0, 64, size=4)
        vis = rand_f32(rng, 1, 32)
        with pytest.raises(LayoutError):
            embed_multimodal(model, tokens, [(3, vis), (1, vis)])
        with pytest.raises(LayoutError):
            embed_multimodal(model, tokens, [(5, vis)])

    def test_feature_width_must_match_model(self, rng):
        model = build_model(small_config())
        tokens = rng.integers(0, 64, size=4)
        with pytest.raises(DimensionError):
            embed_multimodal(model, tokens, [(0, rand_f32(rng, 2, 16))])


class TestCheckpoint:
    def test_roundtrip_is_bitwise(self, tmp_path):
        model = build_model(small_config(seed=9))
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        assert np.array_equal(loaded.embed, model.embed)
        assert np.array_equal(loaded.final_norm, model.final_norm)
        assert np.array_equal(loaded.unembed, model.unembed)
        for la, lb in zip(loaded.layers, model.layers):
            for name in ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w1", "w2"):
                assert np.array_equal(getattr(la, name), getattr(lb, name))

    def test_roundtrip_preserves_forward_output(self, tmp_path, rng):
        model = build_model(small_config(seed=9))
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        tokens = rng.integers(0, 64, size=10)
        assert np.array_equal(
            forward_tokens(load_checkpoint(path), tokens), forward_tokens(model, tokens)
        )

    def test_bad_magic_rejected(self, tmp_path):
        model = build_model(small_config())
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        model = build_model(small_config())
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        data = path.read_bytes()
        assert data[:4] == CHECKPOINT_MAGIC
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        model = build_model(small_config())
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_version_rejected(self, tmp_path):
        model = build_model(small_config())
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        data = bytearray(path.read_bytes())
        data[4] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
