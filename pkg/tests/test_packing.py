"""Sequence packing: bin layout, the two position/masking regimes, the text
serialization, and mixture sampling."""

import numpy as np
import pytest

from longctx.errors import ConfigError, EmptyMixtureError, OversizeSampleError
from longctx.model import PAD_TOKEN
from longctx.packing import (
    PAD_SEGMENT_ID,
    MixtureSource,
    PackingMode,
    Sample,
    build_attention_mask,
    pack_samples,
    read_packed,
    sample_mixture,
    write_packed,
)


def toks(*values):
    return np.array(values, dtype=np.int64)


def random_samples(rng, count, max_len, n_sources=1):
    return [
        Sample(
            rng.integers(3, 50, size=int(rng.integers(1, max_len + 1))),
            source_id=int(rng.integers(0, n_sources)),
        )
        for _ in range(count)
    ]


class TestLayout:
    def test_two_samples_one_bin(self):
        packed = pack_samples([Sample(toks(7, 8, 9, 10, 11)), Sample(toks(20, 21, 22))],
                              target_len=10, mode=PackingMode.RESET_ISOLATED)
        assert len(packed) == 1
        seq = packed[0]
        assert seq.tokens.tolist() == [7, 8, 9, 10, 11, 20, 21, 22, PAD_TOKEN, PAD_TOKEN]
        assert seq.positions.tolist() == [0, 1, 2, 3, 4, 0, 1, 2, 0, 1]
        assert seq.segment_ids.tolist() == [0] * 5 + [1] * 3 + [PAD_SEGMENT_ID] * 2
        assert seq.sample_spans == [(0, 5), (5, 8)]
        assert seq.pad_count == 2

    def test_shared_mode_positions_are_global(self):
        packed = pack_samples([Sample(toks(7, 8, 9)), Sample(toks(20, 21))],
                              target_len=6, mode=PackingMode.CONTINUOUS_SHARED)
        seq = packed[0]
        assert seq.positions.tolist() == [0, 1, 2, 3, 4, 5]
        assert seq.segment_ids.tolist() == [0] * 5 + [PAD_SEGMENT_ID]

    def test_exact_fill_has_no_padding(self):
        packed = pack_samples([Sample(toks(1, 2, 3)), Sample(toks(4, 5, 6, 7))],
                              target_len=7, mode=PackingMode.RESET_ISOLATED)
        assert packed[0].pad_count == 0

    def test_oversize_sample_rejected(self):
        with pytest.raises(OversizeSampleError):
            pack_samples([Sample(toks(1, 2, 3, 4))], target_len=3,
                         mode=PackingMode.RESET_ISOLATED)

    def test_first_fit_reuses_earliest_open_bin(self):
        lens = (6, 5, 4)
        samples = [Sample(toks(*range(10, 10 + n))) for n in lens]
        packed = pack_samples(samples, target_len=10, mode=PackingMode.RESET_ISOLATED)
        assert [len(s.sample_spans) for s in packed] == [2, 1]
        assert packed[0].sample_spans == [(0, 6), (6, 10)]
        assert packed[1].sample_spans == [(0, 5)]

    def test_reset_mode_keeps_sources_apart(self):
        samples = [Sample(toks(1, 2), source_id=0), Sample(toks(3, 4), source_id=1),
                   Sample(toks(5, 6), source_id=0)]
        packed = pack_samples(samples, target_len=4, mode=PackingMode.RESET_ISOLATED)
        assert len(packed) == 2
        assert packed[0].tokens.tolist()[:4] == [1, 2, 5, 6]
        assert packed[1].tokens.tolist()[:2] == [3, 4]

    def test_shared_mode_mixes_sources(self):
        samples = [Sample(toks(1, 2), source_id=0), Sample(toks(3, 4), source_id=1)]
        packed = pack_samples(samples, target_len=4, mode=PackingMode.CONTINUOUS_SHARED)
        assert len(packed) == 1
        assert packed[0].tokens.tolist() == [1, 2, 3, 4]

    @pytest.mark.parametrize("mode", list(PackingMode))
    def test_every_token_appears_exactly_once(self, rng, mode):
        samples = random_samples(rng, 30, 12, n_sources=3)
        packed = pack_samples(samples, target_len=16, mode=mode)
        got = []
        for seq in packed:
            for start, end in seq.sample_spans:
                got.append(seq.tokens[start:end])
            assert np.all(seq.tokens[len(seq.tokens) - seq.pad_count :] == PAD_TOKEN)
        want = sorted(s.tokens for s in samples)
        assert sorted(tuple(g.tolist()) for g in got) == want

    def test_empty_sample_rejected(self):
        with pytest.raises(ConfigError):
            Sample(toks())


class TestMasks:
    def test_reset_mask_is_block_diagonal_causal(self):
        packed = pack_samples([Sample(toks(1, 2, 3)), Sample(toks(4, 5))],
                              target_len=7, mode=PackingMode.RESET_ISOLATED)
        mask = build_attention_mask(packed[0])
        want = np.zeros((7, 7), dtype=bool)
        for start, end in ((0, 3), (3, 5)):
            for i in range(start, end):
                want[i, start : i + 1] = True
        want[5, 5] = want[6, 6] = True  # pads keep a self edge only
        assert np.array_equal(mask, want)

    def test_shared_mask_is_plain_causal_over_real_tokens(self):
        packed = pack_samples([Sample(toks(1, 2, 3)), Sample(toks(4, 5))],
                              target_len=6, mode=PackingMode.CONTINUOUS_SHARED)
        mask = build_attention_mask(packed[0])
        assert mask[4, 0]  # second sample sees the first
        assert not mask[0, 4]
        assert mask[5].tolist() == [False] * 5 + [True]

    @pytest.mark.parametrize("mode", list(PackingMode))
    def test_no_empty_rows(self, rng, mode):
        samples = random_samples(rng, 12, 6, n_sources=2)
        for seq in pack_samples(samples, target_len=8, mode=mode):
            assert build_attention_mask(seq).any(axis=1).all()

    def test_cross_sample_attention_blocked_in_reset_mode(self, rng):
        samples = random_samples(rng, 12, 6, n_sources=2)
        for seq in pack_samples(samples, target_len=8, mode=PackingMode.RESET_ISOLATED):
            mask = build_attention_mask(seq)
            for a, (sa, ea) in enumerate(seq.sample_spans):
                for b, (sb, eb) in enumerate(seq.sample_spans):
                    if a != b:
                        assert not mask[sa:ea, sb:eb].any()


class TestSerialization:
    @pytest.mark.parametrize("mode", list(PackingMode))
    def test_roundtrip(self, tmp_path, rng, mode):
        samples = random_samples(rng, 10, 6, n_sources=2)
        packed = pack_samples(samples, target_len=8, mode=mode)
        path = tmp_path / "packed.txt"
        write_packed(packed, path)
        back = read_packed(path)
        assert len(back) == len(packed)
        for a, b in zip(back, packed):
            assert a.mode == b.mode and a.target_len == b.target_len
            assert a.sample_spans == b.sample_spans
            assert np.array_equal(a.tokens, b.tokens)
            assert np.array_equal(a.positions, b.positions)
            assert np.array_equal(a.segment_ids, b.segment_ids)


class TestMixture:
    def _sources(self):
        # weights 1200 * 1.0 = 1200 and 500 * 0.4 = 200
        return [MixtureSource("web", 1200, sampling_ratio=1.0),
                MixtureSource("code", 500, sampling_ratio=0.4)]

    def test_deterministic_for_a_seed(self):
        a = sample_mixture(self._sources(), 50, seed=4)
        b = sample_mixture(self._sources(), 50, seed=4)
        assert np.array_equal(a, b)
        assert not np.array_equal(sample_mixture(self._sources(), 50, seed=5), a)

    def test_zero_ratio_source_never_drawn(self):
        sources = [MixtureSource("keep", 10, sampling_ratio=1.0),
                   MixtureSource("drop", 10, sampling_ratio=0.0)]
        assert set(sample_mixture(sources, 200, seed=0).tolist()) == {0}

    def test_ratio_above_one_rejected(self):
        with pytest.raises(ConfigError):
            MixtureSource("web", 1000, sampling_ratio=3.0)

    def test_all_zero_weight_rejected(self):
        with pytest.raises(EmptyMixtureError):
            sample_mixture([MixtureSource("a", 10, sampling_ratio=0.0)], 5, seed=0)

    def test_max_number_caps_effective_size(self):
        sources = [MixtureSource("big", 1_000_000, max_number=100),
                   MixtureSource("small", 100)]
        draws = sample_mixture(sources, 10_000, seed=1)
        frac = float((draws == 0).mean())
        assert 0.45 <= frac <= 0.55

    def test_proportions_track_weights(self):
        draws = sample_mixture(self._sources(), 100_000, seed=2)
        web = float((draws == 0).mean())
        # weights 1200 vs 200: expect 6/7 within sampling noise
        assert abs(web - 6 / 7) <= 0.02
