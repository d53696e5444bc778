"""LM head strategies: bitwise equivalence, row accounting, and windowed loss."""

import math

import numpy as np
import pytest

from longctx.errors import (
    ConfigError,
    DimensionError,
    EmptySelectionError,
    EmptyWindowError,
)
from longctx.head import (
    Chunked,
    Full,
    HeadMeter,
    LogitsMasked,
    compute_logits,
    loss_over_window,
)

from conftest import rand_f32


class TestEquivalence:
    def test_chunked_matches_full_for_every_chunk_length(self, rng):
        hidden = rand_f32(rng, 13, 8)
        unembed = rand_f32(rng, 8, 24)
        full = compute_logits(hidden, unembed, Full())
        for chunk_len in range(1, 14):
            chunked = compute_logits(hidden, unembed, Chunked(chunk_len))
            assert np.array_equal(chunked, full), chunk_len

    def test_masked_rows_match_full_rows(self, rng):
        hidden = rand_f32(rng, 20, 8)
        unembed = rand_f32(rng, 8, 32)
        full = compute_logits(hidden, unembed, Full())
        for positions in [(0,), (19,), (3, 7, 11), tuple(range(20))]:
            masked = compute_logits(hidden, unembed, LogitsMasked(positions))
            assert np.array_equal(masked, full[list(positions)])

    def test_random_shapes_and_chunk_lengths(self, rng):
        for _ in range(25):
            n = int(rng.integers(1, 40))
            d = int(rng.integers(1, 12))
            vocab = int(rng.integers(4, 50))
            hidden = rand_f32(rng, n, d)
            unembed = rand_f32(rng, d, vocab)
            full = compute_logits(hidden, unembed, Full())
            chunk_len = int(rng.integers(1, n + 4))
            assert np.array_equal(
                compute_logits(hidden, unembed, Chunked(chunk_len)), full
            )
            pos = tuple(sorted(rng.choice(n, size=min(3, n), replace=False).tolist()))
            assert np.array_equal(
                compute_logits(hidden, unembed, LogitsMasked(pos)), full[list(pos)]
            )


class TestMeter:
    def test_full_peak_is_whole_sequence(self, rng):
        hidden, unembed = rand_f32(rng, 17, 6), rand_f32(rng, 6, 40)
        meter = HeadMeter()
        compute_logits(hidden, unembed, Full(), meter=meter)
        assert meter.peak_rows == 17
        assert meter.live_rows == 0
        assert meter.flops == 2 * 17 * 6 * 40

    def test_chunked_peak_is_chunk_length(self, rng):
        hidden, unembed = rand_f32(rng, 17, 6), rand_f32(rng, 6, 40)
        meter = HeadMeter()
        compute_logits(hidden, unembed, Chunked(5), meter=meter)
        assert meter.peak_rows == 5
        assert meter.flops == 2 * 17 * 6 * 40

    def test_chunk_longer_than_sequence_caps_at_sequence(self, rng):
        hidden, unembed = rand_f32(rng, 9, 6), rand_f32(rng, 6, 40)
        meter = HeadMeter()
        compute_logits(hidden, unembed, Chunked(100), meter=meter)
        assert meter.peak_rows == 9

    def test_masked_peak_is_selection_size(self, rng):
        hidden, unembed = rand_f32(rng, 50, 6), rand_f32(rng, 6, 40)
        meter = HeadMeter()
        compute_logits(hidden, unembed, LogitsMasked((4, 9)), meter=meter)
        assert meter.peak_rows == 2
        assert meter.flops == 2 * 2 * 6 * 40


class TestValidation:
    def test_empty_selection_rejected(self):
        with pytest.raises(EmptySelectionError):
            LogitsMasked(())

    def test_out_of_range_position_rejected(self, rng):
        hidden, unembed = rand_f32(rng, 5, 4), rand_f32(rng, 4, 8)
        with pytest.raises(IndexError):
            compute_logits(hidden, unembed, LogitsMasked((5,)))

    def test_bad_chunk_length_rejected(self):
        with pytest.raises(ConfigError):
            Chunked(0)

    def test_hidden_width_must_match_unembed(self, rng):
        with pytest.raises(DimensionError):
            compute_logits(rand_f32(rng, 5, 4), rand_f32(rng, 6, 8), Full())


class TestWindowedLoss:
    def _oracle(self, hidden, unembed, targets, window):
        # cross entropy over the trailing rows, straight from full logits
        logits = compute_logits(hidden, unembed, Full()).astype(np.float64)
        n = hidden.shape[0]
        rows = range(n - window, n)
        losses = []
        for i in rows:
            row = logits[i]
            lse = math.log(sum(math.exp(x - row.max()) for x in row)) + row.max()
            losses.append(lse - row[targets[i]])
        return sum(losses) / window

    def test_matches_full_logits_oracle(self, rng):
        hidden = rand_f32(rng, 12, 6)
        unembed = rand_f32(rng, 6, 20)
        targets = rng.integers(0, 20, size=12)
        for window in (1, 4, 12):
            got = loss_over_window(hidden, unembed, targets[12 - window :], window)
            want = self._oracle(hidden, unembed, targets, window)
            assert abs(got - want) <= 1e-9

    def test_window_one_ignores_earlier_rows(self, rng):
        hidden = rand_f32(rng, 8, 6)
        unembed = rand_f32(rng, 6, 20)
        targets = rng.integers(0, 20, size=1)
        base = loss_over_window(hidden, unembed, targets, 1)
        hidden2 = hidden.copy()
        hidden2[:7] += 5.0
        assert loss_over_window(hidden2, unembed, targets, 1) == base

    def test_bad_windows_rejected(self, rng):
        hidden, unembed = rand_f32(rng, 5, 4), rand_f32(rng, 4, 8)
        with pytest.raises(EmptyWindowError):
            loss_over_window(hidden, unembed, rng.integers(0, 8, size=0), 0)
        with pytest.raises(DimensionError):
            loss_over_window(hidden, unembed, rng.integers(0, 8, size=6), 6)

    def test_bad_targets_rejected(self, rng):
        hidden, unembed = rand_f32(rng, 5, 4), rand_f32(rng, 4, 8)
        with pytest.raises(DimensionError):
            loss_over_window(hidden, unembed, rng.integers(0, 8, size=5), 2)
        with pytest.raises(IndexError):
            loss_over_window(hidden, unembed, np.full(2, 8), 2)
