import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadenza_eval.enhancement import (
    EnhancementError,
    NullBackend,
    OracleBackend,
    RemixGains,
    SeparationBackend,
    StemSet,
    apply_task2_baseline,
    level_constraint_gain,
    oracle_separate,
    remix,
    segment_offset,
    select_segment,
)
from cadenza_eval.listener import Audiogram, Listener
from cadenza_eval.prescription import apply_prescription
from cadenza_eval.signal_io import AudioBuffer, peak, rms, rms_db
from cadenza_eval.synthetic import random_listener

RATE = 16000
NO_GAIN = Listener("n", Audiogram.flat(-5), Audiogram.flat(-5))


def random_stems(seed, n=4000):
    rng = np.random.default_rng(seed)
    return StemSet(*(AudioBuffer(rng.uniform(-0.2, 0.2, (2, n)), RATE) for _ in range(4)))


class TestStemSet:
    def test_shape_mismatch(self):
        a = AudioBuffer.silence(2, 10, RATE)
        with pytest.raises(EnhancementError):
            StemSet(a, a, a, AudioBuffer.silence(2, 11, RATE))

    def test_mono_rejected(self):
        a = AudioBuffer.silence(1, 10, RATE)
        with pytest.raises(EnhancementError):
            StemSet(a, a, a, a)

    def test_from_mapping_order_and_missing(self):
        stems = random_stems(0)
        mapping = dict(reversed(list(stems.items())))
        rebuilt = StemSet.from_mapping(mapping)
        assert [name for name, _ in rebuilt.items()] == ["vocals", "drums", "bass", "other"]
        assert rebuilt.vocals is stems.vocals
        del mapping["bass"]
        with pytest.raises(EnhancementError, match="bass"):
            StemSet.from_mapping(mapping)


class TestOracle:
    def test_returns_truth(self):
        stems = random_stems(1)
        assert oracle_separate(stems.total(), stems) is stems

    def test_half_mixture_rejected(self):
        stems = random_stems(2)
        with pytest.raises(EnhancementError):
            oracle_separate(stems.total().scaled(2.0), stems)

    def test_silent(self):
        silent = AudioBuffer.silence(2, 100, RATE)
        stems = StemSet(silent, silent, silent, silent)
        out = oracle_separate(silent, stems)
        assert all(peak(s) == 0 for s in out.stems())

    def test_backend_protocol(self):
        assert isinstance(OracleBackend(), SeparationBackend)
        assert isinstance(NullBackend(), SeparationBackend)

    def test_backend_needs_truth(self):
        with pytest.raises(EnhancementError):
            OracleBackend().separate(AudioBuffer.silence(2, 10, RATE))

    def test_null_backend(self):
        mixture = random_stems(3).total()
        out = NullBackend().separate(mixture)
        assert all(peak(s) == 0 for s in out.stems()[:3])
        np.testing.assert_array_equal(out.other.samples, mixture.samples)


class TestRemix:
    def test_unit_gains_identity(self):
        stems = random_stems(4)
        out = remix(stems, RemixGains())
        np.testing.assert_array_equal(out.samples, stems.total().samples)

    def test_demix_remix_residual(self):
        stems = random_stems(5)
        mixture = stems.total()
        out = remix(oracle_separate(mixture, stems), RemixGains())
        residual = AudioBuffer(out.samples.astype(np.float64) - mixture.samples, RATE)
        assert rms_db(residual) <= -40

    def test_single_stem_gain_cancels(self):
        stems = random_stems(6)
        silent = AudioBuffer.silence(2, stems.length, RATE)
        only_vocals = StemSet(stems.vocals, silent, silent, silent)
        out = remix(only_vocals, RemixGains(vocals=6.0))
        np.testing.assert_allclose(out.samples, stems.vocals.samples, atol=1e-6)

    def test_all_silent(self):
        silent = AudioBuffer.silence(2, 50, RATE)
        out = remix(StemSet(silent, silent, silent, silent), RemixGains(3, -3, 0, 0))
        assert peak(out) == 0

    def test_no_clipping(self):
        loud = AudioBuffer(np.full((2, 100), 0.9), RATE)
        out = remix(StemSet(loud, loud, loud, loud), RemixGains(1, 0, 0, 0))
        assert peak(out) > 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=4, max_size=4), st.integers(0, 1000))
    def test_rms_matches_unit_sum(self, gains, seed):
        stems = random_stems(seed, 2000)
        out = remix(stems, RemixGains(*gains))
        assert rms(out) == pytest.approx(rms(stems.total()), rel=1e-4)

    @pytest.mark.parametrize("bad", [30.5, -31])
    def test_gain_bounds(self, bad):
        with pytest.raises(EnhancementError):
            RemixGains(vocals=bad)


class TestLevelConstraint:
    def test_quiet_mixture_unchanged(self):
        x = AudioBuffer(np.full((2, 500), 0.5) * np.sign(np.sin(np.arange(500))), RATE)
        assert level_constraint_gain(x, NO_GAIN) == 1.0
        assert apply_task2_baseline(x, NO_GAIN) is x

    def test_gain_is_inverse_peak(self):
        # a zero-gain listener passes the mixture through; peak 2.0 needs gain 0.5
        x = np.zeros((2, 501))
        x[0, 250] = 2.0
        gain = level_constraint_gain(AudioBuffer(x, RATE), NO_GAIN)
        assert gain == pytest.approx(0.5, rel=1e-6)

    def test_exactly_full_scale(self):
        x = np.zeros((2, 501))
        x[0, 250] = 1.0
        assert level_constraint_gain(AudioBuffer(x, RATE), NO_GAIN) == 1.0

    def test_silent_rejected(self):
        with pytest.raises(EnhancementError):
            level_constraint_gain(AudioBuffer.silence(2, 100, RATE), NO_GAIN)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 4.0))
    def test_safety(self, seed, level):
        rng = np.random.default_rng(seed)
        listener = random_listener(rng, "r")
        x = AudioBuffer(rng.uniform(-level, level, (2, 3000)), RATE)
        out = apply_prescription(apply_task2_baseline(x, listener), listener)
        assert peak(out) <= 1.0

    def test_doubling_halves_gain(self, rng):
        listener = Listener("m", Audiogram.flat(60), Audiogram.flat(50))
        x = AudioBuffer(rng.uniform(-0.4, 0.4, (2, 4000)), RATE)
        g1 = level_constraint_gain(x, listener)
        g2 = level_constraint_gain(x.scaled(2.0), listener)
        assert g1 < 1
        assert g2 == pytest.approx(g1 / 2, rel=1e-5)


class TestSegment:
    def test_golden_offset(self):
        buf_len, seg = 180 * 44100, 30 * 44100
        assert segment_offset(buf_len, seg, 42) == 590395
        assert segment_offset(buf_len, 15 * 44100, 42) == 649434

    def test_exact_length(self):
        buf = AudioBuffer(np.arange(30 * 100, dtype=float)[None] / 1e4, 100)
        out = select_segment(buf, 30, seed=7)
        np.testing.assert_array_equal(out.samples, buf.samples)

    def test_too_short(self):
        with pytest.raises(EnhancementError):
            select_segment(AudioBuffer.silence(1, 10 * 100, 100), 15, seed=0)

    @given(st.integers(1, 10_000), st.integers(0, 10_000), st.integers(0, 2**64 - 1))
    def test_offset_range_and_purity(self, seg, extra, seed):
        total = seg + extra
        off = segment_offset(total, seg, seed)
        assert 0 <= off <= total - seg
        assert off == segment_offset(total, seg, seed)

    def test_contiguous(self):
        buf = AudioBuffer(np.arange(1000, dtype=float)[None] / 1000, 10)
        out = select_segment(buf, 15, seed=3)
        start = segment_offset(1000, 150, 3)
        np.testing.assert_array_equal(out.samples, buf.samples[:, start : start + 150])
