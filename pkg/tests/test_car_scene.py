import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import freqz

from cadenza_eval.car_scene import (
    GRID_DEG10,
    CarSceneParams,
    HrirSet,
    SceneError,
    achieved_snr_db,
    azimuth_filename,
    engine_fundamental,
    load_hrir_set,
    nearest_grid_point,
    nearest_hrir,
    render_components,
    render_scene,
    road_filter,
    save_hrir_set,
    synth_engine_tone,
    synth_road_noise,
)
from cadenza_eval.signal_io import AudioBuffer, peak_db, rms_db, write_wav
from cadenza_eval.synthetic import toy_hrir_set

from conftest import music_like

RATE = 16000


class TestEngine:
    @pytest.mark.parametrize(
        "speed,gear,hz",
        [(50, 3, 2500 / 30), (10, 6, 800 / 30), (140, 1, 5000 / 30)],
    )
    def test_fundamental(self, speed, gear, hz):
        assert engine_fundamental(speed, gear) == pytest.approx(hz, abs=0.01)

    @pytest.mark.parametrize("gear", [0, 7])
    def test_gear_range(self, gear):
        with pytest.raises(SceneError):
            engine_fundamental(50, gear)

    def test_harmonic_peaks(self):
        params = CarSceneParams(50, 3, 0, seed=3)
        tone = synth_engine_tone(params, 2.0, RATE).samples[0]
        spectrum = np.abs(np.fft.rfft(tone))
        freqs = np.fft.rfftfreq(len(tone), 1 / RATE)
        f0 = engine_fundamental(50, 3)
        for k in range(1, 6):
            window = (freqs > (k - 0.5) * f0) & (freqs < (k + 0.5) * f0)
            found = freqs[window][np.argmax(spectrum[window])]
            assert abs(found - k * f0) <= freqs[1]

    def test_one_over_k_amplitude(self):
        # 60 km/h, gear 4 gives exactly 76 Hz: integer cycles in 1 s, no leakage
        params = CarSceneParams(60, 4, 0, seed=11)
        f0 = engine_fundamental(60, 4)
        assert f0 == pytest.approx(76.0)
        tone = synth_engine_tone(params, 1.0, RATE).samples[0].astype(np.float64)
        spectrum = np.abs(np.fft.rfft(tone))
        h1, h2 = spectrum[76], spectrum[152]
        assert 20 * np.log10(h2 / h1) == pytest.approx(-6.02, abs=0.2)

    def test_peak_level(self):
        tone = synth_engine_tone(CarSceneParams(80, 4, 0), 1.0, RATE)
        assert peak_db(tone) == pytest.approx(-20.0, abs=1e-3)

    def test_deterministic(self):
        params = CarSceneParams(70, 3, 0, seed=5)
        a = synth_engine_tone(params, 1.0, RATE)
        b = synth_engine_tone(params, 1.0, RATE)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_no_energy_above_nyquist_harmonics(self):
        # 166.7 Hz * 25 exceeds 8 kHz Nyquist; harmonics there are dropped, not folded
        params = CarSceneParams(140, 1, 0, seed=1)
        tone = synth_engine_tone(params, 3.0, RATE).samples[0].astype(np.float64)
        spectrum = np.abs(np.fft.rfft(tone)) ** 2
        freqs = np.fft.rfftfreq(len(tone), 1 / RATE)
        f0 = engine_fundamental(140, 1)
        k = np.round(freqs / f0)
        off = np.abs(freqs - k * f0) > 2.0
        assert spectrum[off].sum() / spectrum.sum() < 1e-6


class TestRoadNoise:
    def test_cutoff_minus_3db(self):
        b, a = road_filter(500, RATE)
        _, h = freqz(b, a, worN=[0.0, 500.0], fs=RATE)
        assert 20 * np.log10(abs(h[1]) / abs(h[0])) == pytest.approx(-3.01, abs=0.1)

    def test_level_and_independence(self):
        left, right = synth_road_noise(10.0, RATE, 500, seed=9)
        assert rms_db(left) == pytest.approx(-26.0, abs=1e-3)
        assert rms_db(right) == pytest.approx(-26.0, abs=1e-3)
        rho = np.corrcoef(left.samples[0], right.samples[0])[0, 1]
        assert abs(rho) < 0.05

    def test_deterministic_and_seed_sensitive(self):
        a = synth_road_noise(1.0, RATE, seed=1)[0].samples
        b = synth_road_noise(1.0, RATE, seed=1)[0].samples
        c = synth_road_noise(1.0, RATE, seed=2)[0].samples
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    @pytest.mark.parametrize("cutoff", [0, 8000, -5])
    def test_cutoff_range(self, cutoff):
        with pytest.raises(SceneError):
            road_filter(cutoff, RATE)


class TestGrid:
    def test_73_points(self):
        assert len(GRID_DEG10) == 73
        assert GRID_DEG10[0] == -900 and GRID_DEG10[-1] == 900
        assert set(np.diff(GRID_DEG10)) == {25}

    @pytest.mark.parametrize(
        "az,expected",
        [(0, 0), (1.3, 25), (-1.3, -25), (1.25, 0), (-1.25, 0), (3.75, 25), (-3.75, -25), (90, 900), (-90, -900), (88.8, 900)],
    )
    def test_nearest(self, az, expected):
        assert nearest_grid_point(az) == expected

    @pytest.mark.parametrize("az", [-91, 90.01, float("nan")])
    def test_out_of_range(self, az):
        with pytest.raises(SceneError):
            nearest_grid_point(az)

    @given(st.floats(-90, 90))
    def test_total_and_nearest(self, az):
        key = nearest_grid_point(az)
        assert key in GRID_DEG10
        assert abs(key / 10 - az) <= 1.25 + 1e-9

    def test_filename(self):
        assert azimuth_filename("car", -875) == "car_az-0875.wav"
        assert azimuth_filename("anechoic", 0) == "anechoic_az+0000.wav"

    def test_save_load_roundtrip(self, tmp_path):
        original = toy_hrir_set("car", RATE, length=32)
        save_hrir_set(original, tmp_path)
        loaded = load_hrir_set(tmp_path, "car")
        assert loaded.sample_rate == RATE
        for key in GRID_DEG10:
            np.testing.assert_allclose(loaded.entries[key], original.entries[key], atol=1e-7)
        np.testing.assert_allclose(nearest_hrir(loaded, 1.3), original.entries[25], atol=1e-7)

    def test_extra_entry_warns(self, tmp_path, caplog):
        save_hrir_set(HrirSet.unit_impulse("anechoic", RATE, 4), tmp_path)
        write_wav(AudioBuffer(np.zeros((2, 4)), RATE), tmp_path / azimuth_filename("anechoic", 925))
        with caplog.at_level(logging.WARNING):
            hrirs = load_hrir_set(tmp_path, "anechoic")
        assert len(hrirs.entries) == 73
        assert "off-grid" in caplog.text

    def test_missing_entry(self, tmp_path):
        save_hrir_set(HrirSet.unit_impulse("anechoic", RATE, 4), tmp_path)
        (tmp_path / azimuth_filename("anechoic", 25)).unlink()
        with pytest.raises(SceneError, match="missing"):
            load_hrir_set(tmp_path, "anechoic")

    def test_unequal_lengths(self):
        entries = {k: np.zeros((2, 4)) for k in GRID_DEG10}
        entries[0] = np.zeros((2, 5))
        with pytest.raises(SceneError):
            HrirSet("car", entries, RATE)


class TestParams:
    @pytest.mark.parametrize(
        "kwargs",
        [dict(speed_kmh=5), dict(speed_kmh=150), dict(gear=0), dict(head_azimuth_deg=95), dict(snr_db=float("inf")), dict(seed=-1)],
    )
    def test_validation(self, kwargs):
        base = dict(speed_kmh=50, gear=3, snr_db=5)
        base.update(kwargs)
        with pytest.raises(SceneError):
            CarSceneParams(**base)


@pytest.fixture(scope="module")
def impulses():
    return HrirSet.unit_impulse("anechoic", RATE), HrirSet.unit_impulse("car", RATE)


@pytest.fixture(scope="module")
def toys():
    return toy_hrir_set("anechoic", RATE), toy_hrir_set("car", RATE)


class TestRender:
    def test_high_snr_is_music_sum(self, impulses):
        music = music_like(1, 2.0, RATE, channels=2)
        out = render_scene(music, CarSceneParams(50, 3, 200.0), *impulses)
        summed = music.samples.astype(np.float64).sum(axis=0)
        expected = np.stack([summed, summed])
        residual = AudioBuffer(out.samples - expected, RATE)
        assert rms_db(residual) < -90

    def test_noise_level_for_snr_10(self, toys):
        music = music_like(2, 2.0, RATE, channels=2)
        parts = render_components(music, CarSceneParams(60, 4, 10.0, seed=4), *toys)
        music_db = rms_db(AudioBuffer(parts.music, RATE))
        # rescale so music sits at -20 dBFS at the mics
        shifted = music.scaled(10 ** ((-20 - music_db) / 20))
        parts = render_components(shifted, CarSceneParams(60, 4, 10.0, seed=4), *toys)
        assert rms_db(AudioBuffer(parts.music, RATE)) == pytest.approx(-20, abs=1e-3)
        assert rms_db(AudioBuffer(parts.noise, RATE)) == pytest.approx(-30, abs=0.1)

    @settings(max_examples=10, deadline=None)
    @given(
        st.floats(10, 140), st.integers(1, 6), st.floats(-10, 30), st.floats(-90, 90), st.integers(0, 2**63)
    )
    def test_snr_property(self, speed, gear, snr, head, seed):
        anechoic, car = toy_hrir_set("anechoic", RATE), toy_hrir_set("car", RATE)
        music = music_like(seed % 1000, 1.0, RATE, channels=2)
        parts = render_components(music, CarSceneParams(speed, gear, snr, head, seed), anechoic, car)
        assert achieved_snr_db(parts) == pytest.approx(snr, abs=0.1)

    def test_deterministic(self, toys):
        music = music_like(3, 1.5, RATE, channels=2)
        params = CarSceneParams(90, 5, 3.0, head_azimuth_deg=12.5, seed=77)
        a = render_scene(music, params, *toys)
        b = render_scene(music, params, *toys)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert a.length == music.length

    def test_silent_music(self, impulses):
        with pytest.raises(SceneError):
            render_scene(AudioBuffer.silence(2, RATE, RATE), CarSceneParams(50, 3, 5), *impulses)

    def test_rate_mismatch(self, impulses):
        with pytest.raises(SceneError, match="rate"):
            render_scene(music_like(1, 1.0, 22050, channels=2), CarSceneParams(50, 3, 5), *impulses)

    def test_short_music(self, impulses):
        with pytest.raises(SceneError):
            render_scene(music_like(1, 0.5, RATE, channels=2), CarSceneParams(50, 3, 5), *impulses)

    def test_condition_order(self, impulses):
        anechoic, car = impulses
        with pytest.raises(SceneError):
            render_scene(music_like(1, 1.0, RATE, channels=2), CarSceneParams(50, 3, 5), car, anechoic)
