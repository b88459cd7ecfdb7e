import numpy as np
import pytest

from cadenza_eval.signal_io import AudioBuffer


def sine(freq, duration_s, rate, amplitude=1.0, channels=1, phase=0.0):
    t = np.arange(int(round(duration_s * rate))) / rate
    x = amplitude * np.sin(2 * np.pi * freq * t + phase)
    return AudioBuffer(np.tile(x, (channels, 1)), rate)


def music_like(seed, duration_s=3.0, rate=24000, channels=1):
    """Short harmonic-plus-noise test signal with a time-varying envelope."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate
    out = np.zeros((channels, n))
    for ch in range(channels):
        for _ in range(6):
            f0 = rng.uniform(110, 880)
            env = 0.5 * (1 + np.sin(2 * np.pi * rng.uniform(0.5, 3) * t + rng.uniform(0, 6)))
            for k in range(1, 5):
                out[ch] += env * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 6)) / k
        out[ch] += 0.05 * rng.standard_normal(n)
    out *= 0.1 / np.sqrt(np.mean(out**2))
    return AudioBuffer(out, rate)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ------------------------------------------------------

_ACCEPTANCE: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): one end-to-end acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    label = marker.args[0]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.skipped:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
            _ACCEPTANCE[label] = f"SKIP  {reason.removeprefix('Skipped: ')}"
        elif report.passed:
            detail = dict(item.user_properties).get("detail", "")
            _ACCEPTANCE[label] = f"PASS  {detail}".rstrip()
        else:
            _ACCEPTANCE[label] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, verdict in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{label:<28} {verdict}")
