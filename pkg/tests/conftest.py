import numpy as np
import pytest

from xmodal.features import SyntheticConfig, generate_synthetic

# Acceptance fixture: 1,000 images, 5,000 sentences, d=64.
FIXTURE = dict(n_images=1000, dim=64, topics=50, noise_sigma=0.1,
               concepts_per_image=(4, 10), concepts_per_sentence=(4, 10),
               seed=2021, stop_word_rate=0.2)

SMALL = dict(n_images=40, dim=16, topics=8, noise_sigma=0.1,
             concepts_per_image=(2, 6), concepts_per_sentence=(2, 6),
             seed=3, stop_word_rate=0.3)


@pytest.fixture(scope="session")
def fixture_packs():
    return generate_synthetic(SyntheticConfig(**FIXTURE))


@pytest.fixture(scope="session")
def small_packs():
    return generate_synthetic(SyntheticConfig(**SMALL))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance verdicts -------------------------------------------------------------

VERDICTS: list[tuple[str, bool, str]] = []


class Verdict:
    """Record one PASS/FAIL line per acceptance criterion."""

    def __init__(self, name: str):
        self.name = name
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        line = self.detail or (str(exc).splitlines()[0] if exc else "")
        VERDICTS.append((self.name, ok, line))
        print(f"{self.name}: {'PASS' if ok else 'FAIL'} {line}")
        return False


@pytest.fixture
def verdict():
    return Verdict


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in VERDICTS:
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
