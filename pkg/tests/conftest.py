import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from clab import synthdata as sd  # noqa: E402
from clab.model import Example, ModelConfig, init_model  # noqa: E402


@pytest.fixture(scope="session")
def toy_langs():
    root = sd.make_language("A", 3, code_token="<L0>", alphabet="abcdefgh")
    child = sd.make_language("B", 4, code_token="<L1>", alphabet="abcdefgh", parent="A", mutation_rate=0.5)
    return sd.resolve_roster([root, child])


def make_examples(lang, n, start=0, max_chars=20):
    out = []
    for i in range(start, start + n):
        text = sd.make_text(lang, i, max_chars=max_chars)[:max_chars].strip()
        out.append(Example(sd.synthesize(lang, text, i), text, lang.code))
    return out


@pytest.fixture(scope="session")
def toy_examples(toy_langs):
    return {lid: make_examples(lang, 12) for lid, lang in toy_langs.items()}


@pytest.fixture(scope="session")
def base_model():
    return init_model(ModelConfig(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
