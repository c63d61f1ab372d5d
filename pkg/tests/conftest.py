import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = Path(__file__).resolve().parents[1]
os.environ.setdefault("NSAD_DATA_DIR", str(ROOT / "data"))


def mnist_available() -> bool:
    d = Path(os.environ["NSAD_DATA_DIR"])
    return any(d.glob("train-images-idx3-ubyte*")) and any(d.glob("t10k-images-idx3-ubyte*"))


needs_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST IDX files not found (run scripts/fetch_mnist.py)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
