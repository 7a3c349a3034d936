import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tsphase.core import AnnotationSet, FeatureSequence, LabelSequence, UncertaintySequence


def make_unc(pred, unc, num_classes=None):
    """UncertaintySequence with given predictions and scores."""
    pred = np.asarray(pred)
    C = num_classes or int(pred.max())
    mean = np.full((pred.size, C), 0.0)
    mean[np.arange(pred.size), pred - 1] = 1.0
    return UncertaintySequence(pred, np.asarray(unc, dtype=float), mean)


def make_ann(T, stamps, C=None, full=None, sid="seq"):
    C = C or max(c for _, c in stamps)
    return AnnotationSet(sid, T, C, tuple(stamps), full)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_video():
    labels = np.array([1] * 6 + [2] * 5 + [3] * 7)
    feats = FeatureSequence("vid", np.random.default_rng(0).normal(size=(labels.size, 4)))
    ann = AnnotationSet("vid", labels.size, 3, ((3, 1), (8, 2), (15, 3)), LabelSequence(labels, "vid"))
    return feats, ann


# acceptance verdicts, printed once at the end of the session
VERDICTS: dict[str, tuple[bool, str]] = {}


def record_verdict(criterion: str, passed: bool, detail: str = "") -> bool:
    VERDICTS[criterion] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(VERDICTS):
        passed, detail = VERDICTS[name]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
