import numpy as np
import pytest

from anyrace.experiments import RecoveryOutcome, RecoverySetup, closest_member

ALGS = ["A", "B", "C"]


def test_closest_member_prefers_dominators():
    # A beats C early but B dominates A throughout
    theta = np.array([[0.40, 0.42, 0.18],
                      [0.20, 0.25, 0.55]])
    m, w = closest_member(theta, ALGS, "A", {"B", "C"})
    assert m == "B"
    assert w == pytest.approx(0.40 / 0.82)


def test_closest_member_without_dominator_uses_all():
    theta = np.array([[0.5, 0.3, 0.2], [0.2, 0.3, 0.5]])
    m, w = closest_member(theta, ALGS, "B", {"A", "C"})
    assert m in ("A", "C") and w == pytest.approx(0.6)


def test_extras_in_rope():
    o = RecoveryOutcome(0, ["B"], ["A", "B"], True, 3, 24, 10.0, 20.0, 0.1, {"A": ("B", 0.47)})
    assert o.covers_truth and o.extras_in_rope(0.05) and not o.extras_in_rope(0.02)


def test_setup_race_config():
    cfg = RecoverySetup(T=10).race_config(3)
    assert cfg.seed == 3 and cfg.elimination == "joint" and cfg.resolution == "crossing"
    assert len(cfg.grid) == 10
