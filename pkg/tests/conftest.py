import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from jpsro.games import build_game
from jpsro.policies import policy_from_table


@pytest.fixture(scope="session")
def rps():
    return build_game("rock_paper_scissors")


@pytest.fixture(scope="session")
def kuhn2():
    return build_game("kuhn_poker(players=2)")


@pytest.fixture(scope="session")
def kuhn3():
    return build_game("kuhn_poker(players=3)")


@pytest.fixture(scope="session")
def avoid():
    return build_game("avoid_direction")


@pytest.fixture(scope="session")
def rps_pures(rps):
    """The three pure strategies per player, in R, P, S order."""
    pures = []
    for p in range(2):
        row = []
        for a in range(3):
            probs = np.zeros(3)
            probs[a] = 1.0
            row.append(policy_from_table(rps, p, {"choice": probs}))
        pures.append(row)
    return pures
