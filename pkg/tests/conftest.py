import numpy as np
import pytest

from koopgame.dictionary import build_rff
from koopgame.edmdc import fit_edmdc, generate_training_data, turret_grid
from koopgame.game import TurretDefenseGame


@pytest.fixture(scope="session")
def turret_game():
    return TurretDefenseGame()


@pytest.fixture(scope="session")
def turret_model(turret_game):
    """Default-configuration EDMDc model, trained once per session."""
    dictionary = build_rff(seed=0)
    data = generate_training_data(turret_game, dictionary, turret_grid())
    return fit_edmdc(data, dictionary, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line ``criterion N: PASS|FAIL  detail``."""
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
