"""Shared fixtures.  Anything heavier than a bare GridModel is session-scoped
so the expensive desk builds happen once per run."""
import numpy as np
import pytest

from lvbess.grid import Branch, Bus, GridBase, GridModel
from lvbess.io import cigre_grid
from lvbess.scenarios import build_system, desk_scenario


def three_bus_grid() -> GridModel:
    """Slack plus two load buses on stiff 398 A mains cable."""
    return GridModel(
        buses=[Bus("B1", is_slack=True), Bus("B2"), Bus("B3")],
        branches=[Branch("B1", "B2", 0.405, 0.205, 35.0, 398.0),
                  Branch("B2", "B3", 0.405, 0.205, 35.0, 398.0)],
        base=GridBase())


@pytest.fixture
def desk_grid() -> GridModel:
    return three_bus_grid()


@pytest.fixture(scope="session")
def cigre() -> GridModel:
    return cigre_grid()


@pytest.fixture(scope="session")
def desk_system():
    """The two-day desk scenario at 150 EUR/kWh, exactly as the CLI builds it."""
    return build_system(desk_scenario(), 150.0)
