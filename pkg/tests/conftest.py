from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

os.environ.setdefault("ATTNEDIT_CACHE", str(Path(__file__).parent / "_cache"))


@pytest.fixture(scope="session")
def world():
    """Reference world with trained classifier (cached on disk)."""
    from attnedit.zoo import load_or_train_world

    return load_or_train_world()


@pytest.fixture(scope="session")
def bare_world():
    """World without a classifier (cheap, for grammar/render tests)."""
    from attnedit.world import World

    return World()


@pytest.fixture(scope="session")
def reference():
    """(world, trained net, schedule) — trains once, then loads the cache."""
    from attnedit.zoo import load_or_train_reference

    return load_or_train_reference()


@pytest.fixture(scope="session")
def sched():
    from attnedit.schedule import make_schedule

    return make_schedule()
