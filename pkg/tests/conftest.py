import torch

torch.set_num_threads(1)

import pytest

from hilt import scripted_demo


@pytest.fixture(scope="session")
def reach_episode():
    return scripted_demo("reach_grasp", 11)


@pytest.fixture(scope="session")
def stack_episode():
    return scripted_demo("stack", 21)


@pytest.fixture(scope="session")
def place_episode():
    return scripted_demo("precise_place", 31)
