import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

# eps=10, delta=1e-5, C=0.1, T=5000
KAPPA = 0.010857362047581294


@pytest.fixture
def kappa():
    return KAPPA
