import numpy as np
import pytest
from hypothesis import settings

from gsavatar.parammaps import build_canonical_template
from gsavatar.synthetic import build_skeleton, build_template

settings.register_profile("suite", max_examples=30, deadline=None)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def skeleton():
    return build_skeleton()


@pytest.fixture(scope="session")
def template(skeleton):
    return build_template(skeleton)


@pytest.fixture(scope="session")
def ct_small(template):
    # 64 keeps every parameterization/test render cheap
    return build_canonical_template(template, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
