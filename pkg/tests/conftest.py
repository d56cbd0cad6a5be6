import pytest

from seeded_hash import Distribution, HashConfig


def make_items(n, prefix='item'):
    """ n itens distintos, determinísticos. """
    return [f"{prefix}-{i}".encode('utf-8') for i in range(n)]


@pytest.fixture
def items():
    return make_items(1000)


@pytest.fixture
def uniform_cfg():
    return HashConfig(m=64, global_salt=7, distribution=Distribution.UNIFORM)


@pytest.fixture
def stable_cfg():
    return HashConfig(m=64, global_salt=7, distribution=Distribution.STABLE, alpha=0.05)
