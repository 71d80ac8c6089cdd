import pytest

from sslsentry.ca import generate_ca
from sslsentry.labpki import make_server_identity


@pytest.fixture(scope="session")
def intercept_ca():
    return generate_ca(365, seed=20_000)


@pytest.fixture(scope="session")
def upstream_identity():
    return make_server_identity(["shop.test"], depth=2, org="ShopCo")


@pytest.fixture(scope="session")
def deep_identity():
    return make_server_identity(["api.depth3.test"], depth=3)
