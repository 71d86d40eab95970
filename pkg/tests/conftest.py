import pytest

from rationalpg import hograd as hg


@pytest.fixture(params=hg.available_backends())
def backend(request):
    """Run a test once per tape backend."""
    with hg.use_backend(request.param):
        yield request.param
