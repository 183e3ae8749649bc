import pytest

from twinet.broker import Broker


@pytest.fixture()
def broker():
    with Broker(port=0) as b:
        yield b
