"""Shared fixtures for the test suite."""

import pytest

from embrec import prompts


@pytest.fixture(scope="session")
def templates():
    return prompts.load_templates()
