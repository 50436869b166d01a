from __future__ import annotations

import pytest

from twostep.model import Config


@pytest.fixture
def wide():
    """Config factory with a value domain large enough for handler examples."""

    def make(n: int, e: int, f: int, variant: str = "task", **kw) -> Config:
        kw.setdefault("value_domain", tuple(range(10)))
        return Config(n, e, f, variant, **kw)

    return make
