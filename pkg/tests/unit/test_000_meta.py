# -*- coding: utf-8 -*-
import pytest


def test_import():
    import panodeform

    meta = panodeform.__meta__
    assert meta


@pytest.mark.parametrize(
    "name",
    [
        ("name"),
        ("version"),
        ("author"),
        ("license"),
        ("author-email"),
        ("summary"),
    ],
)
def test_attr(name):
    import panodeform

    metadata = panodeform.__meta__
    assert metadata[name]
