from properties import monotonic_codec, monotonic_machine


def test_derivation_chains():
    assert monotonic_codec(3000, seed=21) == []


def test_machine_capability_instructions():
    assert monotonic_machine(3000, seed=22) == []
