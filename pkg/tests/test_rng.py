import numpy as np

from apiq.rng import RngState


def test_same_seed_same_stream():
    a = RngState(1).randn((2,))
    b = RngState(1).randn((2,))
    assert np.array_equal(a, b)


def test_stream_advances():
    r = RngState(1)
    a = r.randn((2,))
    b = r.randn((2,))
    assert not np.array_equal(a, b)


def test_randn_moments():
    z = RngState(7).randn((100_000,))
    assert abs(z.mean()) < 0.02
    assert abs(z.var() - 1.0) < 0.05


def test_scalar_shape():
    z = RngState(3).randn(())
    assert z.shape == ()
    assert np.isfinite(z)


def test_uniform_range_and_moments():
    u = RngState(11).uniform((50_000,), -0.5, 0.5)
    assert u.min() >= -0.5 and u.max() < 0.5
    assert abs(u.mean()) < 0.01


def test_randint_bounds():
    v = RngState(5).randint(3, 17, (10_000,))
    assert v.min() >= 3 and v.max() < 17
    assert v.dtype == np.int64


def test_derive_independent_and_stable():
    r = RngState(42)
    c1 = r.derive(1)
    c2 = r.derive(2)
    again = RngState(42).derive(1)
    assert c1.seed == again.seed
    assert c1.seed != c2.seed
    assert not np.array_equal(c1.randn((4,)), c2.randn((4,)))


def test_counter_reproducibility_across_calls():
    r = RngState(9)
    r.randn((3,))
    tail = r.randn((3,))
    r2 = RngState(9)
    both = r2.randn((6,))
    # Box-Muller pairs differ by batch, but uniforms are counter-pure
    u1 = RngState(9).uniform((6,))
    r3 = RngState(9)
    u2 = np.concatenate([r3.uniform((2,)), r3.uniform((4,))])
    assert np.array_equal(u1, u2)
    assert tail.shape == (3,) and both.shape == (6,)
