import numpy as np
import pytest

from apiq import autodiff as ad
from apiq.errors import StateError
from apiq.rng import RngState


def _check(f, inputs, tol=1e-5):
    rep = ad.gradcheck(f, inputs)
    assert rep.ok(tol), f"max rel err {rep.max_rel_err}"


def _rand(seed, shape):
    return RngState(seed).randn(shape)


SEEDS = list(range(20))


# ---------------------------------------------------------------------------
# per-primitive gradchecks, f64, 20 seeded shapes each
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_matmul(seed):
    r = RngState(seed)
    m, k, n = (int(x) for x in r.randint(1, 5, (3,)))
    a = ad.Var(r.randn((m, k)))
    b = ad.Var(r.randn((k, n)))
    t = r.randn((m, n))
    _check(lambda a, b: ad.mse(ad.matmul(a, b), t), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_add_sub_mul_div(seed):
    r = RngState(seed)
    shape = tuple(int(x) for x in r.randint(1, 4, (2,)))
    a = ad.Var(r.randn(shape))
    b = ad.Var(r.randn(shape) + 3.0)  # keep divisors away from zero
    t = r.randn(shape)
    _check(lambda a, b: ad.mse(ad.add(a, b), t), [a, b])
    _check(lambda a, b: ad.mse(ad.sub(a, b), t), [a, b])
    _check(lambda a, b: ad.mse(ad.mul(a, b), t), [a, b])
    _check(lambda a, b: ad.mse(ad.div(a, b), t), [a, b])


@pytest.mark.parametrize("seed", SEEDS[:10])
def test_gradcheck_broadcast_grads(seed):
    r = RngState(seed)
    a = ad.Var(r.randn((3, 2, 4)))
    b = ad.Var(r.randn((2, 4)) + 2.5)
    t = r.randn((3, 2, 4))
    _check(lambda a, b: ad.mse(ad.mul(a, b), t), [a, b])
    _check(lambda a, b: ad.mse(ad.div(a, b), t), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_unary(seed):
    r = RngState(seed)
    shape = tuple(int(x) for x in r.randint(1, 5, (2,)))
    x = ad.Var(r.randn(shape))
    t = r.randn(shape)
    _check(lambda x: ad.mse(ad.neg(x), t), [x])
    _check(lambda x: ad.mse(ad.scale(x, -1.7), t), [x])
    _check(lambda x: ad.mse(ad.exp(x), t), [x])
    _check(lambda x: ad.mse(ad.sigmoid(x), t), [x])
    _check(lambda x: ad.mse(ad.silu(x), t), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_softmax(seed):
    r = RngState(seed)
    x = ad.Var(r.randn((3, 5)))
    t = r.randn((3, 5))
    _check(lambda x: ad.mse(ad.softmax(x), t), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_causal_softmax(seed):
    r = RngState(seed)
    x = ad.Var(r.randn((2, 4, 4)))
    t = r.randn((2, 4, 4))
    _check(lambda x: ad.mse(ad.causal_softmax(x), t), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_rmsnorm(seed):
    r = RngState(seed)
    x = ad.Var(r.randn((2, 3, 6)))
    g = ad.Var(r.randn((6,)))
    t = r.randn((2, 3, 6))
    _check(lambda x, g: ad.mse(ad.rmsnorm(x, g), t), [x, g])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_embedding(seed):
    r = RngState(seed)
    table = ad.Var(r.randn((7, 4)))
    ids = r.randint(0, 7, (2, 5))
    t = r.randn((2, 5, 4))
    _check(lambda table: ad.mse(ad.embedding(table, ids), t), [table])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_rope(seed):
    r = RngState(seed)
    x = ad.Var(r.randn((2, 3, 4)))  # (n, t, pairs*2)
    ang = r.uniform((3, 2), 0, 6.28)
    cos, sin = np.cos(ang), np.sin(ang)
    t = r.randn((2, 3, 4))
    _check(lambda x: ad.mse(ad.rope_rotate(x, cos, sin), t), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_clamp_maximum(seed):
    r = RngState(seed)
    # keep samples away from the kinks so central differences are valid
    x = ad.Var(np.where(r.uniform((3, 3)) < 0.5, -1.0, 1.0) * (0.4 + r.uniform((3, 3)) * 0.4))
    t = r.randn((3, 3))
    _check(lambda x: ad.mse(ad.clamp(x, -0.9, 0.9), t), [x])
    _check(lambda x: ad.mse(ad.maximum(x, -0.95), t), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_structural(seed):
    r = RngState(seed)
    x = ad.Var(r.randn((2, 3, 4)))
    t = r.randn((4, 3, 2))
    _check(lambda x: ad.mse(ad.transpose(x, (2, 1, 0)), t), [x])
    t2 = r.randn((6, 4))
    _check(lambda x: ad.mse(ad.reshape(x, (6, 4)), t2), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_cross_entropy(seed):
    r = RngState(seed)
    logits = ad.Var(r.randn((3, 4, 6)))
    targets = r.randint(0, 6, (3, 4))
    _check(lambda logits: ad.cross_entropy(logits, targets), [logits])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_round_ste_surrogate(seed):
    r = RngState(seed)
    x = ad.Var(r.randn((3, 3)))
    t = r.randn((3, 3))
    with ad.surrogate_round():
        _check(lambda x: ad.mse(ad.round_ste(ad.scale(x, 1.3)), t), [x])


# ---------------------------------------------------------------------------
# analytic spot checks
# ---------------------------------------------------------------------------

def test_silu_derivative_at_zero():
    x = ad.Var(np.zeros((1,)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.mse(ad.silu(x), np.full((1,), -1.0))
    ad.backward(tape, loss)
    # d mse/dx = 2*(silu(0) + 1)*silu'(0) = 2*1*0.5 = 1
    assert np.allclose(x.grad, 1.0)


def test_softmax_constant_vector():
    n = 7
    out = ad.softmax(ad.Var(np.full((n,), 2.2)))
    assert np.allclose(out.value, 1.0 / n)
    x = ad.Var(np.full((n,), 2.2), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.softmax(x)
        loss = ad.mse(y, y.value)  # gradient of sum of softmax is 0
    ad.backward(tape, loss)
    assert np.allclose(x.grad, 0.0)


def test_round_ste_gradient_is_identity():
    xv = np.array([0.2, 0.7, -1.6, 2.5])
    x = ad.Var(xv.copy(), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.mse(ad.round_ste(x), np.zeros(4))
    ad.backward(tape, loss)
    assert np.allclose(x.grad, 2.0 * np.rint(xv) / 4)


def test_backward_zero_residual():
    x = ad.Var(RngState(1).randn((3, 3)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.mse(x, x.value.copy())
    ad.backward(tape, loss)
    assert np.allclose(x.grad, 0.0)


def test_backward_twice_raises():
    x = ad.Var(np.ones((2,)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.mse(x, np.zeros(2))
    ad.backward(tape, loss)
    with pytest.raises(StateError):
        ad.backward(tape, loss)


def test_backward_before_forward_raises():
    with pytest.raises(StateError):
        ad.backward(ad.Tape(), ad.Var(np.zeros(())))


def test_non_scalar_loss_rejected():
    x = ad.Var(np.ones((2,)), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.add(x, x)
    with pytest.raises(ValueError):
        ad.backward(tape, y)


def test_gradient_accumulation_matches_duplicated_inputs():
    r = RngState(9)
    xv = r.randn((4,))
    c1, c2 = r.randn((4,)), r.randn((4,))
    t = r.randn((4,))

    x = ad.Var(xv.copy(), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.mse(ad.add(ad.mul(x, c1), ad.mul(x, c2)), t)
    ad.backward(tape, loss)

    x1 = ad.Var(xv.copy(), requires_grad=True)
    x2 = ad.Var(xv.copy(), requires_grad=True)
    with ad.Tape() as tape2:
        loss2 = ad.mse(ad.add(ad.mul(x1, c1), ad.mul(x2, c2)), t)
    ad.backward(tape2, loss2)
    assert np.allclose(x.grad, x1.grad + x2.grad)


def test_gradients_deterministic():
    r = RngState(13)
    xv, wv = r.randn((5, 3)), r.randn((3, 2))
    t = r.randn((5, 2))
    grads = []
    for _ in range(2):
        x = ad.Var(xv.copy(), requires_grad=True)
        w = ad.Var(wv.copy(), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.mse(ad.silu(ad.matmul(x, w)), t)
        ad.backward(tape, loss)
        grads.append((x.grad.tobytes(), w.grad.tobytes()))
    assert grads[0] == grads[1]


def test_gradcheck_linear_map_near_exact():
    r = RngState(21)
    w = r.randn((4, 3))
    x = ad.Var(r.randn((2, 4)))
    t = r.randn((2, 3))
    rep = ad.gradcheck(lambda x: ad.mse(ad.matmul(x, w), t), [x])
    assert rep.max_rel_err <= 1e-9


def test_gradcheck_composed_expression():
    r = RngState(22)
    x = ad.Var(r.randn((3, 4)))
    w = ad.Var(r.randn((4, 2)))
    t = r.randn((3, 2))
    rep = ad.gradcheck(lambda x, w: ad.mse(ad.silu(ad.matmul(x, w)), t), [x, w])
    assert rep.max_rel_err <= 1e-5
