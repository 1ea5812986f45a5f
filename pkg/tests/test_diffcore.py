"""Autodiff substrate: op semantics, gradient oracle, optimizer, determinism."""

import numpy as np
import pytest

from karma.diffcore import (
    AdamW, GradCheckError, NonFiniteError, OptimizerState, ShapeError, Tape,
    TapeError, Tensor, adamw_step, add, attention, concat, cross_entropy,
    gather_rows, gelu, getitem, grad_check, l2_normalize, layer_norm, log_softmax,
    matmul, mse, mul, power, reshape, sigmoid, softmax, softplus, tmean,
    transpose, tsum, use_dtype,
)


@pytest.fixture(autouse=True)
def _f64():
    with use_dtype(np.float64):
        yield


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- forward

def test_matmul_identity():
    a = rng().normal(size=(3, 5))
    out = matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_allclose(out.data, a)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_softmax_symmetry():
    out = softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.25] * 4)


def test_softmax_rows_sum_to_one():
    x = Tensor(rng().normal(size=(7, 11)) * 5)
    s = softmax(x).data
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(7), atol=1e-9)


def test_layer_norm_row_stats():
    x = Tensor(rng().normal(size=(4, 16)) * 3 + 1)
    y = layer_norm(x).data
    np.testing.assert_allclose(y.mean(axis=-1), np.zeros(4), atol=1e-9)
    np.testing.assert_allclose(y.var(axis=-1), np.ones(4), atol=1e-4)


def test_attention_rows_stochastic_and_causal_exact():
    q = Tensor(rng(1).normal(size=(2, 3, 6, 4)))
    k = Tensor(rng(2).normal(size=(2, 3, 6, 4)))
    v = Tensor(rng(3).normal(size=(2, 3, 6, 4)))
    cap = []
    attention(q, k, v, causal=True, capture=cap)
    w = cap[0]
    np.testing.assert_allclose(w.sum(axis=-1), np.ones((2, 3, 6)), atol=1e-9)
    for i in range(6):
        for j in range(i + 1, 6):
            assert np.all(w[..., i, j] == 0.0)


def test_attention_key_mask_excludes_keys():
    q = Tensor(rng(1).normal(size=(1, 4, 3)))
    k = Tensor(rng(2).normal(size=(1, 4, 3)))
    v = Tensor(rng(3).normal(size=(1, 4, 3)))
    mask = np.array([True, True, False, True])
    cap = []
    attention(q, k, v, key_mask=mask, capture=cap)
    assert np.all(cap[0][..., 2] == 0.0)


def test_non_finite_forward_fails_with_op_name():
    from karma.diffcore import log
    with np.errstate(divide="ignore"), pytest.raises(NonFiniteError, match="log"):
        log(Tensor([0.0]))


def test_leaf_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


# ---------------------------------------------------------------- backward

def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = tsum(mul(x, x))
    tape.backward(y)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_softmax_ce_is_probs_minus_onehot():
    logits = Tensor(rng().normal(size=(1, 5)), requires_grad=True)
    target = np.array([2])
    with Tape() as tape:
        loss = cross_entropy(logits, target)
    tape.backward(loss)
    probs = np.exp(logits.data - logits.data.max()) / np.exp(logits.data - logits.data.max()).sum()
    expected = probs.copy()
    expected[0, 2] -= 1.0
    np.testing.assert_allclose(logits.grad, expected, atol=1e-12)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = mul(x, x)
    with pytest.raises(TapeError):
        tape.backward(y)


def test_backward_twice_rejected():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        y = tsum(mul(x, x))
    tape.backward(y)
    with pytest.raises(TapeError):
        tape.backward(y)


def test_no_recording_without_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = mul(x, x)
    assert y._backward is None and not y.requires_grad


def test_grad_accumulates_across_shared_use():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = add(mul(x, x), mul(x, x))
        loss = tsum(y)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [12.0])


# ---------------------------------------------------------------- grad_check

def test_grad_check_simple_quadratic():
    x = Tensor(rng().normal(size=16))
    assert grad_check(lambda z: tsum(mul(z, z)), x) < 1e-7


def test_grad_check_detects_nondeterminism():
    r = rng(4)

    def noisy(z):
        return tsum(mul(z, Tensor(r.normal(size=z.shape))))

    with pytest.raises(GradCheckError):
        grad_check(noisy, Tensor(r.normal(size=4)))


def test_grad_check_requires_float64():
    with use_dtype(np.float32):
        x = Tensor(np.zeros(3, dtype=np.float32), dtype=np.float32)
    with pytest.raises(GradCheckError):
        grad_check(lambda z: tsum(z), x)


OPS = {
    "add_broadcast": lambda z: tsum(add(z, Tensor(rng(11).normal(size=(1, z.shape[-1]))))),
    "mul_broadcast": lambda z: tsum(mul(z, Tensor(rng(12).normal(size=(1, z.shape[-1]))))),
    "matmul": lambda z: tsum(matmul(z, Tensor(rng(13).normal(size=(z.shape[-1], 3))))),
    "transpose": lambda z: tsum(mul(transpose(z), transpose(z))),
    "reshape": lambda z: tsum(power(reshape(z, (-1,)), 3.0)),
    "concat": lambda z: tsum(mul(concat([z, z], axis=0), Tensor(rng(14).normal(size=(2 * z.shape[0], z.shape[1]))))),
    "slice": lambda z: tsum(mul(getitem(z, (slice(1, 3), slice(None))), 2.0)),
    "fancy_index": lambda z: tsum(getitem(z, (np.array([0, 2, 2]), np.array([1, 0, 3])))),
    "gather": lambda z: tsum(gather_rows(z, np.array([[0, 1], [3, 1]]))),
    "softmax": lambda z: tsum(mul(softmax(z), Tensor(rng(15).normal(size=z.shape)))),
    "log_softmax": lambda z: tsum(mul(log_softmax(z), Tensor(rng(16).normal(size=z.shape)))),
    "layer_norm": lambda z: tsum(mul(layer_norm(z), Tensor(rng(17).normal(size=z.shape)))),
    "gelu": lambda z: tsum(gelu(z)),
    "sigmoid": lambda z: tsum(sigmoid(z)),
    "softplus": lambda z: tsum(softplus(z)),
    "mean_axis": lambda z: tsum(mul(tmean(z, axis=1), Tensor(rng(18).normal(size=(z.shape[0],))))),
    "mse": lambda z: mse(z, Tensor(rng(19).normal(size=z.shape))),
    "cross_entropy": lambda z: cross_entropy(z, np.array([1, 0, 3, 2])),
    "l2_normalize": lambda z: tsum(mul(l2_normalize(z), Tensor(rng(20).normal(size=z.shape)))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_grad_check_each_op_five_points(name):
    f = OPS[name]
    for seed in range(5):
        x = Tensor(rng(100 + seed).normal(size=(4, 5)))
        assert grad_check(f, x) < 1e-5, f"{name} failed at seed {seed}"


def test_grad_check_attention_all_inputs():
    r = rng(7)
    k = Tensor(r.normal(size=(2, 5, 3)))
    v = Tensor(r.normal(size=(2, 5, 3)))
    w = Tensor(r.normal(size=(2, 5, 3)))
    for seed in range(5):
        q = Tensor(rng(200 + seed).normal(size=(2, 5, 3)))
        assert grad_check(lambda z: tsum(mul(attention(z, k, v, causal=True), w)), q) < 1e-5
        assert grad_check(lambda z: tsum(mul(attention(q, z, v, causal=True), w)), Tensor(k.data.copy())) < 1e-5
        assert grad_check(lambda z: tsum(mul(attention(q, k, z, causal=True), w)), Tensor(v.data.copy())) < 1e-5


# ---------------------------------------------------------------- optimizer

def _params(vals):
    return {k: Tensor(v, requires_grad=True) for k, v in vals.items()}


def test_adamw_zero_grad_zero_decay_unchanged():
    p = _params({"w": np.array([1.0, -2.0])})
    st = OptimizerState(weight_decay=0.0)
    adamw_step(st, p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_constant_gradient_approaches_signed_lr():
    p = _params({"w": np.array([0.0, 0.0])})
    st = OptimizerState(lr=1e-3, weight_decay=0.0)
    g = np.array([0.37, -1.4])
    prev = p["w"].data.copy()
    for _ in range(500):
        prev = p["w"].data.copy()
        adamw_step(st, p, {"w": g})
    step = p["w"].data - prev
    np.testing.assert_allclose(step, -np.sign(g) * 1e-3, rtol=1e-3)


def test_adamw_single_step_matches_hand_computation():
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.1
    p0, g = 1.0, 0.5
    m0, v0 = 0.1, 0.04
    st = OptimizerState(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd,
                        step_count=1, m={"w": np.array([m0])}, v={"w": np.array([v0])})
    p = _params({"w": np.array([p0])})
    adamw_step(st, p, {"w": np.array([g])})
    # plain-float recomputation of the same update
    t = 2
    m1 = b1 * m0 + (1 - b1) * g
    v1 = b2 * v0 + (1 - b2) * g * g
    mhat = m1 / (1 - b1 ** t)
    vhat = v1 / (1 - b2 ** t)
    expected = p0 - lr * (mhat / (np.sqrt(vhat) + eps) + wd * p0)
    np.testing.assert_allclose(p["w"].data, [expected], rtol=1e-12)


def test_adamw_step_counter_strictly_increases():
    p = _params({"w": np.zeros(1)})
    st = OptimizerState()
    seen = []
    for _ in range(3):
        adamw_step(st, p, {"w": np.ones(1)})
        seen.append(st.step_count)
    assert seen == [1, 2, 3]


def test_adamw_rejects_shape_mismatch_and_nonfinite():
    p = _params({"w": np.zeros(2)})
    with pytest.raises(ShapeError):
        adamw_step(OptimizerState(), p, {"w": np.zeros(3)})
    from karma.errors import NumericError
    with pytest.raises(NumericError):
        adamw_step(OptimizerState(), p, {"w": np.array([1.0, np.nan])})


def test_adamw_class_reads_grads_and_zeroes():
    p = _params({"w": np.array([1.0])})
    opt = AdamW(p, lr=0.1, weight_decay=0.0)
    p["w"].grad = np.array([1.0])
    opt.step()
    opt.zero_grad()
    assert p["w"].grad is None
    assert p["w"].data[0] < 1.0


def test_training_determinism_bitwise():
    def run():
        r = np.random.default_rng(123)
        p = _params({"w": r.normal(size=(4, 4))})
        opt = AdamW(p, lr=1e-3)
        for step in range(20):
            x = Tensor(np.random.default_rng(1000 + step).normal(size=(4, 4)))
            with Tape() as tape:
                loss = mse(matmul(p["w"], x), Tensor(np.eye(4)))
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
        return p["w"].data.tobytes()

    assert run() == run()
